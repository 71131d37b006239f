//! Fast internal consistency checks behind `melt selfcheck`.

use serde::Serialize;

use crate::data::{manifest_to_string, parse_manifest, EmbeddingBank, SynthConfig};
use crate::dsd::{ddim_step, forward_diffuse, DsdConfig};
use crate::error::Result;
use crate::math::gradcheck::{check_gradients, GradCheckOptions};
use crate::math::rng::{normal_matrix, normal_vec, seeded};
use crate::math::{ParamStore, Tape, Var};
use crate::model::MeltModel;
use crate::ratr::RatrConfig;
use crate::train::{forward_batch, resolve_triplets, train_epoch, BatchContext, Checkpoint, TrainConfig, Triplet};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfcheckOptions {
    /// Routes the operator check through an op with a wrong backward rule.
    pub inject_gradient_bug: bool,
}

const GRAD_TOLERANCE: f64 = 1e-3;

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
    }
}

pub fn run(opts: SelfcheckOptions) -> Vec<CheckOutcome> {
    vec![
        outcome("gradient/operators", operator_gradients(opts.inject_gradient_bug)),
        outcome("gradient/objective", objective_gradients()),
        outcome("diffusion/forward", forward_marginals()),
        outcome("diffusion/ddim", ddim_consistency()),
        outcome("format/bank", bank_round_trip()),
        outcome("format/manifest", manifest_round_trip()),
        outcome("format/checkpoint", checkpoint_round_trip()),
    ]
}

fn operator_gradients(inject: bool) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let a = store.add("a", normal_matrix(&mut rng, 3, 4));
        let b = store.add("b", normal_matrix(&mut rng, 4, 3));
        let c = store.add("c", normal_matrix(&mut rng, 1, 3));
        let loss = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let (a, b, c) = (tape.param(st, a), tape.param(st, b), tape.param(st, c));
            let ab = tape.matmul(a, b);
            let x = tape.add_row(ab, c);
            let x = if inject { tape.faulty_identity(x, 2.0) } else { x };
            let s = tape.silu(x);
            let sm = tape.softmax_rows(s);
            let lsm = tape.log_softmax_rows(x);
            let n = tape.normalize_rows(x);
            let t = tape.transpose(n);
            let g = tape.sigmoid(t);
            let m = tape.mean_rows(g);
            let p = tape.mul(sm, lsm);
            let q = tape.concat_cols(&[p, x]);
            let r = tape.gather_cols(q, &[0, 4, 5]);
            let r = tape.gather_rows(r, &[2, 0]);
            let u = tape.sum_all(r);
            let v = tape.sum_all(m);
            let w = tape.scale_by(u, v);
            Ok(tape.sub(w, v))
        };
        let report = check_gradients(&store, &GradCheckOptions::default(), loss)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok((worst < GRAD_TOLERANCE, format!("max relative error {worst:.3e}")))
}

fn small_model(seed: u64) -> Result<(MeltModel, Vec<Triplet>, TrainConfig)> {
    let synth = SynthConfig {
        q: 4,
        d: 8,
        triplet_count: 48,
        concept_count: 6,
        direction_count: 10,
        rare_direction_fraction: 0.2,
        noise_sigma: 0.05,
        seed,
        ..SynthConfig::default()
    };
    let ds = crate::data::generate_synthetic(&synth)?;
    let data = resolve_triplets(&ds.manifest, &ds.reference, &ds.modification, &ds.target)?;
    let ratr = RatrConfig { heads: 2, warmup: 4, ..RatrConfig::default() };
    let dsd = DsdConfig { hidden: 8, time_embed_dim: 4, ddim_steps: 5, ..DsdConfig::default() };
    let model = MeltModel::new(&ratr, &dsd, 4, 8, 4, seed)?;
    Ok((model, data, TrainConfig { batch_size: 4, seed, ..TrainConfig::default() }))
}

fn objective_gradients() -> Result<(bool, String)> {
    let (mut model, data, cfg) = small_model(0)?;
    train_epoch(&mut model, &data, &TrainConfig { lr: 0.0, ..cfg.clone() }, 0)?;
    let batch: Vec<&Triplet> = data[..4].iter().collect();
    let mut ctx = BatchContext::draw(&model.arch, &cfg.ablation, 4, 0);
    let mut stats = model.stats.clone();
    forward_batch(&mut Tape::new(), &model.store, &model.arch, &mut stats, &batch, &cfg, &mut ctx)?;
    let report = check_gradients(&model.store, &GradCheckOptions::default(), |st, tape| {
        let mut stats = model.stats.clone();
        let mut ctx = ctx.clone();
        Ok(forward_batch(tape, st, &model.arch, &mut stats, &batch, &cfg, &mut ctx)?.loss)
    })?;
    Ok((report.max_rel_error < GRAD_TOLERANCE, format!("max relative error {:.3e}", report.max_rel_error)))
}

fn forward_marginals() -> Result<(bool, String)> {
    let schedule = DsdConfig::default().schedule()?;
    let x0 = [0.7, 0.1, 0.2];
    let (t, n) = (25, 4000);
    let ab = schedule.alpha_bar(t);
    let mut rng = seeded(1);
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let x = forward_diffuse(&x0, t, &normal_vec(&mut rng, 3), &schedule)?;
        for i in 0..3 {
            sum[i] += x[i];
            sq[i] += x[i] * x[i];
        }
    }
    let var = 1.0 - ab;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let mean = sum[i] / n as f64;
        let v = sq[i] / n as f64 - mean * mean;
        let z = (mean - ab.sqrt() * x0[i]).abs() / (var / n as f64).sqrt();
        worst = worst.max(z);
        ok &= z < 4.0 && (v / var - 1.0).abs() < 0.1;
    }
    Ok((ok, format!("worst mean z-score {worst:.2}")))
}

fn ddim_consistency() -> Result<(bool, String)> {
    let schedule = DsdConfig::default().schedule()?;
    let x0 = [0.9, 0.05, 0.05];
    let eps = [0.3, -1.2, 0.4];
    let mut worst: f64 = 0.0;
    for t in 1..=schedule.steps() {
        let xt = forward_diffuse(&x0, t, &eps, &schedule)?;
        for prev in 0..t {
            let got = ddim_step(&xt, t, prev, &x0, &schedule)?;
            let want = forward_diffuse(&x0, prev, &eps, &schedule)?;
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.3e}")))
}

fn bank_round_trip() -> Result<(bool, String)> {
    let mut bank = EmbeddingBank::new(2, 3);
    let mut rng = seeded(2);
    for id in ["a", "bb", "ccc"] {
        bank.insert(id, normal_matrix(&mut rng, 2, 3))?;
    }
    let back = EmbeddingBank::from_bytes(&bank.to_bytes())?;
    Ok((back == bank, format!("{} entries", back.len())))
}

fn manifest_round_trip() -> Result<(bool, String)> {
    let ds = crate::data::generate_synthetic(&SynthConfig { triplet_count: 20, ..SynthConfig::default() })?;
    let back = parse_manifest(&manifest_to_string(&ds.manifest)?)?;
    Ok((back == ds.manifest, format!("{} records", back.len())))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let (mut model, data, cfg) = small_model(3)?;
    train_epoch(&mut model, &data, &cfg, 0)?;
    let bytes = Checkpoint::capture(&model, 1).to_bytes();
    let (mut other, _, _) = small_model(4)?;
    Checkpoint::from_bytes(&bytes)?.restore(&mut other)?;
    let same = other.stats == model.stats
        && other.store.iter().zip(model.store.iter()).all(|(a, b)| {
            a.value == b.value && a.first_moment == b.first_moment && a.second_moment == b.second_moment && a.step == b.step
        });
    let stable = Checkpoint::capture(&other, 1).to_bytes() == bytes;
    Ok((same && stable, format!("{} bytes", bytes.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        for c in run(SelfcheckOptions::default()) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn injected_bug_is_named() {
        let out = run(SelfcheckOptions { inject_gradient_bug: true });
        let failed: Vec<&str> = out.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["gradient/operators"]);
    }
}
