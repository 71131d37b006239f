//! The training objective, the epoch loop and the ablation switches.

mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBank, TripletRecord};
use crate::dsd::{diffusion_rows_loss, draw_diffusion_noise, loss_kd, pooled_rows, similarity_matrix, Anchors};
use crate::error::{MeltError, Result};
use crate::math::rng::{derive_seed, seeded};
use crate::math::{adamw_step, AdamW, Matrix, ParamStore, Tape, Var};
use crate::model::{Architecture, MeltModel};
use crate::ratr::{refine_query, RarityStats, RatrSwitches, StatsAccess};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Samples a rarity statistic must have seen before its scores count
/// towards the rare/common score means of an epoch report.
pub const SCORE_REPORT_WARMUP: u64 = 500;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_attention: bool,
    pub no_threshold: bool,
    pub no_modification: bool,
    pub no_noise: bool,
    pub no_loss_diff: bool,
    pub no_loss_kd: bool,
}

impl AblationFlags {
    pub fn switches(&self) -> RatrSwitches {
        RatrSwitches {
            no_attention: self.no_attention,
            no_threshold: self.no_threshold,
            no_modification: self.no_modification,
        }
    }

    /// The full model followed by the six single-component removals.
    pub fn variants() -> Vec<(&'static str, AblationFlags)> {
        let none = AblationFlags::default();
        vec![
            ("full", none),
            ("wo_R_att", AblationFlags { no_attention: true, ..none }),
            ("wo_R_thr", AblationFlags { no_threshold: true, ..none }),
            ("wo_R_mod", AblationFlags { no_modification: true, ..none }),
            ("wo_D_nes", AblationFlags { no_noise: true, ..none }),
            ("wo_D_Ldiff", AblationFlags { no_loss_diff: true, ..none }),
            ("wo_D_LKD", AblationFlags { no_loss_kd: true, ..none }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            tau: 0.2,
            kappa: 0.3,
            lambda: 0.1,
            epochs: 30,
            seed: 0,
            weight_decay: 0.0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(MeltError::config("batch_size must be at least 2"));
        }
        if !(self.tau > 0.0) {
            return Err(MeltError::config("tau must be positive"));
        }
        if !(self.kappa >= 0.0 && self.lambda >= 0.0) {
            return Err(MeltError::config("kappa and lambda must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(MeltError::config("lr and weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// One resolved triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub reference: Matrix,
    pub modification: Matrix,
    pub target: Matrix,
    pub rare_truth: Option<bool>,
}

/// Looks every record up in the banks; fails listing all missing ids.
pub fn resolve_triplets(
    records: &[TripletRecord],
    references: &EmbeddingBank,
    modifications: &EmbeddingBank,
    targets: &EmbeddingBank,
) -> Result<Vec<Triplet>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let found = (references.get(&r.ref_id), modifications.get(&r.mod_id), targets.get(&r.target_id));
        match found {
            (Some(a), Some(b), Some(c)) => out.push(Triplet {
                reference: a.clone(),
                modification: b.clone(),
                target: c.clone(),
                rare_truth: r.rare_truth,
            }),
            (a, b, c) => {
                for (hit, id) in [(a.is_some(), &r.ref_id), (b.is_some(), &r.mod_id), (c.is_some(), &r.target_id)] {
                    if !hit {
                        missing.push(id.clone());
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(MeltError::data(format!("missing ids: {}", missing.join(", "))));
    }
    Ok(out)
}

/// Batch classification loss over a similarity matrix `S` (`B × B`):
/// `(1/B)·Σ_i −log softmax(S_i/τ)[i]`.
pub fn loss_bbc(tape: &mut Tape, similarities: Var, tau: f64) -> Result<Var> {
    let (rows, cols) = tape.value(similarities).shape();
    if !(tau > 0.0) {
        return Err(MeltError::config("tau must be positive"));
    }
    if rows != cols || rows < 2 {
        return Err(MeltError::shape(format!("batch loss needs a square B x B matrix with B >= 2, got {rows}x{cols}")));
    }
    let scaled = tape.scale(similarities, 1.0 / tau);
    let lsm = tape.log_softmax_rows(scaled);
    let eye = tape.constant(Matrix::identity(rows));
    let diag = tape.mul(lsm, eye);
    let sum = tape.sum_all(diag);
    Ok(tape.scale(sum, -1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bbc: f64,
    pub kd: f64,
    pub diff: f64,
}

/// `L_bbc + κ·L_KD + λ·L_diff`, with terms removed by the ablation flags.
pub fn total_loss(c: &LossComponents, kappa: f64, lambda: f64, flags: &AblationFlags) -> f64 {
    let mut l = c.bbc;
    if !flags.no_loss_kd {
        l += kappa * c.kd;
    }
    if !flags.no_loss_diff {
        l += lambda * c.diff;
    }
    l
}

/// Randomness and teacher targets for one batch, fixed before the forward
/// pass so that repeated evaluations (e.g. gradient checks) see the same
/// objective.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchContext {
    pub noise: Vec<(usize, Vec<f64>)>,
    pub teacher_seed: u64,
    pub teacher: Option<Matrix>,
}

impl BatchContext {
    pub fn draw(arch: &Architecture, flags: &AblationFlags, batch: usize, seed: u64) -> Self {
        let mut rng = seeded(derive_seed(seed, &[0]));
        Self {
            noise: draw_diffusion_noise(&mut rng, batch, arch.width, arch.schedule.steps(), flags.no_noise),
            teacher_seed: derive_seed(seed, &[1]),
            teacher: None,
        }
    }
}

pub struct BatchForward {
    pub loss: Var,
    pub bbc: Var,
    pub kd: Option<Var>,
    pub diff: Option<Var>,
    pub similarities: Var,
    /// Samples whose gate could fire (statistics warm).
    pub eligible: usize,
    pub gated: usize,
    /// `(rare_truth, score)` for samples scored after the report warmup.
    pub scores: Vec<(Option<bool>, f64)>,
}

/// Builds the full objective for one batch. Rarity statistics are updated
/// in sample order.
pub fn forward_batch(
    tape: &mut Tape,
    store: &ParamStore,
    arch: &Architecture,
    stats: &mut RarityStats,
    batch: &[&Triplet],
    cfg: &TrainConfig,
    ctx: &mut BatchContext,
) -> Result<BatchForward> {
    let flags = cfg.ablation;
    if batch.len() != arch.width {
        return Err(MeltError::shape(format!("batch of {} for a width-{} model", batch.len(), arch.width)));
    }
    let mut composed = Vec::with_capacity(batch.len());
    let (mut eligible, mut gated) = (0, 0);
    let mut scores = Vec::new();
    for item in batch {
        let f_r = tape.constant(item.reference.clone());
        let f_m = tape.constant(item.modification.clone());
        let out = refine_query(
            tape,
            store,
            &arch.ratr,
            &arch.ratr_cfg,
            flags.switches(),
            StatsAccess::Train(stats),
            f_r,
            f_m,
        )?;
        if out.score.is_some() && stats.gate_ready(arch.ratr_cfg.warmup) {
            eligible += 1;
            gated += usize::from(out.gated);
        }
        if let Some(s) = out.score {
            if stats.observation_count > SCORE_REPORT_WARMUP {
                scores.push((item.rare_truth, s));
            }
        }
        composed.push(out.composed);
    }
    let targets: Vec<Matrix> = batch.iter().map(|t| t.target.clone()).collect();
    let s = similarity_matrix(tape, &composed, &targets)?;
    let bbc = loss_bbc(tape, s, cfg.tau)?;

    let pooled: Vec<Var> = composed.iter().map(|c| tape.mean_rows(*c)).collect();
    let target_pooled = pooled_rows(&targets);

    let kd = if flags.no_loss_kd {
        None
    } else {
        if ctx.teacher.is_none() {
            let values = pooled_rows(&composed.iter().map(|c| tape.value(*c).clone()).collect::<Vec<_>>());
            let refiner = crate::dsd::Refiner {
                store,
                params: &arch.denoiser,
                schedule: &arch.schedule,
                ddim_steps: arch.dsd_cfg.ddim_steps,
                tau: cfg.tau,
            };
            let teacher = refiner.refine_similarities(
                tape.value(s),
                &Anchors::Diagonal,
                &values,
                &target_pooled,
                ctx.teacher_seed,
            )?;
            ctx.teacher = Some(teacher);
        }
        let teacher = ctx.teacher.as_ref().expect("teacher set above");
        Some(loss_kd(tape, s, teacher, cfg.tau)?)
    };

    let diff = if flags.no_loss_diff {
        None
    } else {
        let rows: Vec<(Var, usize, Var, Matrix)> = (0..batch.len())
            .map(|j| (tape.gather_rows(s, &[j]), j, pooled[j], target_pooled.clone()))
            .collect();
        Some(diffusion_rows_loss(
            tape,
            store,
            &arch.denoiser,
            &arch.schedule,
            &arch.dsd_cfg,
            cfg.tau,
            &rows,
            &ctx.noise,
        )?)
    };

    let mut loss = bbc;
    if let Some(kd) = kd {
        let t = tape.scale(kd, cfg.kappa);
        loss = tape.add(loss, t);
    }
    if let Some(diff) = diff {
        let t = tape.scale(diff, cfg.lambda);
        loss = tape.add(loss, t);
    }
    Ok(BatchForward { loss, bbc, kd, diff, similarities: s, eligible, gated, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub l_bbc: f64,
    pub l_kd: f64,
    pub l_diff: f64,
    pub gate_rate: f64,
    pub gate_eligible: usize,
    pub grad_norm: f64,
    pub batches: usize,
    /// Mean fitting score of rare / common samples scored this epoch.
    pub rare_score_mean: Option<f64>,
    pub common_score_mean: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One pass over `data` in a shuffled order derived from `(seed, epoch)`.
/// A trailing partial batch is dropped. State is rounded to `f32` precision
/// at the end.
pub fn train_epoch(model: &mut MeltModel, data: &[Triplet], cfg: &TrainConfig, epoch: usize) -> Result<EpochReport> {
    cfg.validate()?;
    let b = cfg.batch_size;
    if b != model.arch.width {
        return Err(MeltError::config(format!("batch_size {b} differs from the model width {}", model.arch.width)));
    }
    if data.len() < b {
        return Err(MeltError::data(format!("{} triplets cannot fill a batch of {b}", data.len())));
    }
    let epoch_seed = derive_seed(cfg.seed, &[epoch as u64]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded(epoch_seed));

    let opt = cfg.optimizer();
    let mut totals = LossComponents::default();
    let (mut loss_sum, mut grad_sum) = (0.0, 0.0);
    let (mut eligible, mut gated) = (0, 0);
    let (mut rare, mut common) = (Vec::new(), Vec::new());
    let batches = data.len() / b;
    for (bi, chunk) in order.chunks_exact(b).enumerate() {
        let batch: Vec<&Triplet> = chunk.iter().map(|&i| &data[i]).collect();
        let mut ctx = BatchContext::draw(&model.arch, &cfg.ablation, b, derive_seed(epoch_seed, &[bi as u64]));
        let mut tape = Tape::new();
        let fwd = forward_batch(&mut tape, &model.store, &model.arch, &mut model.stats, &batch, cfg, &mut ctx)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).as_scalar());
        let parts = LossComponents {
            bbc: tape.value(fwd.bbc).as_scalar(),
            kd: value(fwd.kd),
            diff: value(fwd.diff),
        };
        let loss = tape.value(fwd.loss).as_scalar();
        if !loss.is_finite() {
            return Err(MeltError::Divergence(format!(
                "nonfinite loss at epoch {epoch}, batch {bi}: bbc {}, kd {}, diff {}",
                parts.bbc, parts.kd, parts.diff
            )));
        }
        let grads = tape.backward(fwd.loss)?;
        model.store.zero_grad();
        model.store.accumulate(&grads);
        grad_sum += model.store.grad_norm();
        for p in model.store.iter_mut() {
            adamw_step(p, &opt).map_err(|e| MeltError::Divergence(format!("epoch {epoch}, batch {bi}: {e}")))?;
        }
        totals.bbc += parts.bbc;
        totals.kd += parts.kd;
        totals.diff += parts.diff;
        loss_sum += loss;
        eligible += fwd.eligible;
        gated += fwd.gated;
        for (truth, s) in fwd.scores {
            match truth {
                Some(true) => rare.push(s),
                Some(false) => common.push(s),
                None => {}
            }
        }
    }
    model.snap_to_f32();
    let n = batches as f64;
    Ok(EpochReport {
        epoch,
        loss: loss_sum / n,
        l_bbc: totals.bbc / n,
        l_kd: totals.kd / n,
        l_diff: totals.diff / n,
        gate_rate: if eligible == 0 { 0.0 } else { gated as f64 / eligible as f64 },
        gate_eligible: eligible,
        grad_norm: grad_sum / n,
        batches,
        rare_score_mean: mean(&rare),
        common_score_mean: mean(&common),
    })
}

/// Runs epochs `start..end`, handing every report to `on_epoch`.
pub fn fit(
    model: &mut MeltModel,
    data: &[Triplet],
    cfg: &TrainConfig,
    start: usize,
    end: usize,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::with_capacity(end.saturating_sub(start));
    for epoch in start..end {
        let r = train_epoch(model, data, cfg, epoch)?;
        on_epoch(&r);
        reports.push(r);
    }
    Ok(reports)
}

/// Named loss breakdown used in logs.
pub fn loss_table(r: &EpochReport) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("L_bbc", r.l_bbc), ("L_KD", r.l_kd), ("L_diff", r.l_diff), ("gate_rate", r.gate_rate)])
}
