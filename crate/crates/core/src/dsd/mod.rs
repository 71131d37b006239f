//! Diffusion-based similarity denoising.
//!
//! Each query's similarity row is reordered positive-first, mapped onto the
//! simplex with a temperature softmax, and treated as a diffusion sample.
//! A small conditioned network predicts the clean label distribution from a
//! noisy one; at inference a deterministic DDIM pass purifies every row of
//! the similarity matrix.
//!
//! The network emits logits. The clean-sample estimate used inside the DDIM
//! update is their softmax, and the KL losses compare label distributions
//! against the softmax of the logits.

mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};
use crate::math::ops::{self, softmax};
use crate::math::rng::{derive_seed, normal_matrix, normal_vec, seeded, Rng};
use crate::math::{adamw_step, AdamW, Matrix, ParamId, ParamStore, Tape, Var};

pub use schedule::{ddim_step, ddim_timesteps, ddim_update, forward_diffuse, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsdConfig {
    pub t_train: usize,
    pub ddim_steps: usize,
    pub label_smoothing: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_embed_dim: usize,
}

impl Default for DsdConfig {
    fn default() -> Self {
        Self {
            t_train: 50,
            ddim_steps: 10,
            label_smoothing: 0.1,
            beta_start: 1e-4,
            beta_end: 0.2,
            hidden: 64,
            time_embed_dim: 16,
        }
    }
}

impl DsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_train == 0 || self.ddim_steps == 0 || self.ddim_steps > self.t_train {
            return Err(MeltError::config("need 1 <= ddim_steps <= t_train"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(MeltError::config("label_smoothing must lie in [0, 1)"));
        }
        if self.hidden == 0 || self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(MeltError::config("hidden must be positive and time_embed_dim a positive even number"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }
}

/// Cosine similarity between token-mean-pooled composed and target features.
pub fn similarity_matrix(tape: &mut Tape, composed: &[Var], targets: &[Matrix]) -> Result<Var> {
    if composed.len() != targets.len() || composed.is_empty() {
        return Err(MeltError::shape(format!(
            "{} composed features vs {} targets",
            composed.len(),
            targets.len()
        )));
    }
    let pooled: Vec<Var> = composed.iter().map(|c| tape.mean_rows(*c)).collect();
    let stacked = tape.concat_rows(&pooled);
    let normed = tape.normalize_rows(stacked);
    let t = tape.constant(normalized_rows(&pooled_rows(targets)).transpose());
    Ok(tape.matmul(normed, t))
}

/// Stacks the token-mean of each matrix into one row per item.
pub fn pooled_rows(items: &[Matrix]) -> Matrix {
    let d = items.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(items.len(), d);
    for (i, m) in items.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.mean_rows().data());
    }
    out
}

pub fn normalized_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = ops::norm(m.row(r));
        if n > 0.0 {
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
    }
    out
}

/// Positive-first ordering of one similarity row: `anchor`, then the rest
/// by descending similarity with ascending-index tie-break.
pub fn reorder(row: &[f64], anchor: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if anchor >= row.len() {
        return Err(MeltError::invalid(format!("anchor {anchor} outside a row of {}", row.len())));
    }
    let mut rest: Vec<usize> = (0..row.len()).filter(|i| *i != anchor).collect();
    rest.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut perm = Vec::with_capacity(row.len());
    perm.push(anchor);
    perm.extend(rest);
    let reordered = perm.iter().map(|&i| row[i]).collect();
    Ok((perm, reordered))
}

/// Places `values[k]` back at original position `perm[k]`.
pub fn inverse_permute(values: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (k, &i) in perm.iter().enumerate() {
        out[i] = values[k];
    }
    out
}

/// Label-smoothed one-hot on position 0.
pub fn ground_truth_label(b: usize, smoothing: f64) -> Vec<f64> {
    let mut x = vec![smoothing / b as f64; b];
    if let Some(first) = x.first_mut() {
        *first += 1.0 - smoothing;
    }
    x
}

pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub width: usize,
    pub d: usize,
    pub time_embed_dim: usize,
}

impl DenoiserParams {
    pub fn input_width(width: usize, d: usize, time_embed_dim: usize) -> usize {
        3 * width + d + time_embed_dim
    }

    pub fn init(store: &mut ParamStore, cfg: &DsdConfig, width: usize, d: usize, rng: &mut Rng) -> Self {
        let inw = Self::input_width(width, d, cfg.time_embed_dim);
        let h = cfg.hidden;
        Self {
            w1: store.add("dsd.w1", normal_matrix(rng, inw, h).scale(1.0 / (inw as f64).sqrt())),
            b1: store.add("dsd.b1", Matrix::zeros(1, h)),
            w2: store.add("dsd.w2", normal_matrix(rng, h, h).scale(1.0 / (h as f64).sqrt())),
            b2: store.add("dsd.b2", Matrix::zeros(1, h)),
            w_out: store.add("dsd.w_out", normal_matrix(rng, h, width).scale(1.0 / (h as f64).sqrt())),
            b_out: store.add("dsd.b_out", Matrix::zeros(1, width)),
            width,
            d,
            time_embed_dim: cfg.time_embed_dim,
        }
    }
}

/// Conditioning for one reordered row: softmaxed similarities `s̃`, the
/// pooled composed feature, and its inner products with the reordered
/// pooled targets.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub s_tilde: Var,
    pub composed: Var,
    pub inner: Var,
}

/// Builds the conditioning from a reordered raw similarity row (`1 × B`),
/// a pooled composed row (`1 × D`) and the reordered pooled targets
/// (`B × D`).
pub fn build_conditioning(tape: &mut Tape, s_reordered: Var, tau: f64, composed: Var, targets: &Matrix) -> Conditioning {
    let scaled = tape.scale(s_reordered, 1.0 / tau);
    let s_tilde = tape.softmax_rows(scaled);
    let tt = tape.constant(targets.transpose());
    let inner = tape.matmul(composed, tt);
    Conditioning { s_tilde, composed, inner }
}

/// One denoiser input row: `[x_t, emb(t), s̃, f_c, f_c·T_k]`.
pub fn denoiser_input(tape: &mut Tape, x_t: &[f64], t: usize, embed_dim: usize, cond: &Conditioning) -> Var {
    let xt = tape.constant(Matrix::row_vector(x_t.to_vec()));
    let emb = tape.constant(Matrix::row_vector(time_embedding(t, embed_dim)));
    tape.concat_cols(&[xt, emb, cond.s_tilde, cond.composed, cond.inner])
}

/// Predicted clean-label logits for every input row (`n × B`).
pub fn denoise_predict(tape: &mut Tape, store: &ParamStore, params: &DenoiserParams, inputs: Var) -> Result<Var> {
    let expected = DenoiserParams::input_width(params.width, params.d, params.time_embed_dim);
    if tape.value(inputs).cols() != expected {
        return Err(MeltError::shape(format!(
            "denoiser input width {} (expected {expected})",
            tape.value(inputs).cols()
        )));
    }
    let w1 = tape.param(store, params.w1);
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let wo = tape.param(store, params.w_out);
    let bo = tape.param(store, params.b_out);
    let h = tape.matmul(inputs, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let h = tape.silu(h);
    let out = tape.matmul(h, wo);
    Ok(tape.add_row(out, bo))
}

/// Plain-value conditioning for inference.
#[derive(Clone, Debug)]
pub struct ConditioningValues {
    pub s_reordered: Vec<f64>,
    pub composed: Vec<f64>,
    pub targets: Matrix,
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub logits: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Runs predict + DDIM over the evenly spaced subsequence from `T` to 0.
pub fn denoise_full(
    store: &ParamStore,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    ddim_steps: usize,
    tau: f64,
    x_start: &[f64],
    cond: &ConditioningValues,
) -> Result<DenoiseOutput> {
    let steps = ddim_timesteps(schedule.steps(), ddim_steps)?;
    let mut x = x_start.to_vec();
    let mut logits = Vec::new();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::row_vector(cond.s_reordered.clone()));
        let c = tape.constant(Matrix::row_vector(cond.composed.clone()));
        let conditioning = build_conditioning(&mut tape, s, tau, c, &cond.targets);
        let input = denoiser_input(&mut tape, &x, t, params.time_embed_dim, &conditioning);
        let out = denoise_predict(&mut tape, store, params, input)?;
        logits = tape.value(out).data().to_vec();
        let x0_hat = softmax(&logits)?;
        x = ddim_step(&x, t, t_prev, &x0_hat, schedule)?;
    }
    Ok(DenoiseOutput { logits, sample: x })
}

/// `(1/n)·Σ_j KL(p_j ‖ softmax(logits_j))` over the rows of `p`.
pub fn kl_to_logits(tape: &mut Tape, p: &Matrix, logits: Var) -> Result<Var> {
    if tape.value(logits).shape() != p.shape() {
        return Err(MeltError::shape("KL target and logits shapes differ"));
    }
    let n = p.rows() as f64;
    let entropy_term: f64 = p.data().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
    let lsm = tape.log_softmax_rows(logits);
    let pc = tape.constant(p.clone());
    let cross = tape.mul(pc, lsm);
    let cross = tape.sum_all(cross);
    let neg = tape.scale(cross, -1.0 / n);
    let c = tape.constant(Matrix::scalar(entropy_term / n));
    Ok(tape.add(neg, c))
}

/// Denoising objective: label distributions against predicted logits.
pub fn loss_diff(tape: &mut Tape, logits: Var, labels: &Matrix) -> Result<Var> {
    kl_to_logits(tape, labels, logits)
}

/// Distillation: the refined matrix (a constant teacher) against the
/// temperature softmax of the raw similarities.
pub fn loss_kd(tape: &mut Tape, similarities: Var, refined: &Matrix, tau: f64) -> Result<Var> {
    let scaled = tape.scale(similarities, 1.0 / tau);
    kl_to_logits(tape, refined, scaled)
}

/// How the first slot of each reordered row is chosen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anchors {
    /// Row `j` anchors on column `j` (in-batch training, positive known).
    Diagonal,
    /// Each row anchors on its highest-scoring column (retrieval).
    RowMax,
    Explicit(Vec<usize>),
}

impl Anchors {
    fn for_row(&self, j: usize, row: &[f64]) -> usize {
        match self {
            Anchors::Diagonal => j,
            Anchors::RowMax => {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            }
            Anchors::Explicit(a) => a[j],
        }
    }
}

/// Frozen pieces needed to refine similarity rows.
#[derive(Clone, Copy)]
pub struct Refiner<'a> {
    pub store: &'a ParamStore,
    pub params: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
    pub ddim_steps: usize,
    pub tau: f64,
}

impl Refiner<'_> {
    /// Refines one row. `candidates` holds the pooled candidate features
    /// in the row's column order; the result is a distribution in that same
    /// order.
    pub fn refine_row(
        &self,
        row: &[f64],
        anchor: usize,
        composed: &[f64],
        candidates: &Matrix,
        noise_seed: u64,
    ) -> Result<Vec<f64>> {
        let b = row.len();
        if b != self.params.width || candidates.rows() != b {
            return Err(MeltError::shape(format!(
                "refining {b} candidates with a width-{} denoiser",
                self.params.width
            )));
        }
        let (perm, s_reordered) = reorder(row, anchor)?;
        let start = softmax(&s_reordered.iter().map(|s| s / self.tau).collect::<Vec<_>>())?;
        let eps = normal_vec(&mut seeded(noise_seed), b);
        let x_t = forward_diffuse(&start, self.schedule.steps(), &eps, self.schedule)?;
        let cond = ConditioningValues {
            s_reordered,
            composed: composed.to_vec(),
            targets: candidates.gather_rows(&perm),
        };
        let out = denoise_full(self.store, self.params, self.schedule, self.ddim_steps, self.tau, &x_t, &cond)?;
        Ok(inverse_permute(&out.sample, &perm))
    }

    /// Refines every row of `similarities` (`n × B`). Row `j` draws its start
    /// noise from `derive_seed(seed, [j])`.
    pub fn refine_similarities(
        &self,
        similarities: &Matrix,
        anchors: &Anchors,
        composed: &Matrix,
        candidates: &Matrix,
        seed: u64,
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(similarities.rows(), similarities.cols());
        for j in 0..similarities.rows() {
            let row = similarities.row(j);
            let anchor = anchors.for_row(j, row);
            let refined = self.refine_row(row, anchor, composed.row(j), candidates, derive_seed(seed, &[j as u64]))?;
            out.row_mut(j).copy_from_slice(&refined);
        }
        Ok(out)
    }
}

/// One standalone training example for the denoiser: a raw similarity row
/// whose positive sits at `anchor`, with its conditioning features.
#[derive(Clone, Debug)]
pub struct DenoiseExample {
    pub row: Vec<f64>,
    pub anchor: usize,
    pub composed: Vec<f64>,
    pub candidates: Matrix,
}

/// Builds the `L_diff` term for a set of rows on `tape`. Timesteps and noise
/// come from `rng`; `t = 0` everywhere when `noiseless` is set.
pub fn diffusion_rows_loss(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &DsdConfig,
    tau: f64,
    rows: &[(Var, usize, Var, Matrix)],
    noise: &[(usize, Vec<f64>)],
) -> Result<Var> {
    let b = params.width;
    let label = ground_truth_label(b, cfg.label_smoothing);
    let mut inputs = Vec::with_capacity(rows.len());
    for ((s_row, anchor, composed, candidates), (t, eps)) in rows.iter().zip(noise) {
        let (perm, _) = reorder(tape.value(*s_row).data(), *anchor)?;
        let s_reordered = tape.gather_cols(*s_row, &perm);
        let cond = build_conditioning(tape, s_reordered, tau, *composed, &candidates.gather_rows(&perm));
        let x_t = forward_diffuse(&label, *t, eps, schedule)?;
        inputs.push(denoiser_input(tape, &x_t, *t, params.time_embed_dim, &cond));
    }
    let stacked = tape.concat_rows(&inputs);
    let logits = denoise_predict(tape, store, params, stacked)?;
    let labels = Matrix::from_fn(rows.len(), b, |_, c| label[c]);
    loss_diff(tape, logits, &labels)
}

/// Draws `(t, ε)` for `n` rows: `t` uniform in `1..=T`, or `0` when
/// `noiseless`.
pub fn draw_diffusion_noise(rng: &mut Rng, n: usize, width: usize, steps: usize, noiseless: bool) -> Vec<(usize, Vec<f64>)> {
    use rand::Rng as _;
    (0..n)
        .map(|_| {
            let t = if noiseless { 0 } else { rng.gen_range(1..=steps) };
            (t, normal_vec(rng, width))
        })
        .collect()
}

/// Fits the denoiser alone on fixed examples with `L_diff`. Returns the mean
/// loss of each epoch.
pub fn train_denoiser(
    store: &mut ParamStore,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &DsdConfig,
    tau: f64,
    examples: &[DenoiseExample],
    epochs: usize,
    batch: usize,
    opt: &AdamW,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = seeded(derive_seed(seed, &[epoch as u64]));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let rows: Vec<(Var, usize, Var, Matrix)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let s = tape.constant(Matrix::row_vector(ex.row.clone()));
                    let c = tape.constant(Matrix::row_vector(ex.composed.clone()));
                    (s, ex.anchor, c, ex.candidates.clone())
                })
                .collect();
            let noise = draw_diffusion_noise(&mut rng, rows.len(), params.width, schedule.steps(), false);
            let loss = diffusion_rows_loss(&mut tape, store, params, schedule, cfg, tau, &rows, &noise)?;
            let value = tape.value(loss).as_scalar();
            let grads = tape.backward(loss)?;
            store.zero_grad();
            store.accumulate(&grads);
            for id in [params.w1, params.b1, params.w2, params.b2, params.w_out, params.b_out] {
                adamw_step(store.get_mut(id), opt)?;
            }
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        history.push(total / count.max(1) as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{check_gradients, GradCheckOptions};

    #[test]
    fn similarity_examples() {
        let e = |i: usize| Matrix::from_fn(2, 3, |_, c| if c == i { 1.0 } else { 0.0 });
        let items = vec![e(0), e(1), e(2)];
        let mut tape = Tape::new();
        let vars: Vec<Var> = items.iter().map(|m| tape.constant(m.clone())).collect();
        let s = similarity_matrix(&mut tape, &vars, &items).unwrap();
        assert_eq!(tape.value(s), &Matrix::identity(3));

        let one = [Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()];
        let t = vec![Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()];
        let v = vec![tape.constant(one[0].clone())];
        let s = similarity_matrix(&mut tape, &v, &t).unwrap();
        assert!((tape.value(s).as_scalar() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn similarity_matches_double_loop() {
        let mut rng = seeded(4);
        let fc: Vec<Matrix> = (0..5).map(|_| normal_matrix(&mut rng, 3, 4)).collect();
        let ft: Vec<Matrix> = (0..5).map(|_| normal_matrix(&mut rng, 3, 4)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = fc.iter().map(|m| tape.constant(m.clone())).collect();
        let s = similarity_matrix(&mut tape, &vars, &ft).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let brute = ops::cosine_similarity(fc[i].mean_rows().data(), ft[j].mean_rows().data()).unwrap();
                assert!((tape.value(s).get(i, j) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reorder_examples() {
        assert_eq!(reorder(&[0.5, 0.9, 0.7], 0).unwrap(), (vec![0, 1, 2], vec![0.5, 0.9, 0.7]));
        assert_eq!(reorder(&[0.9, 0.5, 0.7], 1).unwrap(), (vec![1, 0, 2], vec![0.5, 0.9, 0.7]));
        assert_eq!(reorder(&[0.3, 0.3, 0.3], 2).unwrap().0, vec![2, 0, 1]);
        assert!(reorder(&[0.3], 1).is_err());
    }

    #[test]
    fn inverse_permutation_round_trip() {
        let row = [0.1, 0.8, -0.3, 0.8, 0.5];
        for anchor in 0..row.len() {
            let (perm, s) = reorder(&row, anchor).unwrap();
            assert_eq!(inverse_permute(&s, &perm), row.to_vec());
            let feats = Matrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
            let back = feats.gather_rows(&perm);
            let mut restored = Matrix::zeros(5, 2);
            for (k, &i) in perm.iter().enumerate() {
                restored.row_mut(i).copy_from_slice(back.row(k));
            }
            assert_eq!(restored, feats);
        }
    }

    #[test]
    fn label_examples() {
        assert_eq!(ground_truth_label(3, 0.0), vec![1.0, 0.0, 0.0]);
        let x = ground_truth_label(5, 0.1);
        let want = [0.92, 0.02, 0.02, 0.02, 0.02];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for alpha in [0.0, 0.05, 0.3, 0.99] {
            assert!((ground_truth_label(7, alpha).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_loss_examples() {
        let mut tape = Tape::new();
        let p = Matrix::row_vector(vec![0.5, 0.5]);
        let logits = tape.constant(Matrix::row_vector(vec![0.25f64.ln(), 0.75f64.ln()]));
        let l = loss_diff(&mut tape, logits, &p).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((tape.value(l).as_scalar() - want).abs() < 1e-15);
        assert!((tape.value(l).as_scalar() - 0.1438).abs() < 1e-4);

        // identical distributions
        let q = Matrix::row_vector(vec![0.2, 0.3, 0.5]);
        let lg = tape.constant(Matrix::row_vector(q.data().iter().map(|v| v.ln() + 3.0).collect()));
        let l = loss_diff(&mut tape, lg, &q).unwrap();
        assert!(tape.value(l).as_scalar().abs() < 1e-12);

        // distillation with the same two-point pair, τ = 1
        let s = tape.constant(Matrix::row_vector(vec![0.25f64.ln(), 0.75f64.ln()]));
        let l = loss_kd(&mut tape, s, &p, 1.0).unwrap();
        assert!((tape.value(l).as_scalar() - want).abs() < 1e-15);

        // teacher equal to the student distribution
        let s_raw = Matrix::row_vector(vec![0.3, -0.2, 0.9]);
        let teacher = Matrix::row_vector(softmax(&s_raw.data().iter().map(|v| v / 0.5).collect::<Vec<_>>()).unwrap());
        let s = tape.constant(s_raw);
        let l = loss_kd(&mut tape, s, &teacher, 0.5).unwrap();
        assert!(tape.value(l).as_scalar().abs() < 1e-12);
    }

    #[test]
    fn kl_losses_nonnegative() {
        let mut rng = seeded(10);
        for _ in 0..200 {
            let p_logits = normal_vec(&mut rng, 6);
            let p = Matrix::row_vector(softmax(&p_logits).unwrap());
            let mut tape = Tape::new();
            let q = tape.constant(normal_matrix(&mut rng, 1, 6).scale(3.0));
            let l = loss_diff(&mut tape, q, &p).unwrap();
            assert!(tape.value(l).as_scalar() >= -1e-12);
            let k = loss_kd(&mut tape, q, &p, 0.3).unwrap();
            assert!(tape.value(k).as_scalar() >= -1e-12);
        }
    }

    fn fixture(width: usize, d: usize, seed: u64) -> (ParamStore, DenoiserParams, DsdConfig) {
        let cfg = DsdConfig { hidden: 8, time_embed_dim: 4, ..DsdConfig::default() };
        let mut store = ParamStore::new();
        let params = DenoiserParams::init(&mut store, &cfg, width, d, &mut seeded(seed));
        (store, params, cfg)
    }

    #[test]
    fn predict_is_deterministic_with_width_b() {
        let (store, params, cfg) = fixture(4, 3, 1);
        let sched = cfg.schedule().unwrap();
        let cond = ConditioningValues {
            s_reordered: vec![0.9, 0.1, 0.0, -0.2],
            composed: vec![0.1, 0.2, 0.3],
            targets: normal_matrix(&mut seeded(2), 4, 3),
        };
        let a = denoise_full(&store, &params, &sched, 1, 0.5, &[0.2; 4], &cond).unwrap();
        let b = denoise_full(&store, &params, &sched, 1, 0.5, &[0.2; 4], &cond).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.len(), 4);
        // single step from T lands on the softmax of the prediction
        let sm = softmax(&a.logits).unwrap();
        for (x, y) in a.sample.iter().zip(&sm) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn denoiser_gradients_through_conditioning() {
        for seed in 0..5 {
            let (mut store, params, cfg) = fixture(4, 3, seed);
            let composed_id = store.add("composed", normal_matrix(&mut seeded(seed + 9), 1, 3));
            let sim_id = store.add("sim", normal_matrix(&mut seeded(seed + 19), 1, 4));
            let sched = cfg.schedule().unwrap();
            let targets = normal_matrix(&mut seeded(seed + 29), 4, 3);
            let noise = draw_diffusion_noise(&mut seeded(seed + 39), 1, 4, sched.steps(), false);
            let report = check_gradients(&store, &GradCheckOptions::default(), |st, tape| {
                let s = tape.param(st, sim_id);
                let c = tape.param(st, composed_id);
                diffusion_rows_loss(tape, st, &params, &sched, &cfg, 0.5, &[(s, 0, c, targets.clone())], &noise)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn refine_rows_are_distributions() {
        let (store, params, cfg) = fixture(4, 3, 3);
        let sched = cfg.schedule().unwrap();
        let refiner = Refiner { store: &store, params: &params, schedule: &sched, ddim_steps: 5, tau: 0.5 };
        let s = normal_matrix(&mut seeded(5), 4, 4);
        let fc = normal_matrix(&mut seeded(6), 4, 3);
        let cand = normal_matrix(&mut seeded(7), 4, 3);
        let out = refiner.refine_similarities(&s, &Anchors::Diagonal, &fc, &cand, 11).unwrap();
        assert_eq!(out.shape(), (4, 4));
        for r in 0..4 {
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(out, refiner.refine_similarities(&s, &Anchors::Diagonal, &fc, &cand, 11).unwrap());
        assert!(refiner.refine_row(&[0.1; 3], 0, fc.row(0), &cand, 1).is_err());
    }
}
