//! Rarity-aware token refinement.
//!
//! Aligns reference and modification token grids, finds the reference
//! tokens the modification attends to, scores how statistically unusual the
//! modification is, nudges the attended tokens of rare samples along the
//! residual, and composes the query feature.

mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};
use crate::math::ops::cosine_similarity;
use crate::math::rng::{normal_matrix, Rng};
use crate::math::{sigmoid, Matrix, ParamId, ParamStore, Tape, Var};

pub use stats::{residual_energy, RarityStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignInit {
    /// Linear path starts at the identity.
    Identity,
    /// Linear path starts as a scaled Gaussian projection.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatrConfig {
    pub k_top: usize,
    pub gamma: f64,
    pub eta_init: f64,
    pub ema_momentum: f64,
    pub ridge: f64,
    pub heads: usize,
    pub layers: usize,
    /// Residual observations (and then score observations) before the gate
    /// may open.
    pub warmup: u64,
    pub align_init: AlignInit,
}

impl Default for RatrConfig {
    fn default() -> Self {
        Self {
            k_top: 2,
            gamma: 2.2,
            eta_init: 0.8,
            ema_momentum: 0.99,
            ridge: 1e-4,
            heads: 4,
            layers: 1,
            warmup: 100,
            align_init: AlignInit::Random,
        }
    }
}

impl RatrConfig {
    pub fn validate(&self, q: usize) -> Result<()> {
        if self.k_top == 0 || self.k_top > q {
            return Err(MeltError::config(format!("k_top must lie in [1, {q}]")));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(MeltError::config("ema_momentum must lie in (0, 1)"));
        }
        if !(self.ridge > 0.0) {
            return Err(MeltError::config("ridge must be positive"));
        }
        if self.heads == 0 || self.layers == 0 {
            return Err(MeltError::config("heads and layers must be at least 1"));
        }
        if !self.gamma.is_finite() || !self.eta_init.is_finite() {
            return Err(MeltError::config("gamma and eta_init must be finite"));
        }
        Ok(())
    }
}

/// Two-path token MLP: `X·W + b + silu(X·W1 + b1)·W2`, with `W2 = 0` at
/// initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignMlp {
    pub w: ParamId,
    pub b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

impl AlignMlp {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, init: AlignInit, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let w = match init {
            AlignInit::Identity => Matrix::identity(d),
            AlignInit::Random => normal_matrix(rng, d, d).scale(scale),
        };
        Self {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(format!("{prefix}.b"), Matrix::zeros(1, d)),
            w1: store.add(format!("{prefix}.w1"), normal_matrix(rng, d, d).scale(scale)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, d)),
            w2: store.add(format!("{prefix}.w2"), Matrix::zeros(d, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let lin = tape.matmul(x, w);
        let lin = tape.add_row(lin, b);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.silu(h);
        let h = tape.matmul(h, w2);
        tape.add(lin, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: Option<ParamId>,
}

impl AttentionHead {
    fn probs(&self, tape: &mut Tape, store: &ParamStore, query: Var, keys: Var) -> Var {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let qh = tape.matmul(query, wq);
        let kh = tape.matmul(keys, wk);
        let dh = tape.value(qh).cols() as f64;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, 1.0 / dh.sqrt());
        tape.softmax_rows(logits)
    }
}

/// Text-to-image decoder layer(s). The modification tokens query the
/// reference tokens; the relevance weight of each reference token is the
/// final layer's attention mass averaged over heads and query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextImageAttention {
    pub layers: Vec<DecoderLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub heads: Vec<AttentionHead>,
    /// Output projection; absent on the last layer, whose output is unused.
    pub wo: Option<ParamId>,
}

/// Cross-attention plus feed-forward block standing in for the second
/// composition pass. Output projections start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub heads: Vec<AttentionHead>,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatrParams {
    pub align_r: AlignMlp,
    pub align_m: AlignMlp,
    pub decoder: TextImageAttention,
    pub fusion: FusionBlock,
    pub eta: ParamId,
}

pub fn head_dim(d: usize, heads: usize) -> usize {
    (d / heads).max(1)
}

impl RatrParams {
    pub fn init(store: &mut ParamStore, cfg: &RatrConfig, d: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let dh = head_dim(d, cfg.heads);
        let align_r = AlignMlp::init(store, "ratr.align_r", d, cfg.align_init, rng);
        let align_m = AlignMlp::init(store, "ratr.align_m", d, cfg.align_init, rng);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let heads = (0..cfg.heads)
                .map(|h| AttentionHead {
                    wq: store.add(format!("ratr.decoder.{l}.{h}.wq"), normal_matrix(rng, d, dh).scale(scale)),
                    wk: store.add(format!("ratr.decoder.{l}.{h}.wk"), normal_matrix(rng, d, dh).scale(scale)),
                    wv: (!last).then(|| {
                        store.add(format!("ratr.decoder.{l}.{h}.wv"), normal_matrix(rng, d, dh).scale(scale))
                    }),
                })
                .collect();
            let wo = (!last).then(|| store.add(format!("ratr.decoder.{l}.wo"), Matrix::zeros(cfg.heads * dh, d)));
            layers.push(DecoderLayer { heads, wo });
        }

        let heads = (0..cfg.heads)
            .map(|h| AttentionHead {
                wq: store.add(format!("ratr.fusion.{h}.wq"), normal_matrix(rng, d, dh).scale(scale)),
                wk: store.add(format!("ratr.fusion.{h}.wk"), normal_matrix(rng, d, dh).scale(scale)),
                wv: Some(store.add(format!("ratr.fusion.{h}.wv"), normal_matrix(rng, d, dh).scale(scale))),
            })
            .collect();
        let fusion = FusionBlock {
            heads,
            wo: store.add("ratr.fusion.wo", Matrix::zeros(cfg.heads * dh, d)),
            ffn_w1: store.add("ratr.fusion.ffn_w1", normal_matrix(rng, d, d).scale(scale)),
            ffn_b1: store.add("ratr.fusion.ffn_b1", Matrix::zeros(1, d)),
            ffn_w2: store.add("ratr.fusion.ffn_w2", Matrix::zeros(d, d)),
            ffn_b2: store.add("ratr.fusion.ffn_b2", Matrix::zeros(1, d)),
        };
        let eta = store.add("ratr.eta", Matrix::scalar(cfg.eta_init));
        Self { align_r, align_m, decoder: TextImageAttention { layers }, fusion, eta }
    }
}

fn check_same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(MeltError::shape(format!("{what}: {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
    }
    Ok(())
}

/// Aligns reference and modification tokens with their own MLPs.
pub fn project_align(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RatrParams,
    f_r: Var,
    f_m: Var,
) -> Result<(Var, Var)> {
    check_same_shape(tape, f_r, f_m, "project_align")?;
    let d = store.value(params.align_r.w).rows();
    if tape.value(f_r).cols() != d {
        return Err(MeltError::shape(format!("tokens have width {}, model expects {d}", tape.value(f_r).cols())));
    }
    let r = params.align_r.forward(tape, store, f_r);
    let m = params.align_m.forward(tape, store, f_m);
    Ok((r, m))
}

/// Per-reference-token relevance `w` (a `1 × Q` distribution).
pub fn attend(tape: &mut Tape, store: &ParamStore, params: &RatrParams, f_hat_m: Var, f_hat_r: Var) -> Result<Var> {
    check_same_shape(tape, f_hat_m, f_hat_r, "attend")?;
    let mut query = f_hat_m;
    let layers = &params.decoder.layers;
    for (l, layer) in layers.iter().enumerate() {
        let probs: Vec<Var> = layer.heads.iter().map(|h| h.probs(tape, store, query, f_hat_r)).collect();
        if l + 1 == layers.len() {
            let means: Vec<Var> = probs.iter().map(|p| tape.mean_rows(*p)).collect();
            let stacked = tape.concat_rows(&means);
            return Ok(tape.mean_rows(stacked));
        }
        let mut outs = Vec::with_capacity(probs.len());
        for (head, p) in layer.heads.iter().zip(&probs) {
            let wv = tape.param(store, head.wv.expect("inner layers carry value projections"));
            let v = tape.matmul(f_hat_r, wv);
            outs.push(tape.matmul(*p, v));
        }
        let cat = tape.concat_cols(&outs);
        let wo = tape.param(store, layer.wo.expect("inner layers carry output projections"));
        let proj = tape.matmul(cat, wo);
        query = tape.add(query, proj);
    }
    unreachable!("at least one decoder layer")
}

/// Uniform relevance over all `q` tokens (the attention-free ablation).
pub fn uniform_weights(tape: &mut Tape, q: usize) -> Var {
    tape.constant(Matrix::filled(1, q, 1.0 / q as f64))
}

/// Indices of the `k` largest weights (ties toward the lower index) and
/// the masked weight vector.
pub fn select_topk(w: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > w.len() {
        return Err(MeltError::invalid(format!("k = {k} with {} tokens", w.len())));
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    let mut masked = vec![0.0; w.len()];
    for &i in &idx {
        masked[i] = w[i];
    }
    Ok((idx, masked))
}

/// `f_r = Σ_{i∈I} sigmoid(w_i)·F̂_{r,i}` as a `1 × D` row.
pub fn focus(tape: &mut Tape, f_hat_r: Var, idx: &[usize], w: Var) -> Result<Var> {
    if idx.is_empty() {
        return Err(MeltError::invalid("focus over an empty index set"));
    }
    let sel_w = tape.gather_cols(w, idx);
    let gates = tape.sigmoid(sel_w);
    let tokens = tape.gather_rows(f_hat_r, idx);
    Ok(tape.matmul(gates, tokens))
}

/// Mean over token rows.
pub fn pool_text(tape: &mut Tape, f_hat_m: Var) -> Var {
    tape.mean_rows(f_hat_m)
}

/// `R = E_res · (1 − sigmoid(cos(m̄, f_r)))`.
pub fn fitting_score(m_bar: &[f64], f_r: &[f64], energy: f64) -> Result<f64> {
    let c = cosine_similarity(m_bar, f_r)?;
    Ok(energy * (1.0 - sigmoid(c)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatePolicy {
    /// Gate when `R > μ_R + γ·σ_R`.
    Threshold,
    /// Gate every sample once the statistics are warm.
    Always,
    /// Never gate.
    Never,
}

pub fn gate_decision(score: f64, stats: &RarityStats, gamma: f64, policy: GatePolicy) -> bool {
    match policy {
        GatePolicy::Never => false,
        GatePolicy::Always => true,
        GatePolicy::Threshold => score > stats.threshold(gamma),
    }
}

/// Adds `δ = η·r` to the rows in `idx` when `gated`; otherwise returns the
/// input node unchanged.
pub fn gate_and_correct(tape: &mut Tape, f_hat_r: Var, idx: &[usize], r: Var, eta: Var, gated: bool) -> Var {
    if !gated {
        return f_hat_r;
    }
    let q = tape.value(f_hat_r).rows();
    let mut mask = Matrix::zeros(q, 1);
    for &i in idx {
        mask.set(i, 0, 1.0);
    }
    let mask = tape.constant(mask);
    let delta = tape.scale_by(r, eta);
    let spread = tape.matmul(mask, delta);
    tape.add(f_hat_r, spread)
}

/// `F_c = Y + FFN(Y)` with `Y = F̂'_r + CrossAttention(F̂'_r, F̂_m)`.
pub fn compose(tape: &mut Tape, store: &ParamStore, params: &RatrParams, f_hat_r: Var, f_hat_m: Var) -> Result<Var> {
    check_same_shape(tape, f_hat_r, f_hat_m, "compose")?;
    let fb = &params.fusion;
    let mut outs = Vec::with_capacity(fb.heads.len());
    for head in &fb.heads {
        let p = head.probs(tape, store, f_hat_r, f_hat_m);
        let wv = tape.param(store, head.wv.expect("fusion heads carry value projections"));
        let v = tape.matmul(f_hat_m, wv);
        outs.push(tape.matmul(p, v));
    }
    let cat = tape.concat_cols(&outs);
    let wo = tape.param(store, fb.wo);
    let attn = tape.matmul(cat, wo);
    let y = tape.add(f_hat_r, attn);

    let w1 = tape.param(store, fb.ffn_w1);
    let b1 = tape.param(store, fb.ffn_b1);
    let w2 = tape.param(store, fb.ffn_w2);
    let b2 = tape.param(store, fb.ffn_b2);
    let h = tape.matmul(y, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    Ok(tape.add(y, h))
}

/// Read/write access to the rarity statistics for one forward pass.
pub enum StatsAccess<'a> {
    Train(&'a mut RarityStats),
    Frozen(&'a RarityStats),
}

impl StatsAccess<'_> {
    fn get(&self) -> &RarityStats {
        match self {
            StatsAccess::Train(s) => s,
            StatsAccess::Frozen(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RatrSwitches {
    pub no_attention: bool,
    pub no_threshold: bool,
    pub no_modification: bool,
}

impl RatrSwitches {
    pub fn policy(&self) -> GatePolicy {
        if self.no_modification {
            GatePolicy::Never
        } else if self.no_threshold {
            GatePolicy::Always
        } else {
            GatePolicy::Threshold
        }
    }
}

#[derive(Debug)]
pub struct RatrOutput {
    pub composed: Var,
    pub topk: Vec<usize>,
    pub energy: Option<f64>,
    pub score: Option<f64>,
    pub gated: bool,
}

/// Full refinement of one (reference, modification) pair into a composed
/// query feature.
pub fn refine_query(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RatrParams,
    cfg: &RatrConfig,
    switches: RatrSwitches,
    mut stats: StatsAccess<'_>,
    f_r: Var,
    f_m: Var,
) -> Result<RatrOutput> {
    let (fh_r, fh_m) = project_align(tape, store, params, f_r, f_m)?;
    let q = tape.value(fh_r).rows();
    let (w, topk) = if switches.no_attention {
        (uniform_weights(tape, q), (0..q).collect())
    } else {
        let w = attend(tape, store, params, fh_m, fh_r)?;
        let (idx, _) = select_topk(tape.value(w).data(), cfg.k_top)?;
        (w, idx)
    };
    let f_r_vec = focus(tape, fh_r, &topk, w)?;
    let m_bar = pool_text(tape, fh_m);
    let r = tape.sub(m_bar, f_r_vec);

    let r_val = tape.value(r).data().to_vec();
    if let StatsAccess::Train(s) = &mut stats {
        s.update_residual(&r_val, cfg.ema_momentum)?;
    }
    let (energy, score) = if stats.get().residual_warm(cfg.warmup) {
        let e = stats.get().residual_energy(&r_val, cfg.ridge)?;
        let s = fitting_score(tape.value(m_bar).data(), tape.value(f_r_vec).data(), e)?;
        (Some(e), Some(s))
    } else {
        (None, None)
    };
    if let (StatsAccess::Train(s), Some(score)) = (&mut stats, score) {
        s.update_score(score, cfg.ema_momentum)?;
    }
    let gated = match score {
        Some(score) if stats.get().gate_ready(cfg.warmup) => {
            gate_decision(score, stats.get(), cfg.gamma, switches.policy())
        }
        _ => false,
    };

    let eta = tape.param(store, params.eta);
    let fh_r_prime = gate_and_correct(tape, fh_r, &topk, r, eta, gated);
    let composed = compose(tape, store, params, fh_r_prime, fh_m)?;
    Ok(RatrOutput { composed, topk, energy, score, gated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{check_gradients, GradCheckOptions};
    use crate::math::rng::seeded;

    fn fixture(d: usize, init: AlignInit, seed: u64) -> (ParamStore, RatrParams, RatrConfig) {
        let cfg = RatrConfig { align_init: init, heads: 2, ..RatrConfig::default() };
        let mut store = ParamStore::new();
        let params = RatrParams::init(&mut store, &cfg, d, &mut seeded(seed));
        (store, params, cfg)
    }

    /// Gives every zero-initialized projection a random value so gradient
    /// checks exercise all paths.
    fn randomize_zero_params(store: &mut ParamStore, seed: u64) {
        let mut rng = seeded(seed);
        for p in store.iter_mut() {
            if p.value.data().iter().all(|v| *v == 0.0) {
                let (r, c) = p.value.shape();
                p.value = normal_matrix(&mut rng, r, c).scale(0.3);
            }
        }
    }

    #[test]
    fn identity_align_passes_through() {
        let (store, params, _) = fixture(4, AlignInit::Identity, 1);
        let mut tape = Tape::new();
        let x = normal_matrix(&mut seeded(2), 3, 4);
        let xr = tape.constant(x.clone());
        let xm = tape.constant(x.clone());
        let (r, m) = project_align(&mut tape, &store, &params, xr, xm).unwrap();
        assert_eq!(tape.value(r), &x);
        assert_eq!(tape.value(m), &x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let (mut store, params, _) = fixture(3, AlignInit::Random, 1);
        store.get_mut(params.align_r.b).value = Matrix::row_vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(2, 3));
        let (r, _) = project_align(&mut tape, &store, &params, z, z).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(r).row(i), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn align_shape_mismatch() {
        let (store, params, _) = fixture(3, AlignInit::Random, 1);
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(3, 3));
        assert!(matches!(project_align(&mut tape, &store, &params, a, b), Err(MeltError::ShapeMismatch(_))));
    }

    #[test]
    fn attend_zero_queries_is_uniform() {
        let (store, params, _) = fixture(4, AlignInit::Random, 3);
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::zeros(5, 4));
        let r = tape.constant(normal_matrix(&mut seeded(4), 5, 4));
        let w = attend(&mut tape, &store, &params, m, r).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attend_single_head_peaked_logits() {
        // One head, head dim 1: query row q = 1, keys (10, 0) give logits
        // (10, 0) exactly.
        let cfg = RatrConfig { heads: 1, ..RatrConfig::default() };
        let mut store = ParamStore::new();
        let params = RatrParams::init(&mut store, &cfg, 1, &mut seeded(0));
        let head = &params.decoder.layers[0].heads[0];
        store.get_mut(head.wq).value = Matrix::scalar(1.0);
        store.get_mut(head.wk).value = Matrix::scalar(1.0);
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::new(2, 1, vec![1.0, 1.0]).unwrap());
        let r = tape.constant(Matrix::new(2, 1, vec![10.0, 0.0]).unwrap());
        let w = attend(&mut tape, &store, &params, m, r).unwrap();
        let want = crate::math::softmax(&[10.0, 0.0]).unwrap();
        assert!((tape.value(w).get(0, 0) - want[0]).abs() < 1e-15);
        assert!((tape.value(w).get(0, 0) - 0.99995).abs() < 1e-5);
        assert!((tape.value(w).get(0, 1) - 0.0000454).abs() < 1e-6);
    }

    #[test]
    fn attend_identical_query_rows() {
        let (store, params, _) = fixture(4, AlignInit::Random, 5);
        let row = normal_matrix(&mut seeded(6), 1, 4);
        let kv = normal_matrix(&mut seeded(7), 3, 4);
        let mut tape = Tape::new();
        let q3 = tape.constant(Matrix::from_fn(3, 4, |_, c| row.get(0, c)));
        let r3 = tape.constant(kv.clone());
        let w = attend(&mut tape, &store, &params, q3, r3).unwrap();
        // a single-row query over the same keys yields the same weights
        let layer = &params.decoder.layers[0];
        let single: Vec<Var> = layer
            .heads
            .iter()
            .map(|h| {
                let q1 = tape.constant(row.clone());
                h.probs(&mut tape, &store, q1, r3)
            })
            .collect();
        let avg: Vec<f64> = (0..3)
            .map(|c| single.iter().map(|p| tape.value(*p).get(0, c)).sum::<f64>() / single.len() as f64)
            .collect();
        for (a, b) in tape.value(w).data().iter().zip(&avg) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((tape.value(w).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let (idx, w) = select_topk(&[0.1, 0.9, 0.5], 2).unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(w, vec![0.0, 0.9, 0.5]);
        let (idx, w) = select_topk(&[0.1, 0.9, 0.5], 3).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(w, vec![0.1, 0.9, 0.5]);
        assert_eq!(select_topk(&[0.5, 0.5, 0.2], 1).unwrap().0, vec![0]);
        assert!(select_topk(&[0.5], 2).is_err());
        assert!(select_topk(&[0.5], 0).is_err());
    }

    #[test]
    fn focus_examples() {
        let mut tape = Tape::new();
        let tokens = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![4.0, -2.0]]).unwrap());
        let w = tape.constant(Matrix::row_vector(vec![0.0, 0.3]));
        let f = focus(&mut tape, tokens, &[0], w).unwrap();
        assert_eq!(tape.value(f).data(), &[0.5, 1.0]);
        assert!(focus(&mut tape, tokens, &[], w).is_err());

        let same = tape.constant(Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap());
        let eq = tape.constant(Matrix::row_vector(vec![0.4, 0.4]));
        let f = focus(&mut tape, same, &[0, 1], eq).unwrap();
        let s = 2.0 * sigmoid(0.4);
        assert!((tape.value(f).get(0, 0) - s).abs() < 1e-15);
        assert!((tape.value(f).get(0, 1) + s).abs() < 1e-15);
    }

    #[test]
    fn pool_text_examples() {
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::from_rows(&[vec![1.0, 3.0], vec![1.0, 3.0]]).unwrap());
        let p = pool_text(&mut tape, m);
        assert_eq!(tape.value(p).data(), &[1.0, 3.0]);
        let m = tape.constant(Matrix::from_rows(&[vec![1.0, -3.0], vec![-1.0, 3.0]]).unwrap());
        let p = pool_text(&mut tape, m);
        assert_eq!(tape.value(p).data(), &[0.0, 0.0]);

        let x = normal_matrix(&mut seeded(9), 5, 3);
        let v = tape.constant(x.clone());
        let p = pool_text(&mut tape, v);
        for c in 0..3 {
            let brute: f64 = (0..5).map(|r| x.get(r, c)).sum::<f64>() / 5.0;
            assert!((tape.value(p).get(0, c) - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn fitting_score_examples() {
        assert_eq!(fitting_score(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap(), 0.0);
        assert_eq!(fitting_score(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 0.5);
        let r = fitting_score(&[1.0, 2.0], &[2.0, 4.0], 1.0).unwrap();
        assert!((r - 0.2689414).abs() < 1e-7);
    }

    #[test]
    fn gate_boundary_is_strict() {
        let mut stats = RarityStats::new(1);
        stats.mu_r = 1.0;
        stats.var_r = 0.25;
        let t = 1.0 + 2.2 * 0.5;
        assert!(!gate_decision(t, &stats, 2.2, GatePolicy::Threshold));
        assert!(gate_decision(t + 1e-12, &stats, 2.2, GatePolicy::Threshold));
        assert!(!gate_decision(1e6, &stats, 1e9, GatePolicy::Threshold));
        assert!(gate_decision(-1e6, &stats, 2.2, GatePolicy::Always));
        assert!(!gate_decision(1e6, &stats, 2.2, GatePolicy::Never));
    }

    #[test]
    fn correction_arithmetic() {
        let mut store = ParamStore::new();
        let eta_id = store.add("eta", Matrix::scalar(0.8));
        let mut tape = Tape::new();
        let tokens = tape.constant(Matrix::new(3, 1, vec![2.0, 5.0, -1.0]).unwrap());
        let r = tape.constant(Matrix::scalar(0.5));
        let eta = tape.param(&store, eta_id);
        let out = gate_and_correct(&mut tape, tokens, &[0, 2], r, eta, true);
        assert!((tape.value(out).get(0, 0) - 2.4).abs() < 1e-15);
        assert_eq!(tape.value(out).get(1, 0).to_bits(), 5f64.to_bits());
        assert!((tape.value(out).get(2, 0) + 0.6).abs() < 1e-15);

        let untouched = gate_and_correct(&mut tape, tokens, &[0], r, eta, false);
        assert_eq!(untouched, tokens);

        let zero_eta = tape.constant(Matrix::scalar(0.0));
        let out = gate_and_correct(&mut tape, tokens, &[0, 1, 2], r, zero_eta, true);
        assert_eq!(tape.value(out), tape.value(tokens));
    }

    #[test]
    fn zero_init_compose_is_residual_only() {
        let (store, params, _) = fixture(6, AlignInit::Random, 11);
        let mut tape = Tape::new();
        let r = tape.constant(normal_matrix(&mut seeded(12), 4, 6));
        let m = tape.constant(normal_matrix(&mut seeded(13), 4, 6));
        let c = compose(&mut tape, &store, &params, r, m).unwrap();
        assert_eq!(tape.value(c), tape.value(r));
        assert_eq!(tape.value(c).shape(), (4, 6));
    }

    #[test]
    fn gradients_through_refinement() {
        for seed in 0..5 {
            let d = 6;
            let (mut store, params, mut cfg) = fixture(d, AlignInit::Random, seed);
            cfg.layers = 1;
            randomize_zero_params(&mut store, seed + 50);
            let fr = normal_matrix(&mut seeded(seed + 100), 4, d);
            let fm = normal_matrix(&mut seeded(seed + 200), 4, d);
            // warm, frozen stats with a gate that always opens
            let mut stats = RarityStats::new(d);
            stats.observation_count = 1000;
            stats.score_count = 1000;
            stats.sigma = Matrix::identity(d);
            let switches = RatrSwitches { no_threshold: true, ..RatrSwitches::default() };
            let report = check_gradients(&store, &GradCheckOptions::default(), |st, tape| {
                let a = tape.constant(fr.clone());
                let b = tape.constant(fm.clone());
                let out = refine_query(tape, st, &params, &cfg, switches, StatsAccess::Frozen(&stats), a, b)?;
                assert!(out.gated);
                let sq = tape.mul(out.composed, out.composed);
                Ok(tape.sum_all(sq))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gradients_through_stacked_decoder() {
        let d = 4;
        let cfg = RatrConfig { heads: 2, layers: 2, ..RatrConfig::default() };
        let mut store = ParamStore::new();
        let params = RatrParams::init(&mut store, &cfg, d, &mut seeded(21));
        randomize_zero_params(&mut store, 22);
        let fr = normal_matrix(&mut seeded(23), 3, d);
        let fm = normal_matrix(&mut seeded(24), 3, d);
        let report = check_gradients(&store, &GradCheckOptions::default(), |st, tape| {
            let a = tape.constant(fr.clone());
            let b = tape.constant(fm.clone());
            let w = attend(tape, st, &params, b, a)?;
            let f = focus(tape, a, &[0, 2], w)?;
            let sq = tape.mul(f, f);
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
