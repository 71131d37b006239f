//! Central finite-difference oracle for tape gradients.
//!
//! The loss closure is rebuilt from scratch on a perturbed copy of the
//! parameter store for every probe, so the check is independent of the
//! backward implementation.

use crate::error::Result;
use crate::math::optim::{ParamId, ParamStore};
use crate::math::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Probe at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_entries_per_param: usize::MAX }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check_gradients<F>(store: &ParamStore, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(s, &mut t)?;
        Ok(t.value(l).as_scalar())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(opts.max_entries_per_param.min(n).max(1));
        for k in (0..n).step_by(stride.max(1)) {
            let analytic = grads.get(&id).map_or(0.0, |g| g.data()[k]);
            let numeric = central_difference(&mut probe, id, k, opts.step, &eval)?;
            let err = relative_error(analytic, numeric, opts.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), k, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}

fn central_difference(
    probe: &mut ParamStore,
    id: ParamId,
    k: usize,
    h: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = probe.value(id).data()[k];
    probe.get_mut(id).value.data_mut()[k] = orig + h;
    let plus = eval(probe)?;
    probe.get_mut(id).value.data_mut()[k] = orig - h;
    let minus = eval(probe)?;
    probe.get_mut(id).value.data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * h))
}
