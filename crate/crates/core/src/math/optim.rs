use crate::error::{MeltError, Result};
use crate::math::tape::Gradients;
use crate::math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable matrix with its gradient and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step: 0,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One AdamW update. Weight decay is decoupled: it shrinks the value
/// directly and never enters the moment estimates. A nonfinite gradient
/// leaves the parameter untouched.
pub fn adamw_step(p: &mut Parameter, cfg: &AdamW) -> Result<()> {
    if !p.grad.is_finite() {
        return Err(MeltError::GradientOverflow(p.name.clone()));
    }
    p.step += 1;
    let t = p.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let value = p.value.data_mut();
    let m = p.first_moment.data_mut();
    let v = p.second_moment.data_mut();
    for (i, g) in p.grad.data().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * cfg.weight_decay * value[i];
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("x", Matrix::scalar(x));
        p.grad = Matrix::scalar(g);
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = scalar_param(1.25, 0.0);
        adamw_step(&mut p, &AdamW { lr: 0.1, ..AdamW::default() }).unwrap();
        assert_eq!(p.value.as_scalar(), 1.25);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamW { lr: 0.1, ..AdamW::default() };
        let mut p = scalar_param(0.0, 2.0);
        adamw_step(&mut p, &cfg).unwrap();
        let want = -0.1 * 2.0 / (2.0 + cfg.eps);
        assert!((p.value.as_scalar() - want).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let cfg = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
        let mut p = scalar_param(2.0, 0.0);
        adamw_step(&mut p, &cfg).unwrap();
        assert!((p.value.as_scalar() - 1.9).abs() < 1e-15);
        assert_eq!(p.first_moment.as_scalar(), 0.0);
        assert_eq!(p.second_moment.as_scalar(), 0.0);
    }

    #[test]
    fn nonfinite_gradient_skips_step() {
        let mut p = scalar_param(1.0, f64::NAN);
        assert!(matches!(adamw_step(&mut p, &AdamW::default()), Err(MeltError::GradientOverflow(_))));
        assert_eq!(p.value.as_scalar(), 1.0);
        assert_eq!(p.step, 0);
        assert_eq!(p.first_moment.as_scalar(), 0.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamW { lr: 0.1, ..AdamW::default() };
        let mut p = scalar_param(1.0, 0.0);
        let mut last = f64::INFINITY;
        let mut losses = Vec::new();
        for _ in 0..100 {
            let x = p.value.as_scalar();
            losses.push(x * x);
            p.grad = Matrix::scalar(2.0 * x);
            adamw_step(&mut p, &cfg).unwrap();
        }
        // Adam's early steps are monotone on a convex bowl.
        for w in losses[..10].windows(2) {
            assert!(w[1] < w[0]);
        }
        let x = p.value.as_scalar();
        assert!(x.abs() < 0.5, "x = {x}");
        last = last.min(x * x);
        assert!(last < losses[0]);
        assert!(p.second_moment.data().iter().all(|v| *v >= 0.0));
    }
}
