use crate::error::{MeltError, Result};

/// Linear-β diffusion schedule with cumulative products `ᾱ_0 = 1`,
/// `ᾱ_t = Π_{i≤t}(1 − β_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(MeltError::config("diffusion needs at least one step"));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(MeltError::config("every beta must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Evenly spaced descending timesteps `T, T − T/n, …`, excluding the final
/// `0` that the sampler lands on.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(MeltError::config(format!("ddim_steps must lie in [1, {total}]")));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1 − ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(MeltError::invalid(format!("t = {t} beyond T = {}", schedule.steps())));
    }
    if x0.len() != eps.len() {
        return Err(MeltError::shape("x0 and noise lengths differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Deterministic DDIM update between two cumulative-product levels.
pub fn ddim_update(x_t: &[f64], alpha_bar_t: f64, alpha_bar_prev: f64, x0_hat: &[f64]) -> Vec<f64> {
    let (at, st) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (ap, sp) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    x_t.iter()
        .zip(x0_hat)
        .map(|(x, x0)| {
            let eps_hat = (x - at * x0) / st;
            ap * x0 + sp * eps_hat
        })
        .collect()
}

/// One DDIM step from `t` to `t_prev`. `t_prev == t` returns `x_t`.
pub fn ddim_step(x_t: &[f64], t: usize, t_prev: usize, x0_hat: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(MeltError::invalid(format!("t = {t} beyond T = {}", schedule.steps())));
    }
    if t_prev > t {
        return Err(MeltError::invalid(format!("t_prev = {t_prev} after t = {t}")));
    }
    if x_t.len() != x0_hat.len() {
        return Err(MeltError::shape("x_t and x0_hat lengths differ"));
    }
    if t_prev == t {
        return Ok(x_t.to_vec());
    }
    Ok(ddim_update(x_t, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), x0_hat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_is_cumulative_and_decreasing() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        let mut prod = 1.0;
        for t in 1..=50 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(s.alpha_bar(50) < 0.05);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(50) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn invalid_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn timestep_subsequences() {
        assert_eq!(ddim_timesteps(50, 5).unwrap(), vec![50, 40, 30, 20, 10]);
        assert_eq!(ddim_timesteps(50, 1).unwrap(), vec![50]);
        assert_eq!(ddim_timesteps(50, 10).unwrap().len(), 10);
        assert!(ddim_timesteps(50, 0).is_err());
        assert!(ddim_timesteps(5, 6).is_err());
    }

    #[test]
    fn forward_examples() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let x0 = [0.3, -1.0];
        assert_eq!(forward_diffuse(&x0, 0, &[5.0, 5.0], &s).unwrap(), x0.to_vec());
        let ab = s.alpha_bar(7);
        let out = forward_diffuse(&x0, 7, &[0.0, 0.0], &s).unwrap();
        assert!((out[0] - ab.sqrt() * 0.3).abs() < 1e-15);
        assert!(forward_diffuse(&x0, 51, &[0.0, 0.0], &s).is_err());

        // ᾱ_t = 0.25 from a single step with β = 0.75
        let quarter = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = forward_diffuse(&[1.0], 1, &[1.0], &quarter).unwrap()[0];
        assert!((x - 1.3660254).abs() < 1e-7);
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let x = [0.2, 0.4];
        assert_eq!(ddim_step(&x, 10, 10, &[9.0, 9.0], &s).unwrap(), x.to_vec());
        assert!(ddim_step(&x, 10, 11, &[0.0, 0.0], &s).is_err());

        let eps_hat = (1.0 - 0.5 * 0.6) / 0.75f64.sqrt();
        assert!((eps_hat - 0.8083).abs() < 1e-4);
        let out = ddim_update(&[1.0], 0.25, 0.5, &[0.6])[0];
        let want = 0.5f64.sqrt() * 0.6 + 0.5f64.sqrt() * eps_hat;
        assert!((out - want).abs() < 1e-15);
        assert!((out - 0.99581).abs() < 1e-5);
    }

    #[test]
    fn perfect_predictor_consistency() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let x0 = [0.9, 0.05, 0.05];
        let eps = [0.3, -1.2, 0.7];
        for t in 1..=50 {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for tp in 0..t {
                let stepped = ddim_step(&xt, t, tp, &x0, &s).unwrap();
                let direct = forward_diffuse(&x0, tp, &eps, &s).unwrap();
                for (a, b) in stepped.iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}
