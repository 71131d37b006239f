//! Running statistics behind the rarity gate.
//!
//! Residual mean and covariance follow an exponential moving average from
//! the first observation. Fitting-score mean and variance start once the
//! residual statistics are warm, seeded with the first score seen, and the
//! gate opens after `warmup` scores have been absorbed as well.

use crate::error::{MeltError, Result};
use crate::math::{solve_spd, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct RarityStats {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub mu_r: f64,
    pub var_r: f64,
    pub observation_count: u64,
    pub score_count: u64,
    pub(crate) frozen: bool,
}

impl RarityStats {
    pub fn new(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sigma: Matrix::zeros(d, d),
            mu_r: 0.0,
            var_r: 0.0,
            observation_count: 0,
            score_count: 0,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn sigma_r(&self) -> f64 {
        self.var_r.max(0.0).sqrt()
    }

    /// `μ_R + γ·σ_R`.
    pub fn threshold(&self, gamma: f64) -> f64 {
        self.mu_r + gamma * self.sigma_r()
    }

    pub fn residual_warm(&self, warmup: u64) -> bool {
        self.observation_count >= warmup
    }

    pub fn gate_ready(&self, warmup: u64) -> bool {
        self.residual_warm(warmup) && self.score_count >= warmup
    }

    /// `μ ← mμ + (1−m)r`, then `Σ ← mΣ + (1−m)(r−μ)(r−μ)ᵀ` with the new μ.
    pub fn update_residual(&mut self, r: &[f64], momentum: f64) -> Result<()> {
        if self.frozen {
            return Err(MeltError::StatsFrozen);
        }
        if r.len() != self.dim() {
            return Err(MeltError::shape(format!("residual of length {} for {}-d stats", r.len(), self.dim())));
        }
        let m = momentum;
        for (mu, x) in self.mu.iter_mut().zip(r) {
            *mu = m * *mu + (1.0 - m) * x;
        }
        let centered: Vec<f64> = r.iter().zip(&self.mu).map(|(x, mu)| x - mu).collect();
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                let v = m * self.sigma.get(i, j) + (1.0 - m) * (centered[i] * centered[j]);
                self.sigma.set(i, j, v);
                self.sigma.set(j, i, v);
            }
        }
        self.observation_count += 1;
        Ok(())
    }

    /// Same EMA rule applied to the scalar fitting score.
    pub fn update_score(&mut self, score: f64, momentum: f64) -> Result<()> {
        if self.frozen {
            return Err(MeltError::StatsFrozen);
        }
        if self.score_count == 0 {
            self.mu_r = score;
            self.var_r = 0.0;
        } else {
            let m = momentum;
            self.mu_r = m * self.mu_r + (1.0 - m) * score;
            let c = score - self.mu_r;
            self.var_r = m * self.var_r + (1.0 - m) * c * c;
        }
        self.score_count += 1;
        Ok(())
    }

    /// Mahalanobis magnitude of the centered residual,
    /// `sqrt((r−μ)ᵀ (Σ+εI)⁻¹ (r−μ))`.
    pub fn residual_energy(&self, r: &[f64], ridge: f64) -> Result<f64> {
        residual_energy(r, &self.mu, &self.sigma, ridge)
    }
}

pub fn residual_energy(r: &[f64], mu: &[f64], sigma: &Matrix, ridge: f64) -> Result<f64> {
    if r.len() != mu.len() {
        return Err(MeltError::shape("residual and mean lengths differ"));
    }
    let centered: Vec<f64> = r.iter().zip(mu).map(|(x, m)| x - m).collect();
    let solved = solve_spd(sigma, &centered, ridge)?;
    let q: f64 = centered.iter().zip(&solved).map(|(a, b)| a * b).sum();
    Ok(q.max(0.0).sqrt())
}
