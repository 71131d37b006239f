//! The trainable model: RATR and denoiser parameters in one store, plus the
//! running rarity statistics.

use crate::dsd::{DenoiserParams, DsdConfig, NoiseSchedule, Refiner};
use crate::error::{MeltError, Result};
use crate::math::rng::{derive_seed, seeded};
use crate::math::{Matrix, ParamStore, Tape};
use crate::ratr::{refine_query, RarityStats, RatrConfig, RatrParams, RatrSwitches, StatsAccess};

/// Everything about the model that is fixed after construction.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub ratr: RatrParams,
    pub denoiser: DenoiserParams,
    pub ratr_cfg: RatrConfig,
    pub dsd_cfg: DsdConfig,
    pub schedule: NoiseSchedule,
    pub q: usize,
    pub d: usize,
    /// Candidate width of the denoiser (the training batch size).
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct MeltModel {
    pub store: ParamStore,
    pub stats: RarityStats,
    pub arch: Architecture,
}

impl MeltModel {
    pub fn new(ratr_cfg: &RatrConfig, dsd_cfg: &DsdConfig, q: usize, d: usize, width: usize, seed: u64) -> Result<Self> {
        ratr_cfg.validate(q)?;
        dsd_cfg.validate()?;
        if d == 0 || width < 2 {
            return Err(MeltError::config("need d >= 1 and a candidate width of at least 2"));
        }
        let schedule = dsd_cfg.schedule()?;
        let mut store = ParamStore::new();
        let ratr = RatrParams::init(&mut store, ratr_cfg, d, &mut seeded(derive_seed(seed, &[1])));
        let denoiser = DenoiserParams::init(&mut store, dsd_cfg, width, d, &mut seeded(derive_seed(seed, &[2])));
        Ok(Self {
            store,
            stats: RarityStats::new(d),
            arch: Architecture {
                ratr,
                denoiser,
                ratr_cfg: ratr_cfg.clone(),
                dsd_cfg: dsd_cfg.clone(),
                schedule,
                q,
                d,
                width,
            },
        })
    }

    pub fn refiner(&self, tau: f64) -> Refiner<'_> {
        Refiner {
            store: &self.store,
            params: &self.arch.denoiser,
            schedule: &self.arch.schedule,
            ddim_steps: self.arch.dsd_cfg.ddim_steps,
            tau,
        }
    }

    /// Composed query feature with frozen statistics.
    pub fn compose(&self, reference: &Matrix, modification: &Matrix, switches: RatrSwitches) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f_r = tape.constant(reference.clone());
        let f_m = tape.constant(modification.clone());
        let out = refine_query(
            &mut tape,
            &self.store,
            &self.arch.ratr,
            &self.arch.ratr_cfg,
            switches,
            StatsAccess::Frozen(&self.stats),
            f_r,
            f_m,
        )?;
        Ok(tape.value(out.composed).clone())
    }

    /// Rounds every parameter, optimizer moment and statistic to `f32`
    /// precision so that a checkpoint restores the state exactly.
    pub fn snap_to_f32(&mut self) {
        for p in self.store.iter_mut() {
            p.value = p.value.to_f32_precision();
            p.first_moment = p.first_moment.to_f32_precision();
            p.second_moment = p.second_moment.to_f32_precision();
        }
        let s = &mut self.stats;
        for v in &mut s.mu {
            *v = *v as f32 as f64;
        }
        s.sigma = s.sigma.to_f32_precision();
        s.mu_r = s.mu_r as f32 as f64;
        s.var_r = s.var_r as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_seeded() {
        let a = MeltModel::new(&RatrConfig::default(), &DsdConfig::default(), 8, 32, 16, 3).unwrap();
        let b = MeltModel::new(&RatrConfig::default(), &DsdConfig::default(), 8, 32, 16, 3).unwrap();
        let c = MeltModel::new(&RatrConfig::default(), &DsdConfig::default(), 8, 32, 16, 4).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        assert!(MeltModel::new(&RatrConfig::default(), &DsdConfig::default(), 8, 32, 1, 0).is_err());
    }

    #[test]
    fn snapping_is_idempotent() {
        let mut m = MeltModel::new(&RatrConfig::default(), &DsdConfig::default(), 4, 8, 4, 1).unwrap();
        m.snap_to_f32();
        let once = m.store.clone();
        m.snap_to_f32();
        assert_eq!(once, m.store);
    }
}
