//! End-to-end helpers shared by the command line and the tests: data
//! layout on disk, splitting, training and evaluation of one variant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, load_manifest, save_manifest, split_manifest, EmbeddingBank, TripletRecord};
use crate::error::{MeltError, Result};
use crate::eval::{evaluate, EvalOptions, RetrievalReport};
use crate::model::MeltModel;
use crate::train::{fit, resolve_triplets, AblationFlags, EpochReport};

pub const REFERENCE_BANK: &str = "reference.bank";
pub const MODIFICATION_BANK: &str = "modification.bank";
pub const TARGET_BANK: &str = "target.bank";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub reference: EmbeddingBank,
    pub modification: EmbeddingBank,
    pub target: EmbeddingBank,
    pub manifest: Vec<TripletRecord>,
}

impl Dataset {
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        let ds = generate_synthetic(&cfg.synth)?;
        Ok(Self { reference: ds.reference, modification: ds.modification, target: ds.target, manifest: ds.manifest })
    }

    pub fn files(dir: &Path) -> [PathBuf; 4] {
        [REFERENCE_BANK, MODIFICATION_BANK, TARGET_BANK, MANIFEST].map(|f| dir.join(f))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let [r, m, t, manifest] = Self::files(dir);
        self.reference.save(r)?;
        self.modification.save(m)?;
        self.target.save(t)?;
        save_manifest(&self.manifest, manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let files = Self::files(dir);
        let missing: Vec<String> = files.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(MeltError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing data files: {}", missing.join(", ")),
            )));
        }
        let [r, m, t, manifest] = files;
        Ok(Self {
            reference: EmbeddingBank::load(r)?,
            modification: EmbeddingBank::load(m)?,
            target: EmbeddingBank::load(t)?,
            manifest: load_manifest(manifest)?,
        })
    }

    /// `(train, validation, test)` records.
    pub fn split(&self, cfg: &ExperimentConfig) -> Result<(Vec<TripletRecord>, Vec<TripletRecord>, Vec<TripletRecord>)> {
        let s = &cfg.split;
        let mut parts = split_manifest(&self.manifest, &[s.train, s.validation, s.test], cfg.synth.seed)?;
        let test = parts.pop().expect("three splits");
        let val = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        Ok((train, val, test))
    }
}

pub fn new_model(cfg: &ExperimentConfig, q: usize, d: usize) -> Result<MeltModel> {
    MeltModel::new(&cfg.ratr, &cfg.dsd, q, d, cfg.train.batch_size, cfg.train.seed)
}

/// Trains a fresh model on the training split.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(MeltModel, Vec<EpochReport>)> {
    let (train, _, _) = data.split(cfg)?;
    let triplets = resolve_triplets(&train, &data.reference, &data.modification, &data.target)?;
    let mut model = new_model(cfg, data.reference.q(), data.reference.d())?;
    let reports = fit(&mut model, &triplets, &cfg.train, 0, cfg.train.epochs, on_epoch)?;
    Ok((model, reports))
}

/// Raw and refined reports on the test split.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &MeltModel, data: &Dataset) -> Result<(RetrievalReport, RetrievalReport)> {
    let (_, _, test) = data.split(cfg)?;
    let opts = EvalOptions {
        tau: cfg.train.tau,
        seed: cfg.train.seed,
        switches: cfg.train.ablation.switches(),
        config_hash: cfg.config_hash(),
    };
    evaluate(model, &test, &data.reference, &data.modification, &data.target, &opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub raw: RetrievalReport,
    pub refined: RetrievalReport,
    pub final_epoch: Option<EpochReport>,
}

/// Trains and evaluates one ablation variant of `cfg`.
pub fn run_variant(cfg: &ExperimentConfig, data: &Dataset, name: &str, flags: AblationFlags) -> Result<VariantResult> {
    let mut cfg = cfg.clone();
    cfg.train.ablation = flags;
    let (model, reports) = train_model(&cfg, data, |_| {})?;
    let (raw, refined) = evaluate_model(&cfg, &model, data)?;
    Ok(VariantResult { name: name.to_string(), raw, refined, final_epoch: reports.last().cloned() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.triplet_count = 120;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 1;
        cfg.dsd.ddim_steps = 2;
        cfg.dsd.hidden = 8;
        cfg
    }

    #[test]
    fn data_round_trips_through_disk() {
        let cfg = tiny();
        let data = Dataset::synthesize(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), data);
        std::fs::remove_file(dir.path().join(TARGET_BANK)).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(TARGET_BANK), "{err}");
    }

    #[test]
    fn split_covers_the_manifest() {
        let cfg = tiny();
        let data = Dataset::synthesize(&cfg).unwrap();
        let (a, b, c) = data.split(&cfg).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), 120);
        assert_eq!((a.len(), b.len(), c.len()), (72, 12, 36));
    }

    #[test]
    fn variant_runs_end_to_end() {
        let cfg = tiny();
        let data = Dataset::synthesize(&cfg).unwrap();
        let r = run_variant(&cfg, &data, "full", AblationFlags::default()).unwrap();
        assert_eq!(r.raw.query_count, 36);
        assert!(r.refined.refined && !r.raw.refined);
        assert_eq!(r, run_variant(&cfg, &data, "full", AblationFlags::default()).unwrap());
    }
}
