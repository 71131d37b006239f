//! Training behaviour on the default synthetic configuration.

use melt::config::ExperimentConfig;
use melt::math::Tape;
use melt::pipeline::{new_model, train_model, Dataset};
use melt::train::{forward_batch, resolve_triplets, train_epoch, AblationFlags, BatchContext, Triplet};

#[test]
fn contrastive_loss_at_init_is_near_ln_b() {
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = ExperimentConfig::default().with_seed(seed);
        let data = Dataset::synthesize(&cfg).unwrap();
        let triplets = resolve_triplets(&data.manifest, &data.reference, &data.modification, &data.target).unwrap();
        let mut model = new_model(&cfg, cfg.synth.q, cfg.synth.d).unwrap();
        let b = cfg.train.batch_size;
        let batch: Vec<&Triplet> = triplets[..b].iter().collect();
        let mut ctx = BatchContext::draw(&model.arch, &cfg.train.ablation, b, seed);
        let mut tape = Tape::new();
        let f = forward_batch(&mut tape, &model.store, &model.arch, &mut model.stats, &batch, &cfg.train, &mut ctx).unwrap();
        total += tape.value(f.bbc).as_scalar();
    }
    let mean = total / 5.0;
    let ln_b = (ExperimentConfig::default().train.batch_size as f64).ln();
    assert!((mean / ln_b - 1.0).abs() <= 0.15, "mean {mean} vs {ln_b}");
}

#[test]
fn default_run_halves_the_loss() {
    let cfg = ExperimentConfig::default();
    let data = Dataset::synthesize(&cfg).unwrap();
    let (_, reports) = train_model(&cfg, &data, |_| {}).unwrap();
    assert_eq!(reports.len(), cfg.train.epochs);
    let (first, last) = (reports[0].loss, reports.last().unwrap().loss);
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn gate_rate_follows_flags() {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.triplet_count = 600;
    let data = Dataset::synthesize(&cfg).unwrap();
    let (train, _, _) = data.split(&cfg).unwrap();
    let triplets = resolve_triplets(&train, &data.reference, &data.modification, &data.target).unwrap();
    for (flags, expected) in [
        (AblationFlags { no_threshold: true, ..AblationFlags::default() }, Some(1.0)),
        (AblationFlags { no_modification: true, ..AblationFlags::default() }, Some(0.0)),
        (AblationFlags::default(), None),
    ] {
        let mut run = cfg.clone();
        run.train.ablation = flags;
        let mut model = new_model(&run, 8, 32).unwrap();
        train_epoch(&mut model, &triplets, &run.train, 0).unwrap();
        let report = train_epoch(&mut model, &triplets, &run.train, 1).unwrap();
        assert!(report.gate_eligible > 0);
        assert!((0.0..=1.0).contains(&report.gate_rate));
        if let Some(rate) = expected {
            assert_eq!(report.gate_rate, rate, "{flags:?}");
        }
    }
}
