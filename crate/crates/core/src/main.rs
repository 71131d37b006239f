use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use melt::config::ExperimentConfig;
use melt::pipeline::{evaluate_model, new_model, run_variant, train_model, Dataset};
use melt::selfcheck::{self, SelfcheckOptions};
use melt::train::{load_checkpoint, save_checkpoint, AblationFlags};
use melt::MeltError;

#[derive(Parser)]
#[command(name = "melt", version, about = "Rarity-aware composed retrieval experiments")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the generator and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for data, checkpoints and reports.
    #[arg(long, global = true, default_value = "melt-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic banks and a manifest.
    Synth,
    /// Train on the data directory and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the full model and every single-component removal.
    Ablate,
    /// Run gradient, diffusion and format checks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

struct Paths {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Paths {
    fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data_dir.clone().unwrap_or_else(|| self.out.clone())
    }

    fn checkpoint(&self) -> PathBuf {
        self.cfg.paths.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn report(&self) -> PathBuf {
        self.cfg.paths.report.clone().unwrap_or_else(|| self.out.join("report.json"))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<MeltError>() {
        Some(MeltError::Config(_) | MeltError::InvalidArgument(_)) => 2,
        Some(
            MeltError::Io(_) | MeltError::Json(_) | MeltError::NotABank | MeltError::CorruptBank(_) | MeltError::Data(_),
        ) => 3,
        Some(MeltError::Divergence(_) | MeltError::GradientOverflow(_)) => 4,
        Some(MeltError::IncompatibleCheckpoint(_)) => 5,
        _ => 1,
    }
}

fn digest(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(MeltError::from)?)))
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?).map_err(MeltError::from)?;
    Ok(())
}

fn load_data(ctx: &Paths) -> anyhow::Result<Dataset> {
    let dir = ctx.data_dir();
    Dataset::load(&dir).with_context(|| format!("loading data from {}", dir.display()))
}

fn cmd_synth(ctx: &Paths) -> anyhow::Result<()> {
    let data = Dataset::synthesize(&ctx.cfg)?;
    let dir = ctx.data_dir();
    data.save(&dir)?;
    let rare = data.manifest.iter().filter(|r| r.rare_truth == Some(true)).count();
    log::info!("wrote {} triplets to {}", data.manifest.len(), dir.display());
    print_json(&json!({
        "triplets": data.manifest.len(),
        "rare": rare,
        "reference_entries": data.reference.len(),
        "modification_entries": data.modification.len(),
        "target_entries": data.target.len(),
        "q": data.reference.q(),
        "d": data.reference.d(),
    }))
}

fn cmd_train(ctx: &Paths) -> anyhow::Result<()> {
    let data = load_data(ctx)?;
    let path = ctx.checkpoint();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(MeltError::from)?;
    }
    let mut clock = Instant::now();
    let (model, reports) = train_model(&ctx.cfg, &data, |r| {
        let line = json!({
            "epoch": r.epoch,
            "L_bbc": r.l_bbc,
            "L_KD": r.l_kd,
            "L_diff": r.l_diff,
            "gate_rate": r.gate_rate,
            "wall_ms": clock.elapsed().as_millis() as u64,
        });
        eprintln!("{line}");
        clock = Instant::now();
    })?;
    save_checkpoint(&model, reports.len(), &path)?;
    print_json(&json!({
        "checkpoint": path,
        "sha256": digest(&path)?,
        "epochs": reports.len(),
        "final": reports.last(),
    }))
}

fn cmd_eval(ctx: &Paths, checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    let path = checkpoint.unwrap_or_else(|| ctx.checkpoint());
    if !path.is_file() {
        return Err(MeltError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        ))
        .into());
    }
    let data = load_data(ctx)?;
    let mut model = new_model(&ctx.cfg, data.reference.q(), data.reference.d())?;
    load_checkpoint(&path, &mut model)?;
    let (raw, refined) = evaluate_model(&ctx.cfg, &model, &data)?;
    let report = json!({ "raw": raw, "refined": refined });
    let out = ctx.report();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(MeltError::from)?;
    }
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").map_err(MeltError::from)?;
    print_json(&report)
}

fn cmd_ablate(ctx: &Paths) -> anyhow::Result<()> {
    let data = load_data(ctx)?;
    fs::create_dir_all(&ctx.out).map_err(MeltError::from)?;
    let partial = ctx.out.join("ablation.jsonl");
    let mut log = fs::File::create(&partial).map_err(MeltError::from)?;
    let mut table = serde_json::Map::new();
    for (name, flags) in AblationFlags::variants() {
        log::info!("variant {name}");
        let r = run_variant(&ctx.cfg, &data, name, flags)?;
        let row = json!({ "raw": r.raw, "refined": r.refined });
        writeln!(log, "{}", json!({ "variant": name, "result": row })).map_err(MeltError::from)?;
        log.flush().map_err(MeltError::from)?;
        table.insert(name.to_string(), row);
    }
    print_json(&serde_json::Value::Object(table))
}

fn cmd_selfcheck(inject_gradient_bug: bool) -> anyhow::Result<bool> {
    let started = Instant::now();
    let outcomes = selfcheck::run(SelfcheckOptions { inject_gradient_bug });
    for c in &outcomes {
        eprintln!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let ok = outcomes.iter().all(|c| c.passed);
    log::info!("selfcheck finished in {} ms", started.elapsed().as_millis());
    print_json(&json!({ "passed": ok, "checks": outcomes }))?;
    Ok(ok)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Command::Selfcheck { inject_gradient_bug } = cli.command {
        return cmd_selfcheck(inject_gradient_bug);
    }
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(MeltError::from).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let ctx = Paths { cfg, out: cli.out };
    match cli.command {
        Command::Synth => cmd_synth(&ctx)?,
        Command::Train => cmd_train(&ctx)?,
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint)?,
        Command::Ablate => cmd_ablate(&ctx)?,
        Command::Selfcheck { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
