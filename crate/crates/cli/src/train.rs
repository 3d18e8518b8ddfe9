use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use darl::config::RunConfig;
use darl::patch::{load_dataset, Dataset};
use darl::training::{train, Checkpoint, TrainOutput, TrainSummary, Trainer};
use sha2::{Digest, Sha256};

use crate::{create_dir, usage, ConfigArgs};

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for config.txt, run.txt, metrics.csv and checkpoints.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Seed for initialization, data order and noise (same as `--set train.seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run directory's checkpoint.drlc.
    #[arg(long)]
    pub resume: bool,
    /// Overwrite an existing run, or resume with a model config that differs from the checkpoint's.
    #[arg(long)]
    pub force: bool,
    /// Stop once this many steps are complete.
    #[arg(long, value_name = "STEPS")]
    pub stop_after: Option<u64>,
}

pub fn load_data(config: &RunConfig) -> anyhow::Result<Dataset> {
    let d = &config.dataset;
    Ok(load_dataset(d.format, d.path.as_deref(), &d.synthetic_spec())?)
}

/// Git-style content hash of the running binary: SHA-256 over
/// `blob <len>\0<bytes>`.
pub fn binary_hash() -> anyhow::Result<String> {
    let exe = std::env::current_exe().context("locating the running binary")?;
    let bytes = fs::read(&exe).with_context(|| format!("reading {}", exe.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_run_files(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    create_dir(dir)?;
    let cfg = dir.join("config.txt");
    fs::write(&cfg, config.to_string()).with_context(|| format!("writing {}", cfg.display()))?;
    let info = format!(
        "version = {}\nbinary_sha256 = {}\n",
        env!("CARGO_PKG_VERSION"),
        binary_hash()?
    );
    let run = dir.join("run.txt");
    fs::write(&run, info).with_context(|| format!("writing {}", run.display()))?;
    Ok(())
}

/// Trains `config` into `dir`, optionally resuming from `dir/checkpoint.drlc`.
pub fn pretrain(
    config: RunConfig,
    dir: &Path,
    resume: bool,
    force: bool,
    stop_after: Option<u64>,
) -> anyhow::Result<TrainSummary> {
    let ckpt_path = dir.join("checkpoint.drlc");
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let model = ckpt.model_for(&config.model, force)?;
        let mut t = Trainer::from_checkpoint(ckpt);
        t.model = model;
        t.config = config.clone();
        log::info!("resuming {} at step {}", dir.display(), t.step);
        t
    } else {
        if ckpt_path.exists() && !force {
            return Err(usage(format!(
                "{} already holds a checkpoint; pass --resume to continue or --force to start over",
                dir.display()
            )));
        }
        Trainer::new(config.clone())?
    };
    let data = load_data(&config)?;
    write_run_files(dir, &config)?;
    log::info!(
        "training {} parameters on {} images for {} steps",
        trainer.model.param_count(),
        data.len(),
        trainer.total_steps(data.len())
    );
    let out = TrainOutput {
        dir: Some(dir.to_path_buf()),
        stop_after,
    };
    Ok(train(&mut trainer, &data, &out)?)
}

pub fn run(args: &PretrainArgs) -> anyhow::Result<()> {
    let mut config = args.config.resolve()?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let summary = pretrain(config, &args.out, args.resume, args.force, args.stop_after)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
    println!(
        "{} steps of {}; loss {} -> {}; checkpoint {}",
        summary.metrics.len(),
        summary.total_steps,
        fmt(summary.initial_loss()),
        fmt(summary.final_loss()),
        summary
            .checkpoint
            .as_deref()
            .map_or_else(|| "-".to_string(), |p| p.display().to_string())
    );
    Ok(())
}
