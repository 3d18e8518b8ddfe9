//! The `darl` command line.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error. `DARL_THREADS` caps the worker pool.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use darl::config::RunConfig;

mod ablate;
mod inspect;
mod probe;
mod sample;
mod train;

pub use ablate::{AblateArgs, Axis, SUMMARY_HEADER};
pub use inspect::InspectArgs;
pub use probe::ProbeArgs;
pub use sample::SampleArgs;
pub use train::{binary_hash, PretrainArgs};

#[derive(Debug, Parser)]
#[command(name = "darl", version, about = "Denoising autoregressive patch transformers at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and resolved config into a run directory.
    Pretrain(PretrainArgs),
    /// Complete images from a checkpoint, conditioned on their top rows of patches.
    Sample(SampleArgs),
    /// Fit linear probes on frozen backbone features, one per layer.
    Probe(ProbeArgs),
    /// Train one model per value along an ablation axis and merge the results.
    Ablate(AblateArgs),
    /// Print a checkpoint's config, size and training state.
    Inspect(InspectArgs),
}

/// Config file plus `--set` overrides, shared by commands that build a run config.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; defaults are used when omitted.
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.depth=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let config = RunConfig::from_text(&text, &parse_overrides(&self.overrides)?)?;
        config.validate()?;
        Ok(config)
    }
}

pub(crate) fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    Ok(args
        .iter()
        .map(|a| RunConfig::parse_override(a))
        .collect::<darl::Result<_>>()?)
}

/// A bad command line or argument combination (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error: 2 for usage and configuration errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<darl::Error>(),
                Some(darl::Error::Config { .. } | darl::Error::ConfigMismatch(_))
            )
    });
    if is_usage {
        2
    } else {
        1
    }
}

/// Applies `DARL_THREADS` to the global worker pool.
pub fn configure_threads(value: Option<&str>) -> anyhow::Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("DARL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(a) => train::run(&a),
        Command::Sample(a) => sample::run(&a),
        Command::Probe(a) => probe::run(&a),
        Command::Ablate(a) => ablate::run(&a),
        Command::Inspect(a) => inspect::run(&a),
    }
}

pub(crate) fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
