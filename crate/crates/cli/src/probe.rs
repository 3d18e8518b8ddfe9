use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use darl::model::Readout;
use darl::probe::{check_layers, probe, ProbeOptions};
use darl::training::{Checkpoint, Trainer};

use crate::train::load_data;
use crate::{parse_overrides, usage};

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint whose backbone is probed.
    pub checkpoint: PathBuf,
    /// Comma-separated 1-based block indices, or `all`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Feature read-out: `mean` (mean over patch tokens) or `last`.
    #[arg(long, default_value = "mean")]
    pub readout: Readout,
    /// Every k-th image is held out for testing.
    #[arg(long, default_value_t = 4)]
    pub holdout: usize,
    /// Full-batch optimizer steps of the linear head.
    #[arg(long, default_value_t = ProbeOptions::default().epochs)]
    pub epochs: usize,
    /// Learning rate of the linear head.
    #[arg(long, default_value_t = ProbeOptions::default().lr)]
    pub lr: f64,
    /// Probe the freshly initialized backbone of the checkpoint's config instead of the trained one.
    #[arg(long)]
    pub random_init: bool,
    /// Also write the CSV to this file.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Override a dataset key of the checkpoint's config (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub fn parse_layers(spec: &str, depth: usize) -> anyhow::Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((1..=depth).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad layer `{s}` in --layers")))
        })
        .collect()
}

pub fn run(args: &ProbeArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    for (k, v) in parse_overrides(&args.overrides)? {
        if !k.starts_with("dataset.") {
            return Err(usage(format!("probe only accepts dataset.* overrides, got `{k}`")));
        }
        config.set(&k, &v)?;
    }
    let model = if args.random_init {
        Trainer::new(config.clone())?.model
    } else {
        ckpt.model
    };
    let layers = parse_layers(&args.layers, model.depth())?;
    check_layers(&model, &layers).map_err(|e| usage(e.to_string()))?;
    let data = load_data(&config)?;
    if !data.is_labeled() {
        return Err(usage("linear probing needs a labeled dataset"));
    }
    let (train, test) = data.split_holdout(args.holdout);
    let opts = ProbeOptions {
        readout: args.readout,
        epochs: args.epochs,
        lr: args.lr,
        ..ProbeOptions::default()
    };
    let results = probe(&model, &train, &test, &layers, &opts)?;
    let mut csv = String::from("layer,accuracy\n");
    for r in &results {
        csv.push_str(&format!("{},{:.6}\n", r.layer, r.accuracy));
    }
    print!("{csv}");
    if let Some(p) = &args.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
