use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use darl::config::RunConfig;
use darl::model::Objective;

use crate::train::pretrain;
use crate::{create_dir, usage, ConfigArgs};

pub const SUMMARY_HEADER: &str = "index,axis,value,status,steps,initial_loss,final_loss,error";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Ordering,
    Schedule,
    Decoder,
    #[value(name = "pos_encoding")]
    PosEncoding,
    #[value(name = "patch_size")]
    PatchSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ordering => "ordering",
            Axis::Schedule => "schedule",
            Axis::Decoder => "decoder",
            Axis::PosEncoding => "pos_encoding",
            Axis::PatchSize => "patch_size",
        }
    }

    pub fn default_grid(self, objective: Objective) -> Vec<String> {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        match self {
            Axis::Ordering => v(&[
                "raster",
                "nested_raster:2",
                "nested_raster:4",
                "round_robin:2",
                "round_robin:4",
                "random",
            ]),
            Axis::Schedule => {
                let levels = [0.1, 1.0, 10.0];
                levels
                    .iter()
                    .flat_map(|a| levels.iter().map(move |b| format!("{a}:{b}")))
                    .collect()
            }
            Axis::Decoder => match objective {
                Objective::Mse => v(&["linear", "mlp:1", "mlp:2"]),
                Objective::Diffusion => v(&["mlp:2", "transformer:1", "transformer:2"]),
            },
            Axis::PosEncoding => v(&["nope", "absolute", "learnable", "rope1d", "rope2d"]),
            Axis::PatchSize => v(&["2", "4", "8"]),
        }
    }

    /// Applies one grid value to `config`.
    pub fn apply(self, config: &mut RunConfig, value: &str) -> darl::Result<()> {
        match self {
            Axis::Ordering => config.set("model.ordering", value),
            Axis::Schedule => {
                let (a, b) = value.split_once(':').ok_or_else(|| darl::Error::Config {
                    key: "schedule".into(),
                    reason: format!("grid value `{value}` is not `a:b`"),
                })?;
                config.set("schedule.a", a)?;
                config.set("schedule.b", b)
            }
            Axis::Decoder => {
                let (kind, layers) = match value.split_once(':') {
                    Some((k, l)) => (k, l),
                    None if value == "linear" => (value, "0"),
                    None => (value, "1"),
                };
                config.set("model.decoder", kind)?;
                config.set("model.decoder_layers", layers)
            }
            Axis::PosEncoding => config.set("model.pos_encoding", value),
            Axis::PatchSize => config.set("model.patch_size", value),
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Axis to vary.
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values; each axis has a default grid.
    /// Forms: ordering `nested_raster:2`, schedule `a:b`, decoder `kind[:layers]`, pos_encoding `rope2d`, patch_size `4`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Directory holding one run directory per grid value and summary.csv.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Run only grid indices i with i % N == I, written as `I/N`; summary.csv merges whatever runs exist.
    #[arg(long, value_name = "I/N")]
    pub shard: Option<String>,
    /// Stop each run once this many steps are complete.
    #[arg(long, value_name = "STEPS")]
    pub stop_after: Option<u64>,
}

fn parse_shard(s: &str) -> anyhow::Result<(usize, usize)> {
    let bad = || usage(format!("--shard must look like I/N with I < N, got `{s}`"));
    let (i, n) = s.split_once('/').ok_or_else(bad)?;
    let (i, n): (usize, usize) = (i.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?);
    if n == 0 || i >= n {
        return Err(bad());
    }
    Ok((i, n))
}

fn run_dir(out: &Path, index: usize, value: &str) -> PathBuf {
    let label: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect();
    out.join(format!("{index:02}_{label}"))
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Trains every grid value in `shard` and rewrites `out/summary.csv`.
/// Returns the number of failed runs.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    grid: &[String],
    out: &Path,
    shard: (usize, usize),
    stop_after: Option<u64>,
) -> anyhow::Result<usize> {
    if grid.is_empty() {
        return Err(usage("the ablation grid is empty"));
    }
    if axis == Axis::Schedule && base.model.objective != Objective::Diffusion {
        return Err(usage("the schedule axis needs model.objective=diffusion"));
    }
    let mut configs = Vec::with_capacity(grid.len());
    for value in grid {
        let mut c = base.clone();
        axis.apply(&mut c, value)
            .and_then(|()| c.validate())
            .with_context(|| format!("{} grid value `{value}`", axis.name()))?;
        configs.push(c);
    }
    create_dir(out)?;
    let mut failed = 0;
    for (i, (value, config)) in grid.iter().zip(configs).enumerate() {
        if i % shard.1 != shard.0 {
            continue;
        }
        let dir = run_dir(out, i, value);
        log::info!("run {i}: {}={value}", axis.name());
        let row = match pretrain(config, &dir, false, true, stop_after) {
            Ok(s) => {
                let f = |v: Option<f64>| v.map_or_else(String::new, |l| format!("{l:?}"));
                format!(
                    "{i},{},{value},ok,{},{},{},",
                    axis.name(),
                    s.metrics.len(),
                    f(s.initial_loss()),
                    f(s.final_loss())
                )
            }
            Err(e) => {
                failed += 1;
                log::error!("run {i} failed: {e:#}");
                create_dir(&dir)?;
                format!("{i},{},{value},failed,,,,{}", axis.name(), csv_field(&format!("{e:#}")))
            }
        };
        let p = dir.join("result.csv");
        fs::write(&p, format!("{SUMMARY_HEADER}\n{row}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for (i, value) in grid.iter().enumerate() {
        let p = run_dir(out, i, value).join("result.csv");
        let row = fs::read_to_string(&p)
            .ok()
            .and_then(|t| t.lines().nth(1).map(str::to_string))
            .unwrap_or_else(|| format!("{i},{},{value},pending,,,,", axis.name()));
        summary.push_str(&row);
        summary.push('\n');
    }
    let p = out.join("summary.csv");
    fs::write(&p, summary).with_context(|| format!("writing {}", p.display()))?;
    Ok(failed)
}

pub fn run(args: &AblateArgs) -> anyhow::Result<()> {
    let base = args.config.resolve()?;
    let grid: Vec<String> = match &args.grid {
        Some(g) => g
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => args.axis.default_grid(base.model.objective),
    };
    let shard = match &args.shard {
        Some(s) => parse_shard(s)?,
        None => (0, 1),
    };
    let failed = ablate(&base, args.axis, &grid, &args.out, shard, args.stop_after)?;
    println!("{}", args.out.join("summary.csv").display());
    if failed > 0 {
        return Err(anyhow!("{failed} ablation run(s) failed; see summary.csv"));
    }
    Ok(())
}
