use std::path::{Path, PathBuf};

use clap::Args;
use darl::model::Objective;
use darl::patch::{pnm, ImageRecord};
use darl::sampling::{generate, SampleOptions};
use darl::tensor::{Rng, Tensor};
use darl::training::{eval_sequence, Checkpoint};

use crate::train::load_data;
use crate::{create_dir, parse_overrides, usage};

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint to sample from.
    pub checkpoint: PathBuf,
    /// Output directory for the grid and the individual images.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Number of source images, taken from the start of the dataset.
    #[arg(short, long, default_value_t = 4)]
    pub n: usize,
    /// Fraction of patches, in raster order, kept from the source image.
    #[arg(long, default_value_t = 0.5)]
    pub prefix_fraction: f64,
    /// Sampler steps per patch; defaults to the checkpoint's schedule.sample_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed of the sampling noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override a dataset key of the checkpoint's config, e.g. `--set dataset.seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// One row per pair: the original inside a white one-pixel frame, then the
/// sample with a black margin of the same size.
pub fn sample_grid(pairs: &[(ImageRecord, ImageRecord)]) -> anyhow::Result<Tensor> {
    let Some((first, _)) = pairs.first() else {
        return Err(usage("nothing to tile"));
    };
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let (ch, cw) = (h + 2, w + 2);
    let gw = 2 * cw;
    let mut out = vec![0.0; pairs.len() * ch * gw * c];
    for (row, (orig, gen)) in pairs.iter().enumerate() {
        for (col, img, frame) in [(0, orig, 1.0), (1, gen, 0.0)] {
            for y in 0..ch {
                for x in 0..cw {
                    for k in 0..c {
                        let inside = (1..=h).contains(&y) && (1..=w).contains(&x);
                        let v = if inside { img.get(y - 1, x - 1, k) } else { frame };
                        out[((row * ch + y) * gw + col * cw + x) * c + k] = v;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![pairs.len() * ch, gw, c], out)?)
}

fn write_image(path: &Path, pixels: &Tensor) -> anyhow::Result<()> {
    pnm::write(path, pixels)?;
    Ok(())
}

pub fn run(args: &SampleArgs) -> anyhow::Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    for (k, v) in parse_overrides(&args.overrides)? {
        if !k.starts_with("dataset.") {
            return Err(usage(format!("sample only accepts dataset.* overrides, got `{k}`")));
        }
        config.set(&k, &v)?;
    }
    let model = &ckpt.model;
    let train = &config.train;
    let steps = args.steps.unwrap_or(train.schedule.sample_steps);
    if model.config.objective == Objective::Mse && args.steps.is_some_and(|s| s > 1) {
        return Err(usage(
            "only diffusion checkpoints sample stochastically; an MSE checkpoint emits its deterministic \
             mean prediction, so --steps must be omitted or 1",
        ));
    }
    let opts = SampleOptions {
        prefix_fraction: args.prefix_fraction,
        schedule: train.schedule.with_steps(steps)?,
        target: train.target,
        predict: train.predict,
    };
    let data = load_data(&config)?;
    create_dir(&args.out)?;
    let ext = extension(model.config.channels);
    let mut pairs = Vec::new();
    for (i, record) in data.records.iter().take(args.n).enumerate() {
        let mut rng = Rng::derive(args.seed, &[0x5a4d, i as u64]);
        let generated = generate(model, record, &opts, &mut rng)?;
        let original = ImageRecord::new(darl::patch::unpatchify(&eval_sequence(record, &model.config)?)?, record.label)?;
        write_image(&args.out.join(format!("original_{i:03}.{ext}")), &original.pixels)?;
        write_image(&args.out.join(format!("sample_{i:03}.{ext}")), &generated.pixels)?;
        pairs.push((original, generated));
    }
    let grid = args.out.join(format!("grid.{ext}"));
    write_image(&grid, &sample_grid(&pairs)?)?;
    println!("{} samples, grid {}", pairs.len(), grid.display());
    Ok(())
}
