//! Run configuration as flat `section.key = value` text.
//!
//! Grammar: one assignment per line, `key = value`; surrounding whitespace is
//! ignored; blank lines and lines starting with `#` are skipped. Keys are the
//! dotted names listed in [`KEYS`]; unknown or repeated keys are errors.
//! Values are plain tokens: integers, decimal floats, `true`/`false`, names
//! such as `rope2d`, `HxW` sizes, or a path (an empty path means unset).
//!
//! Setting `model.objective` resets the decoder keys to that objective's
//! defaults before any explicit `model.decoder*` keys are applied.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diffusion::Prediction;
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, ModelConfig, Objective};
use crate::patch::synthetic::SyntheticSpec;
use crate::patch::DatasetFormat;
use crate::training::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.image_size", "training resolution, `N` or `HxW` pixels (16x16)"),
    ("model.channels", "image channels (1)"),
    ("model.patch_size", "patch side in pixels (4)"),
    ("model.depth", "backbone blocks (4)"),
    ("model.width", "token width (32)"),
    ("model.heads", "attention heads (4)"),
    ("model.mlp_ratio", "MLP hidden width as a multiple of the token width (2)"),
    ("model.pos_encoding", "nope | absolute | learnable | rope1d | rope2d (rope2d)"),
    ("model.causal", "causal backbone attention (true)"),
    ("model.drop_path", "stochastic depth rate (0)"),
    ("model.objective", "mse | diffusion (mse)"),
    ("model.decoder", "linear | mlp | transformer (linear for mse, transformer for diffusion)"),
    ("model.decoder_layers", "decoder blocks (0 for linear, 1 for transformer)"),
    ("model.gamma_cond", "feed gamma to the diffusion decoder (false)"),
    ("model.ordering", "raster | random | nested_raster:B | round_robin:BHxBW (raster)"),
    ("model.rope_base", "rotary frequency base (10000)"),
    ("train.epochs", "passes over the dataset (10)"),
    ("train.warmup_epochs", "linear warmup length (1)"),
    ("train.batch_size", "images per step (16)"),
    ("train.base_lr", "learning rate per 256 images (0.016)"),
    ("train.beta1", "AdamW first-moment decay (0.9)"),
    ("train.beta2", "AdamW second-moment decay (0.95)"),
    ("train.weight_decay", "decoupled weight decay (0.05)"),
    ("train.eps", "AdamW epsilon (1e-8)"),
    ("train.target", "raw | normalized_pixels (raw)"),
    ("train.predict", "target | noise, diffusion only (target)"),
    ("train.seed", "seed for initialization, data order and noise (0)"),
    ("train.augment", "random resized crop and flip (true)"),
    ("train.checkpoint_every", "steps between checkpoints, 0 for end only (0)"),
    ("train.grad_clip", "global gradient-norm cap or `none` (none)"),
    ("schedule.a", "Beta shape a of training gamma (1)"),
    ("schedule.b", "Beta shape b of training gamma (1)"),
    ("schedule.sample_steps", "sampler steps (100)"),
    ("dataset.format", "pgm_dir | ppm_dir | darlpack | synthetic (synthetic)"),
    ("dataset.path", "dataset location, unused for synthetic"),
    ("dataset.count", "synthetic images (256)"),
    ("dataset.size", "synthetic image side (16)"),
    ("dataset.channels", "synthetic channels (1)"),
    ("dataset.seed", "synthetic generator seed (0)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DatasetFormat::Synthetic,
            path: None,
            count: 256,
            size: 16,
            channels: 1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.count, self.size, self.channels, self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse(key, h)?, parse(key, w)?)),
        None => {
            let n = parse(key, value)?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    /// Parses config text, then applies `overrides` (`key`, `value`) on top.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }
        for (k, v) in overrides {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig::default();
        if let Some(v) = map.remove("model.objective") {
            cfg.set("model.objective", &v)?;
        }
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses a `key=value` override argument.
    pub fn parse_override(arg: &str) -> Result<(String, String)> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| Error::config(arg, "override must look like key=value"))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.dataset);
        match key {
            "model.image_size" => m.image_size = parse_size(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.patch_size" => m.patch_size = parse(key, value)?,
            "model.depth" => m.depth = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.pos_encoding" => m.pos_encoding = parse(key, value)?,
            "model.causal" => m.causal = parse(key, value)?,
            "model.drop_path" => m.drop_path = parse(key, value)?,
            "model.objective" => {
                let o: Objective = parse(key, value)?;
                m.objective = o;
                m.decoder = DecoderConfig::default_for(o);
            }
            "model.decoder" => m.decoder.kind = parse(key, value)?,
            "model.decoder_layers" => m.decoder.layers = parse(key, value)?,
            "model.gamma_cond" => m.decoder.gamma_cond = parse(key, value)?,
            "model.ordering" => m.ordering = parse(key, value)?,
            "model.rope_base" => m.rope_base = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, value)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "train.eps" => t.optimizer.eps = parse(key, value)?,
            "train.target" => t.target = parse(key, value)?,
            "train.predict" => t.predict = parse::<Prediction>(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.grad_clip" => {
                t.grad_clip = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "schedule.a" => t.schedule.a = parse(key, value)?,
            "schedule.b" => t.schedule.b = parse(key, value)?,
            "schedule.sample_steps" => t.schedule.sample_steps = parse(key, value)?,
            "dataset.format" => d.format = parse(key, value)?,
            "dataset.path" => d.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dataset.count" => d.count = parse(key, value)?,
            "dataset.size" => d.size = parse(key, value)?,
            "dataset.channels" => d.channels = parse(key, value)?,
            "dataset.seed" => d.seed = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.dataset);
        let f = |v: f64| format!("{v:?}");
        let values = [
            format!("{}x{}", m.image_size.0, m.image_size.1),
            m.channels.to_string(),
            m.patch_size.to_string(),
            m.depth.to_string(),
            m.width.to_string(),
            m.heads.to_string(),
            m.mlp_ratio.to_string(),
            m.pos_encoding.to_string(),
            m.causal.to_string(),
            f(m.drop_path),
            m.objective.to_string(),
            m.decoder.kind.to_string(),
            m.decoder.layers.to_string(),
            m.decoder.gamma_cond.to_string(),
            m.ordering.to_string(),
            f(m.rope_base),
            t.epochs.to_string(),
            t.warmup_epochs.to_string(),
            t.batch_size.to_string(),
            f(t.base_lr),
            f(t.optimizer.beta1),
            f(t.optimizer.beta2),
            f(t.optimizer.weight_decay),
            f(t.optimizer.eps),
            t.target.to_string(),
            t.predict.to_string(),
            t.seed.to_string(),
            t.augment.to_string(),
            t.checkpoint_every.to_string(),
            t.grad_clip.map_or_else(|| "none".to_string(), f),
            f(t.schedule.a),
            f(t.schedule.b),
            t.schedule.sample_steps.to_string(),
            d.format.to_string(),
            d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            d.count.to_string(),
            d.size.to_string(),
            d.channels.to_string(),
            d.seed.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.predict == Prediction::Noise && self.model.objective != Objective::Diffusion {
            return Err(Error::config("train.predict", "noise prediction needs model.objective=diffusion"));
        }
        let d = &self.dataset;
        match d.format {
            DatasetFormat::Synthetic => {
                if d.count == 0 {
                    return Err(Error::config("dataset.count", "must be positive"));
                }
                if d.size == 0 {
                    return Err(Error::config("dataset.size", "must be positive"));
                }
                if d.channels != self.model.channels {
                    return Err(Error::config(
                        "dataset.channels",
                        format!("{} but model.channels is {}", d.channels, self.model.channels),
                    ));
                }
            }
            _ if d.path.is_none() => {
                return Err(Error::config("dataset.path", format!("required for format {}", d.format)))
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    writeln!(f)?;
                }
                section = s;
            }
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
