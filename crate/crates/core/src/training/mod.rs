//! Objectives, AdamW, the learning-rate schedule, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adamw_step, adamw_update, clip_grad_norm, AdamW, OptimState};
pub use trainer::{
    checkpoint_path, eval_sequence, prepare_sequence, train, StepMetrics, TrainOutput, TrainSummary,
    Trainer, METRICS_HEADER,
};

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{forward_diffuse, sample_gamma, NoiseSchedule, Prediction, GAMMA_MAX};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model, Objective};
use crate::patch::{normalize_patch_target, PatchSequence};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Regression target of every patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Raw,
    /// Each patch standardized by its own mean and standard deviation.
    Normalized,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Raw => "raw",
            TargetKind::Normalized => "normalized_pixels",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(TargetKind::Raw),
            "normalized_pixels" => Ok(TargetKind::Normalized),
            _ => Err(Error::invalid(format!("unknown target `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 images; the peak is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub target: TargetKind,
    pub predict: Prediction,
    pub seed: u64,
    /// Random resized crop and flip.
    pub augment: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 16,
            base_lr: 0.016,
            optimizer: AdamW::default(),
            schedule: NoiseSchedule::uniform(100),
            target: TargetKind::Raw,
            predict: Prediction::Target,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(key, reason));
        if self.epochs == 0 {
            return bad("train.epochs", "must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(
                "train.warmup_epochs",
                format!("{} exceeds train.epochs = {}", self.warmup_epochs, self.epochs),
            );
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("train.base_lr", format!("{} must be finite and non-negative", self.base_lr));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) {
            return bad("train.beta1", format!("{} not in [0, 1)", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return bad("train.beta2", format!("{} not in [0, 1)", o.beta2));
        }
        if !(o.weight_decay >= 0.0) {
            return bad("train.weight_decay", format!("{} is negative", o.weight_decay));
        }
        if !(o.eps > 0.0) {
            return bad("train.eps", format!("{} must be positive", o.eps));
        }
        let s = &self.schedule;
        if !(s.a > 0.0 && s.a.is_finite()) {
            return bad("schedule.a", format!("{} must be positive", s.a));
        }
        if !(s.b > 0.0 && s.b.is_finite()) {
            return bad("schedule.b", format!("{} must be positive", s.b));
        }
        if s.sample_steps == 0 {
            return bad("schedule.sample_steps", "must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("train.grad_clip", format!("{c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr * batch_size / 256`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, batch_size: usize) -> f64 {
    let peak = base_lr * batch_size as f64 / 256.0;
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Regression targets `[T, pd]` of a sequence.
pub fn target_patches(seq: &PatchSequence, kind: TargetKind) -> Tensor {
    match kind {
        TargetKind::Raw => seq.patches.clone(),
        TargetKind::Normalized => {
            let data = (0..seq.len())
                .flat_map(|t| normalize_patch_target(seq.patches.row(t)))
                .collect();
            Tensor::new(seq.patches.shape().to_vec(), data).expect("same shape as the patches")
        }
    }
}

/// Loss of one image in the graph of `bound`, plus the gamma values drawn
/// (empty for the MSE objective).
pub fn image_loss(
    g: &mut Graph,
    bound: &BoundModel<'_>,
    seq: &PatchSequence,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Var, Vec<f64>)> {
    let target = target_patches(seq, cfg.target);
    match bound.model().config.objective {
        Objective::Mse => {
            let y = bound.predict(g, seq, None)?;
            let t = g.constant(target);
            Ok((g.mse(y, t)?, Vec::new()))
        }
        Objective::Diffusion => {
            let (t, pd) = (seq.len(), seq.patch_dim());
            let gammas: Vec<f64> = (0..t)
                .map(|_| sample_gamma(&cfg.schedule, rng).min(GAMMA_MAX))
                .collect();
            let eps = rng.gaussian_tensor(&[t, pd]);
            let mut xs = Vec::with_capacity(t * pd);
            for (r, &gm) in gammas.iter().enumerate() {
                let x0 = Tensor::from_vec(target.row(r).to_vec());
                let e = Tensor::from_vec(eps.row(r).to_vec());
                xs.extend(forward_diffuse(&x0, gm, &e)?.into_data());
            }
            let xs = g.constant(Tensor::new(vec![t, pd], xs)?);
            let gv = g.constant(Tensor::new(vec![t, 1], gammas.clone())?);
            let y = bound.predict(g, seq, Some((xs, Some(gv))))?;
            let goal = match cfg.predict {
                Prediction::Target => target,
                Prediction::Noise => eps,
            };
            let goal = g.constant(goal);
            Ok((g.mse(y, goal)?, gammas))
        }
    }
}

fn frozen_batch_loss(
    model: &Model,
    batch: &[PatchSequence],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for seq in batch {
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let (loss, _) = image_loss(&mut g, &bound, seq, cfg, rng)?;
        total += g.value(loss).item()?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean squared error of next-patch predictions over a batch.
pub fn mse_objective(model: &Model, batch: &[PatchSequence], target: TargetKind) -> Result<f64> {
    if model.config.objective != Objective::Mse {
        return Err(Error::invalid("mse_objective needs a model with objective=mse"));
    }
    let cfg = TrainConfig {
        target,
        ..TrainConfig::default()
    };
    frozen_batch_loss(model, batch, &cfg, &mut Rng::seed_from_u64(0))
}

/// Simplified diffusion loss over a batch, one gamma draw per patch.
pub fn diffusion_objective(
    model: &Model,
    batch: &[PatchSequence],
    schedule: &NoiseSchedule,
    target: TargetKind,
    predict: Prediction,
    rng: &mut Rng,
) -> Result<f64> {
    if model.config.objective != Objective::Diffusion {
        return Err(Error::invalid("diffusion_objective needs a model with objective=diffusion"));
    }
    let cfg = TrainConfig {
        schedule: *schedule,
        target,
        predict,
        ..TrainConfig::default()
    };
    frozen_batch_loss(model, batch, &cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, DecoderKind, ModelConfig, ParamId};
    use crate::patch::{patchify, ImageRecord};

    #[test]
    fn lr_examples() {
        assert_eq!(lr_schedule(0, 100, 10, 1.5e-4, 4096), 0.0);
        assert!((lr_schedule(10, 100, 10, 1.5e-4, 4096) - 2.4e-3).abs() < 1e-15);
        assert_eq!(lr_schedule(100, 100, 10, 1.5e-4, 4096), 0.0);
        assert!((lr_schedule(55, 100, 10, 0.256, 256) - 0.128).abs() < 1e-12);
        assert!((lr_schedule(5, 100, 10, 0.256, 256) - 0.128).abs() < 1e-12);
    }

    fn seq(value: f64) -> PatchSequence {
        let img = ImageRecord::new(Tensor::full(&[4, 4, 1], value), None).unwrap();
        patchify(&img, 2).unwrap()
    }

    fn zero_output(mut model: Model) -> Model {
        for (i, e) in model.params.entries().to_vec().iter().enumerate() {
            if e.name.starts_with("decoder.out") {
                model.params.set(ParamId(i), Tensor::zeros(e.value.shape())).unwrap();
            }
        }
        model
    }

    fn small(objective: Objective, decoder: DecoderConfig) -> ModelConfig {
        ModelConfig {
            image_size: (4, 4),
            patch_size: 2,
            depth: 1,
            width: 8,
            heads: 2,
            objective,
            decoder,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_predictions() {
        let m = Model::new(small(Objective::Mse, DecoderConfig::default_for(Objective::Mse)), &mut Rng::seed_from_u64(0))
            .unwrap();
        let m = zero_output(m);
        assert_eq!(mse_objective(&m, &[seq(1.0)], TargetKind::Raw).unwrap(), 1.0);

        let d = Model::new(
            small(Objective::Diffusion, DecoderConfig::default_for(Objective::Diffusion)),
            &mut Rng::seed_from_u64(0),
        )
        .unwrap();
        let d = zero_output(d);
        let batch = [seq(0.5), seq(0.25)];
        let loss = diffusion_objective(
            &d,
            &batch,
            &NoiseSchedule::uniform(10),
            TargetKind::Raw,
            Prediction::Target,
            &mut Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((loss - (0.25 + 0.0625) / 2.0).abs() < 1e-15);
        assert!(mse_objective(&d, &batch, TargetKind::Raw).is_err());
    }

    #[test]
    fn identity_decoder_at_gamma_one() {
        // Linear decoder on [z, x_s] wired to copy x_s.
        let config = small(
            Objective::Diffusion,
            DecoderConfig {
                kind: DecoderKind::Linear,
                layers: 0,
                gamma_cond: false,
            },
        );
        let mut m = Model::new(config, &mut Rng::seed_from_u64(0)).unwrap();
        let id = m.params.find("decoder.out.w").unwrap();
        let mut w = Tensor::zeros(&[8 + 4, 4]);
        for i in 0..4 {
            w.row_mut(8 + i)[i] = 1.0;
        }
        m.params.set(id, w).unwrap();
        let loss = diffusion_objective(
            &m,
            &[seq(0.7)],
            &NoiseSchedule::new(1e4, 1e-3, 10).unwrap(),
            TargetKind::Raw,
            Prediction::Target,
            &mut Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(loss < 1e-5, "{loss}");
    }

    #[test]
    fn normalized_targets() {
        let img = ImageRecord::new(
            Tensor::new(vec![2, 2, 1], vec![0.0, 0.5, 0.5, 1.0]).unwrap(),
            None,
        )
        .unwrap();
        let s = patchify(&img, 2).unwrap();
        let t = target_patches(&s, TargetKind::Normalized);
        let r2 = 0.5f64.sqrt();
        for (a, b) in t.data().iter().zip([-2.0 * r2, 0.0, 0.0, 2.0 * r2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(target_patches(&s, TargetKind::Raw), s.patches);
    }

    #[test]
    fn config_validation_keys() {
        let c = TrainConfig {
            warmup_epochs: 20,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("train.warmup_epochs"));
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("train.batch_size"));
    }
}
