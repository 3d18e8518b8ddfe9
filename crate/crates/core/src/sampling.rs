//! Prefix-conditioned image generation.

use crate::diffusion::{sample_patch, Denoiser, NoiseSchedule, Prediction};
use crate::error::{Error, Result};
use crate::model::{Model, Objective};
use crate::patch::{patch_stats, unpatchify, ImageRecord, PatchSequence};
use crate::tensor::{Graph, Rng, Tensor};
use crate::training::{eval_sequence, TargetKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// Fraction of patches, in raster order, kept as conditioning.
    pub prefix_fraction: f64,
    /// Sampler grid; only used by diffusion models.
    pub schedule: NoiseSchedule,
    /// Target space the model was trained in.
    pub target: TargetKind,
    pub predict: Prediction,
}

/// Number of conditioning patches for `fraction` of `t` patches.
pub fn prefix_len(fraction: f64, t: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("prefix fraction {fraction} not in [0, 1]")));
    }
    Ok(((fraction * t as f64).round() as usize).min(t))
}

/// Generation order: the raster prefix, then the remaining patches in the
/// order the model was trained on (raster for random orderings).
fn generation_order(model_order: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.extend(model_order.iter().copied().filter(|&r| r >= k));
    order
}

struct PatchDenoiser<'a> {
    model: &'a Model,
    z: Tensor,
    seq: &'a PatchSequence,
    t: usize,
    prediction: Prediction,
}

impl Denoiser for PatchDenoiser<'_> {
    fn denoise(&self, x_s: &Tensor, gamma: f64) -> Result<Tensor> {
        let pd = x_s.len();
        let mut g = Graph::new();
        let b = self.model.bind_frozen(&mut g);
        let z = g.constant(self.z.clone());
        let xs = g.constant(x_s.clone().reshape(vec![1, pd])?);
        let gm = g.constant(Tensor::full(&[1, 1], gamma));
        let y = b.decode(&mut g, z, &self.seq.coords[self.t..=self.t], self.seq.grid.1, Some((xs, Some(gm))))?;
        g.value(y).clone().reshape(vec![pd])
    }

    fn prediction(&self) -> Prediction {
        self.prediction
    }
}

/// Keeps the top `prefix_fraction` of `image` (at the model resolution) and
/// generates the rest patch by patch. Diffusion models sample each patch
/// with the ancestral sampler; MSE models emit their mean prediction.
/// Generated pixels are mapped back from normalized targets with the mean and
/// standard deviation of the conditioning pixels and clamped to `[0, 1]`.
pub fn generate(model: &Model, image: &ImageRecord, opts: &SampleOptions, rng: &mut Rng) -> Result<ImageRecord> {
    let base = eval_sequence(image, &model.config)?;
    let total = base.len();
    let k = prefix_len(opts.prefix_fraction, total)?;
    let raster = base.to_raster()?;
    let mut seq = raster.reorder(&generation_order(&base.permutation, k))?;
    let (mean, std) = if k > 0 {
        patch_stats(raster.patches.slice_rows(0, k)?.data())
    } else {
        (0.5, 0.25)
    };
    for t in k..total {
        seq.patches.row_mut(t).fill(0.0);
    }
    let pd = seq.patch_dim();
    for t in k..total {
        let mut g = Graph::new();
        let b = model.bind_frozen(&mut g);
        let ctx = b.context(&mut g, &seq)?;
        let z = g.value(ctx).slice_rows(t, 1)?;
        let out = match model.config.objective {
            Objective::Mse => {
                let zv = g.constant(z);
                let y = b.decode(&mut g, zv, &seq.coords[t..=t], seq.grid.1, None)?;
                g.value(y).clone().reshape(vec![pd])?
            }
            Objective::Diffusion => {
                let d = PatchDenoiser {
                    model,
                    z,
                    seq: &seq,
                    t,
                    prediction: opts.predict,
                };
                let mut prng = Rng::derive(rng.next_u64(), &[t as u64]);
                sample_patch(&d, &[pd], &opts.schedule, &mut prng)?
            }
        };
        if !out.all_finite() {
            return Err(Error::invalid(format!("non-finite pixels generated for patch {t}")));
        }
        let row = seq.patches.row_mut(t);
        for (dst, v) in row.iter_mut().zip(out.data()) {
            let v = match opts.target {
                TargetKind::Raw => *v,
                TargetKind::Normalized => v * std + mean,
            };
            *dst = v.clamp(0.0, 1.0);
        }
    }
    ImageRecord::new(unpatchify(&seq)?, image.label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, ModelConfig};
    use crate::patch::OrderingStrategy;

    fn setup(objective: Objective, ordering: OrderingStrategy) -> (Model, ImageRecord) {
        let config = ModelConfig {
            image_size: (8, 8),
            patch_size: 2,
            depth: 1,
            width: 8,
            heads: 2,
            objective,
            decoder: DecoderConfig::default_for(objective),
            ordering,
            ..ModelConfig::default()
        };
        let model = Model::new(config, &mut Rng::seed_from_u64(0)).unwrap();
        let img = ImageRecord::new(Rng::seed_from_u64(1).uniform_tensor(&[8, 8, 1]), Some(2)).unwrap();
        (model, img)
    }

    fn opts(fraction: f64) -> SampleOptions {
        SampleOptions {
            prefix_fraction: fraction,
            schedule: NoiseSchedule::uniform(5),
            target: TargetKind::Raw,
            predict: Prediction::Target,
        }
    }

    #[test]
    fn prefix_is_preserved_and_output_in_range() {
        for (obj, ord) in [
            (Objective::Diffusion, OrderingStrategy::raster()),
            (Objective::Mse, OrderingStrategy::nested(2, 2)),
            (Objective::Diffusion, OrderingStrategy::random()),
        ] {
            let (model, img) = setup(obj, ord);
            let out = generate(&model, &img, &opts(0.5), &mut Rng::seed_from_u64(3)).unwrap();
            assert_eq!(&out.pixels.data()[..32], &img.pixels.data()[..32]);
            assert_ne!(&out.pixels.data()[32..], &img.pixels.data()[32..]);
            assert!(out.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let again = generate(&model, &img, &opts(0.5), &mut Rng::seed_from_u64(3)).unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn full_prefix_is_identity() {
        let (model, img) = setup(Objective::Diffusion, OrderingStrategy::raster());
        let out = generate(&model, &img, &opts(1.0), &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, img);
        assert!(prefix_len(1.5, 4).is_err());
    }

    #[test]
    fn order_keeps_prefix_first() {
        assert_eq!(generation_order(&[0, 1, 4, 5, 2, 3, 6, 7], 3), vec![0, 1, 2, 4, 5, 3, 6, 7]);
    }
}
