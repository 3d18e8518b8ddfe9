use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const CROP_ATTEMPTS: usize = 10;

/// Random resized crop followed by a horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Output `(height, width)`.
    pub size: (usize, usize),
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl AugmentParams {
    pub fn new(height: usize, width: usize) -> Self {
        AugmentParams {
            size: (height, width),
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::invalid("augmentation output size must be positive"));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop scale range ({lo}, {hi}) not within (0, 1]")));
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) {
            return Err(Error::invalid(format!("crop ratio range {:?} invalid", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip probability {}", self.flip_prob)));
        }
        Ok(())
    }
}

fn sample_crop(h: usize, w: usize, p: &AugmentParams, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * (p.scale.0 + (p.scale.1 - p.scale.0) * rng.uniform());
        let ratio = (lr0 + (lr1 - lr0) * rng.uniform()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.below(h - ch + 1);
            let x0 = rng.below(w - cw + 1);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the window `(y0, x0, ch, cw)` of `pixels` to `(oh, ow)`,
/// sampling at pixel centers.
fn resize_window(
    pixels: &Tensor,
    window: (usize, usize, usize, usize),
    out: (usize, usize),
) -> Tensor {
    let (w, c) = (pixels.shape()[1], pixels.shape()[2]);
    let (y0, x0, ch, cw) = window;
    let (oh, ow) = out;
    let src = pixels.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut data = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let (ya, yb, fy) = axis(oy, oh, ch);
        for ox in 0..ow {
            let (xa, xb, fx) = axis(ox, ow, cw);
            for k in 0..c {
                let at = |y: usize, x: usize| src[((y0 + y) * w + x0 + x) * c + k];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bottom = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![oh, ow, c], data).expect("resize shape")
}

pub fn resize_bilinear(image: &ImageRecord, height: usize, width: usize) -> Result<ImageRecord> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize to an empty image"));
    }
    if (height, width) == (image.height(), image.width()) {
        return Ok(image.clone());
    }
    let window = (0, 0, image.height(), image.width());
    Ok(ImageRecord {
        pixels: resize_window(&image.pixels, window, (height, width)),
        label: image.label,
    })
}

pub fn flip_horizontal(image: &ImageRecord) -> ImageRecord {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let src = image.pixels.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            data.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    ImageRecord {
        pixels: Tensor::new(vec![h, w, c], data).expect("flip shape"),
        label: image.label,
    }
}

/// Random resized crop to `params.size`, then a horizontal flip with probability `flip_prob`.
///
/// The crop falls back to the full frame when no sampled window fits.
pub fn augment(image: &ImageRecord, rng: &mut Rng, params: &AugmentParams) -> Result<ImageRecord> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let window = sample_crop(h, w, params, rng);
    let resized = if window == (0, 0, h, w) && params.size == (h, w) {
        image.clone()
    } else {
        ImageRecord {
            pixels: resize_window(&image.pixels, window, params.size),
            label: image.label,
        }
    };
    Ok(if rng.bernoulli(params.flip_prob) {
        flip_horizontal(&resized)
    } else {
        resized
    })
}
