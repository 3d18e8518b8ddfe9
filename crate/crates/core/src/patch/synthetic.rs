//! Deterministic labeled toy images: one filled shape per image, class = shape.
//!
//! Classes are 0 rectangle, 1 ellipse, 2 triangle, 3 cross. Position, size,
//! aspect, colours and contrast polarity are random; shapes are rendered with
//! 3x3 supersampling and pixel values are quantized to multiples of 1/255, so
//! records survive 8-bit formats unchanged.

use super::pnm::quantize;
use super::ImageRecord;
use crate::tensor::{Rng, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["rectangle", "ellipse", "triangle", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(count: usize, size: usize, channels: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            size,
            channels,
            seed,
            noise: 0.03,
        }
    }
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            0 => dx.abs() <= self.rx && dy.abs() <= self.ry,
            1 => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
            2 => {
                // Apex on top, base at the bottom edge.
                let t = (dy + self.ry) / (2.0 * self.ry);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.rx
            }
            _ => {
                let (tx, ty) = (self.rx / 3.0, self.ry / 3.0);
                (dx.abs() <= tx && dy.abs() <= self.ry) || (dy.abs() <= ty && dx.abs() <= self.rx)
            }
        }
    }
}

/// Renders record `index` of the dataset described by `spec`.
pub fn render(spec: &SyntheticSpec, index: usize) -> ImageRecord {
    let mut rng = Rng::derive(spec.seed, &[index as u64]);
    let class = index % NUM_CLASSES;
    let s = spec.size as f64;
    let r = s * (0.22 + 0.16 * rng.uniform());
    let aspect = 0.7 + 0.3 * rng.uniform();
    let (rx, ry) = if rng.bernoulli(0.5) {
        (r, r * aspect)
    } else {
        (r * aspect, r)
    };
    let shape = Shape {
        class,
        cx: s * (0.35 + 0.3 * rng.uniform()),
        cy: s * (0.35 + 0.3 * rng.uniform()),
        rx,
        ry,
    };
    let (mut bg, mut fg) = (0.1 + 0.25 * rng.uniform(), 0.65 + 0.3 * rng.uniform());
    if rng.bernoulli(0.5) {
        std::mem::swap(&mut bg, &mut fg);
    }
    let tint: Vec<f64> = (0..spec.channels).map(|_| 0.75 + 0.25 * rng.uniform()).collect();

    let n = spec.size;
    let mut data = Vec::with_capacity(n * n * spec.channels);
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                    hits += shape.contains(px, py) as usize;
                }
            }
            let cover = hits as f64 / 9.0;
            let base = bg + (fg - bg) * cover;
            for t in &tint {
                let v = base * t + spec.noise * rng.gaussian();
                data.push(quantize(v) as f64 / 255.0);
            }
        }
    }
    ImageRecord {
        pixels: Tensor::new(vec![n, n, spec.channels], data).expect("synthetic shape"),
        label: Some(class as u32),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Vec<ImageRecord> {
    (0..spec.count).map(|i| render(spec, i)).collect()
}
