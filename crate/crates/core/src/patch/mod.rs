//! Images, patch sequences, orderings, augmentation and dataset formats.

mod augment;
pub mod darlpack;
mod dataset;
mod ordering;
pub mod pnm;
pub mod synthetic;

pub use augment::{augment, flip_horizontal, resize_bilinear, AugmentParams};
pub use dataset::{epoch_order, load_dataset, Dataset, DatasetFormat};
pub use ordering::{ordering_permutation, OrderingKind, OrderingStrategy};

use crate::error::{Error, Result};
use crate::positional::Coord2D;
use crate::tensor::Tensor;

/// Floor applied to the per-patch standard deviation of normalized targets.
pub const NORMALIZE_STD_FLOOR: f64 = 1e-6;

/// An `[H, W, C]` image with values in `[0, 1]` and an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor,
    pub label: Option<u32>,
}

impl ImageRecord {
    pub fn new(pixels: Tensor, label: Option<u32>) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::shape(format!(
                "image must be [H, W, C], got {:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageRecord { pixels, label })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels.data()[(y * self.width() + x) * self.channels() + c]
    }
}

/// Patches of one image in sequence order.
///
/// `patches[t]` is the raster patch `permutation[t]`, and `coords[t]` its
/// grid coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Tensor,
    pub coords: Vec<Coord2D>,
    pub permutation: Vec<usize>,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Re-orders a raster-ordered sequence by `permutation` (sequence position -> raster index).
    pub fn reorder(&self, permutation: &[usize]) -> Result<PatchSequence> {
        if !self.is_raster() {
            return self.to_raster()?.reorder(permutation);
        }
        check_bijection(permutation, self.len())?;
        let d = self.patch_dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for &r in permutation {
            data.extend_from_slice(self.patches.row(r));
        }
        Ok(PatchSequence {
            patches: Tensor::new(vec![self.len(), d], data)?,
            coords: permutation
                .iter()
                .map(|&r| Coord2D::from_raster(r, self.grid.1))
                .collect(),
            permutation: permutation.to_vec(),
            grid: self.grid,
            patch_size: self.patch_size,
            channels: self.channels,
        })
    }

    pub fn is_raster(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Undoes the ordering, returning the raster sequence.
    pub fn to_raster(&self) -> Result<PatchSequence> {
        let d = self.patch_dim();
        let mut data = vec![0.0; self.len() * d];
        for (t, &r) in self.permutation.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(self.patches.row(t));
        }
        Ok(PatchSequence {
            patches: Tensor::new(vec![self.len(), d], data)?,
            coords: (0..self.len())
                .map(|r| Coord2D::from_raster(r, self.grid.1))
                .collect(),
            permutation: (0..self.len()).collect(),
            grid: self.grid,
            patch_size: self.patch_size,
            channels: self.channels,
        })
    }
}

pub(crate) fn check_bijection(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid(format!("permutation of length {} for {n} patches", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Splits an image into non-overlapping `p x p` patches in raster order, each
/// flattened by (row, column, channel).
pub fn patchify(image: &ImageRecord, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let px = image.pixels.data();
    let mut data = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in gy * p..(gy + 1) * p {
                let start = (y * w + gx * p) * c;
                data.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    let t = gh * gw;
    Ok(PatchSequence {
        patches: Tensor::new(vec![t, p * p * c], data)?,
        coords: (0..t).map(|r| Coord2D::from_raster(r, gw)).collect(),
        permutation: (0..t).collect(),
        grid: (gh, gw),
        patch_size: p,
        channels: c,
    })
}

/// Reassembles the `[H, W, C]` pixels of a sequence in any order.
pub fn unpatchify(seq: &PatchSequence) -> Result<Tensor> {
    check_bijection(&seq.permutation, seq.len())?;
    let (gh, gw) = seq.grid;
    let (p, c) = (seq.patch_size, seq.channels);
    let w = gw * p;
    let mut px = vec![0.0; gh * p * w * c];
    for (t, &r) in seq.permutation.iter().enumerate() {
        let (gy, gx) = (r / gw, r % gw);
        let patch = seq.patches.row(t);
        for dy in 0..p {
            let dst = ((gy * p + dy) * w + gx * p) * c;
            px[dst..dst + p * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Tensor::new(vec![gh * p, w, c], px)
}

/// Mean and floored population standard deviation of a patch.
pub fn patch_stats(patch: &[f64]) -> (f64, f64) {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(NORMALIZE_STD_FLOOR))
}

/// `(patch - mean) / max(std, 1e-6)`.
pub fn normalize_patch_target(patch: &[f64]) -> Vec<f64> {
    let (mean, std) = patch_stats(patch);
    patch.iter().map(|v| (v - mean) / std).collect()
}
