//! Positional encodings: NoPE, 2D sin/cos, learnable tables, and rotary
//! embeddings over one or more coordinate axes.
//!
//! Rotary angles are `m * theta_i` with `theta_i = base^(-2i / d_axis)`, where
//! `d_axis` is the number of channels given to one axis. With several axes the
//! channel pairs are split into contiguous groups, the first group for `x`,
//! the next for `y`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{RotationTable, Rng, Tensor};

pub const DEFAULT_BASE: f64 = 10_000.0;
pub const LEARNABLE_INIT_STD: f64 = 0.02;

/// Patch-grid coordinate; `x` is the column and `y` the row. Real-valued so
/// interpolated positions can be represented.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Coord2D {
    pub x: f64,
    pub y: f64,
}

impl Coord2D {
    pub fn new(x: f64, y: f64) -> Self {
        Coord2D { x, y }
    }

    /// Coordinate of raster index `i` on a grid `grid_w` patches wide.
    pub fn from_raster(i: usize, grid_w: usize) -> Self {
        Coord2D {
            x: (i % grid_w) as f64,
            y: (i / grid_w) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosEncoding {
    Nope,
    Absolute,
    Learnable,
    Rope1d,
    Rope2d,
}

impl PosEncoding {
    pub const ALL: [PosEncoding; 5] = [
        PosEncoding::Nope,
        PosEncoding::Absolute,
        PosEncoding::Learnable,
        PosEncoding::Rope1d,
        PosEncoding::Rope2d,
    ];

    pub fn is_rope(self) -> bool {
        matches!(self, PosEncoding::Rope1d | PosEncoding::Rope2d)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosEncoding::Nope => "nope",
            PosEncoding::Absolute => "absolute",
            PosEncoding::Learnable => "learnable",
            PosEncoding::Rope1d => "rope1d",
            PosEncoding::Rope2d => "rope2d",
        }
    }
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosEncoding::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown positional encoding `{s}`")))
    }
}

/// Fixed rotary frequencies, one list per coordinate axis.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBank {
    axes: Vec<Vec<f64>>,
}

impl FrequencyBank {
    /// Bank for `axes` coordinate axes sharing `dim` channels equally.
    pub fn new(dim: usize, axes: usize, base: f64) -> Result<Self> {
        if axes == 0 || dim == 0 || dim % (2 * axes) != 0 {
            return Err(Error::invalid(format!(
                "rotary width {dim} must be a positive multiple of {}",
                2 * axes.max(1)
            )));
        }
        if !(base > 1.0) {
            return Err(Error::invalid(format!("rotary base must exceed 1, got {base}")));
        }
        let d_axis = dim / axes;
        let thetas: Vec<f64> = (0..d_axis / 2)
            .map(|i| base.powf(-2.0 * i as f64 / d_axis as f64))
            .collect();
        Ok(FrequencyBank {
            axes: vec![thetas; axes],
        })
    }

    pub fn new_1d(dim: usize, base: f64) -> Result<Self> {
        Self::new(dim, 1, base)
    }

    pub fn new_2d(dim: usize, base: f64) -> Result<Self> {
        Self::new(dim, 2, base)
    }

    /// Bank with explicit per-axis frequencies.
    pub fn from_thetas(axes: Vec<Vec<f64>>) -> Result<Self> {
        let n = axes.first().map(Vec::len).unwrap_or(0);
        if n == 0 || axes.iter().any(|a| a.len() != n) {
            return Err(Error::invalid("every axis needs the same nonzero number of frequencies"));
        }
        Ok(FrequencyBank { axes })
    }

    pub fn axes(&self) -> usize {
        self.axes.len()
    }

    pub fn thetas(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    /// Channel pairs covered by the bank.
    pub fn pairs(&self) -> usize {
        self.axes.iter().map(Vec::len).sum()
    }

    pub fn dim(&self) -> usize {
        2 * self.pairs()
    }

    /// Rotation table for rows whose coordinates are `coords[r]` (one value per axis).
    pub fn table(&self, coords: &[Vec<f64>]) -> Result<RotationTable> {
        let mut angles = Vec::with_capacity(coords.len() * self.pairs());
        for c in coords {
            if c.len() != self.axes.len() {
                return Err(Error::invalid(format!(
                    "{}-axis coordinate for a {}-axis bank",
                    c.len(),
                    self.axes.len()
                )));
            }
            for (m, thetas) in c.iter().zip(&self.axes) {
                angles.extend(thetas.iter().map(|t| m * t));
            }
        }
        RotationTable::from_angles(coords.len(), self.pairs(), &angles)
    }

    pub fn table_1d(&self, positions: &[f64]) -> Result<RotationTable> {
        let coords: Vec<Vec<f64>> = positions.iter().map(|&m| vec![m]).collect();
        self.table(&coords)
    }

    pub fn table_2d(&self, coords: &[Coord2D]) -> Result<RotationTable> {
        let coords: Vec<Vec<f64>> = coords.iter().map(|c| vec![c.x, c.y]).collect();
        self.table(&coords)
    }
}

fn rotate_rows(z: &Tensor, table: &RotationTable) -> Result<Tensor> {
    let mut out = z.clone();
    table.apply(out.data_mut(), 1, false);
    Ok(out)
}

fn check_rows(z: &Tensor, n: usize, bank: &FrequencyBank) -> Result<()> {
    if z.rank() != 2 || z.shape()[0] != n {
        return Err(Error::shape(format!("{n} positions for input {:?}", z.shape())));
    }
    if z.shape()[1] != bank.dim() {
        return Err(Error::shape(format!(
            "input width {} vs rotary width {}",
            z.shape()[1],
            bank.dim()
        )));
    }
    Ok(())
}

/// Rotates channel pairs `(2i, 2i+1)` of row `t` by `positions[t] * theta_i`.
pub fn rope_rotate_1d(z: &Tensor, positions: &[f64], bank: &FrequencyBank) -> Result<Tensor> {
    if z.rank() == 2 && z.shape()[1] % 2 != 0 {
        return Err(Error::invalid(format!("1D rotary width {} is odd", z.shape()[1])));
    }
    if bank.axes() != 1 {
        return Err(Error::invalid("1D rotation needs a single-axis bank"));
    }
    check_rows(z, positions.len(), bank)?;
    rotate_rows(z, &bank.table_1d(positions)?)
}

/// First half of the channel pairs rotated by `x * theta_x`, second half by `y * theta_y`.
pub fn rope_rotate_2d(z: &Tensor, coords: &[Coord2D], bank: &FrequencyBank) -> Result<Tensor> {
    if z.rank() == 2 && z.shape()[1] % 4 != 0 {
        return Err(Error::invalid(format!(
            "2D rotary width {} is not divisible by 4",
            z.shape()[1]
        )));
    }
    if bank.axes() != 2 {
        return Err(Error::invalid("2D rotation needs a two-axis bank"));
    }
    check_rows(z, coords.len(), bank)?;
    rotate_rows(z, &bank.table_2d(coords)?)
}

/// 2D sin/cos encoding of one coordinate. Each axis gets `d/2` channels laid
/// out as `[sin(m w_0..), cos(m w_0..)]` with `w_i = base^(-i / (d/4))`; the x
/// half comes first.
pub fn sincos_at(c: Coord2D, d: usize) -> Vec<f64> {
    let quarter = d / 4;
    let mut out = Vec::with_capacity(d);
    for m in [c.x, c.y] {
        let omega = (0..quarter).map(|i| DEFAULT_BASE.powf(-(i as f64) / quarter as f64));
        out.extend(omega.clone().map(|w| (m * w).sin()));
        out.extend(omega.map(|w| (m * w).cos()));
    }
    out
}

/// Fixed 2D sin/cos table, one row per raster position (see [`sincos_at`]).
pub fn absolute_sincos_2d(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::invalid(format!("sin/cos width {d} is not divisible by 4")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let data = (0..grid_h * grid_w)
        .flat_map(|i| sincos_at(Coord2D::from_raster(i, grid_w), d))
        .collect();
    Tensor::new(vec![grid_h * grid_w, d], data)
}

/// Rescales coordinates given on `to_grid` so they span the same range as `from_grid`.
pub fn interpolate_positions(
    coords: &[Coord2D],
    from_grid: (usize, usize),
    to_grid: (usize, usize),
) -> Result<Vec<Coord2D>> {
    if from_grid.0 == 0 || from_grid.1 == 0 || to_grid.0 == 0 || to_grid.1 == 0 {
        return Err(Error::invalid(format!("degenerate grid {from_grid:?} -> {to_grid:?}")));
    }
    let sy = from_grid.0 as f64 / to_grid.0 as f64;
    let sx = from_grid.1 as f64 / to_grid.1 as f64;
    Ok(coords
        .iter()
        .map(|c| Coord2D::new(c.x * sx, c.y * sy))
        .collect())
}

/// Gaussian-initialized position table (`σ = 0.02`), one row per raster position.
pub fn learnable_table(grid_h: usize, grid_w: usize, d: usize, rng: &mut Rng) -> Tensor {
    rng.gaussian_tensor(&[grid_h * grid_w, d])
        .scale(LEARNABLE_INIT_STD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn zero_position_is_identity() {
        let z = Rng::seed_from_u64(0).gaussian_tensor(&[3, 8]);
        let bank = FrequencyBank::new_1d(8, DEFAULT_BASE).unwrap();
        assert_eq!(rope_rotate_1d(&z, &[0.0; 3], &bank).unwrap(), z);
        let bank2 = FrequencyBank::new_2d(8, DEFAULT_BASE).unwrap();
        assert_eq!(rope_rotate_2d(&z, &[Coord2D::default(); 3], &bank2).unwrap(), z);
    }

    #[test]
    fn quarter_turn() {
        let bank = FrequencyBank::from_thetas(vec![vec![FRAC_PI_2]]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let r = rope_rotate_1d(&z, &[1.0], &bank).unwrap();
        assert!(r.data()[0].abs() < 1e-15);
        assert!((r.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_turn_on_x_axis_negates_x_pair_only() {
        let bank = FrequencyBank::from_thetas(vec![vec![PI], vec![0.3]]).unwrap();
        let z = Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let r = rope_rotate_2d(&z, &[Coord2D::new(1.0, 0.0)], &bank).unwrap();
        assert!((r.data()[0] + 0.5).abs() < 1e-15);
        assert!((r.data()[1] - 1.5).abs() < 1e-15);
        assert_eq!(&r.data()[2..], &[2.0, 3.0]);
    }

    #[test]
    fn width_errors() {
        let z = Tensor::zeros(&[1, 6]);
        let bank = FrequencyBank::new_1d(6, DEFAULT_BASE).unwrap();
        assert!(rope_rotate_2d(&z, &[Coord2D::default()], &bank).is_err());
        assert!(FrequencyBank::new_2d(6, DEFAULT_BASE).is_err());
        assert!(FrequencyBank::new_1d(5, DEFAULT_BASE).is_err());
        assert!(rope_rotate_1d(&Tensor::zeros(&[1, 5]), &[0.0], &bank).is_err());
        assert!(absolute_sincos_2d(2, 2, 6).is_err());
    }

    #[test]
    fn frequencies_are_geometric_and_decreasing() {
        let bank = FrequencyBank::new_2d(16, DEFAULT_BASE).unwrap();
        let t = bank.thetas(0);
        assert_eq!(t.len(), 4);
        assert_eq!(bank.thetas(1), t);
        assert_eq!(t[0], 1.0);
        for i in 0..t.len() {
            let expect = DEFAULT_BASE.powf(-2.0 * i as f64 / 8.0);
            assert!((t[i] - expect).abs() < 1e-15);
        }
        assert!(t.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn sincos_origin_and_halves() {
        let table = absolute_sincos_2d(3, 4, 8).unwrap();
        assert_eq!(table.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // (x=2, y=0) vs (x=2, y=1): x half identical.
        let (a, b) = (table.row(2), table.row(4 + 2));
        assert_eq!(&a[..4], &b[..4]);
        assert_ne!(&a[4..], &b[4..]);
        assert_eq!(table, absolute_sincos_2d(3, 4, 8).unwrap());
    }

    #[test]
    fn interpolation() {
        let c = vec![Coord2D::new(14.0, 14.0), Coord2D::new(3.0, 0.0)];
        assert_eq!(interpolate_positions(&c, (5, 5), (5, 5)).unwrap(), c);
        let r = interpolate_positions(&c, (14, 14), (28, 28)).unwrap();
        assert_eq!(r[0], Coord2D::new(7.0, 7.0));
        // The largest angle on the finer grid equals that of the coarser one.
        let max_fine = interpolate_positions(&[Coord2D::new(27.0, 27.0)], (14, 14), (28, 28))
            .unwrap()[0];
        assert!((max_fine.x - 13.5).abs() < 1e-15);
        let r1 = interpolate_positions(&c, (1, 4), (1, 8)).unwrap();
        assert_eq!(r1[0], Coord2D::new(7.0, 14.0));
        assert!(interpolate_positions(&c, (0, 4), (1, 8)).is_err());
    }

    #[test]
    fn learnable_init_scale() {
        let t = learnable_table(16, 16, 64, &mut Rng::seed_from_u64(3));
        let n = t.len() as f64;
        let rms = (t.data().iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        // rms^2 * n / sigma^2 ~ chi^2_n: relative std of rms is about 1/sqrt(2n).
        assert!((rms - LEARNABLE_INIT_STD).abs() < 5.0 * LEARNABLE_INIT_STD / (2.0 * n).sqrt());
    }

    #[test]
    fn encoding_names_roundtrip() {
        for p in PosEncoding::ALL {
            assert_eq!(p.to_string().parse::<PosEncoding>().unwrap(), p);
        }
        assert!("rope3d".parse::<PosEncoding>().is_err());
    }
}
