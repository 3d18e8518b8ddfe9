use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OrderingKind {
    Raster,
    NestedRaster,
    RoundRobin,
    Random,
}

/// Ordering kind plus the block size (in patches) used by the block orderings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OrderingStrategy {
    pub kind: OrderingKind,
    pub block: (usize, usize),
}

impl OrderingStrategy {
    pub fn raster() -> Self {
        OrderingStrategy {
            kind: OrderingKind::Raster,
            block: (1, 1),
        }
    }

    pub fn random() -> Self {
        OrderingStrategy {
            kind: OrderingKind::Random,
            block: (1, 1),
        }
    }

    pub fn nested(bh: usize, bw: usize) -> Self {
        OrderingStrategy {
            kind: OrderingKind::NestedRaster,
            block: (bh, bw),
        }
    }

    pub fn round_robin(bh: usize, bw: usize) -> Self {
        OrderingStrategy {
            kind: OrderingKind::RoundRobin,
            block: (bh, bw),
        }
    }
}

/// `raster`, `random`, `nested_raster:B`, `nested_raster:BHxBW`, and the same for `round_robin`.
impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (bh, bw) = self.block;
        let name = match self.kind {
            OrderingKind::Raster => return f.write_str("raster"),
            OrderingKind::Random => return f.write_str("random"),
            OrderingKind::NestedRaster => "nested_raster",
            OrderingKind::RoundRobin => "round_robin",
        };
        if bh == bw {
            write!(f, "{name}:{bh}")
        } else {
            write!(f, "{name}:{bh}x{bw}")
        }
    }
}

impl FromStr for OrderingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown ordering `{s}`"));
        let (name, block) = match s.split_once(':') {
            Some((n, b)) => (n, Some(b)),
            None => (s, None),
        };
        let block = match block {
            None => None,
            Some(b) => {
                let parse = |v: &str| v.parse::<usize>().ok().filter(|&x| x > 0);
                Some(match b.split_once('x') {
                    Some((h, w)) => (parse(h).ok_or_else(bad)?, parse(w).ok_or_else(bad)?),
                    None => {
                        let v = parse(b).ok_or_else(bad)?;
                        (v, v)
                    }
                })
            }
        };
        match (name, block) {
            ("raster", None) => Ok(Self::raster()),
            ("random", None) => Ok(Self::random()),
            ("nested_raster", Some((h, w))) => Ok(Self::nested(h, w)),
            ("round_robin", Some((h, w))) => Ok(Self::round_robin(h, w)),
            _ => Err(bad()),
        }
    }
}

/// Permutation mapping sequence position to raster index on a `(rows, cols)` grid.
pub fn ordering_permutation(
    grid: (usize, usize),
    strategy: OrderingStrategy,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::invalid("empty patch grid"));
    }
    let n = gh * gw;
    match strategy.kind {
        OrderingKind::Raster => Ok((0..n).collect()),
        OrderingKind::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            Ok(perm)
        }
        kind => {
            let (bh, bw) = strategy.block;
            if bh == 0 || bw == 0 || gh % bh != 0 || gw % bw != 0 {
                return Err(Error::invalid(format!(
                    "grid {gh}x{gw} is not divisible into {bh}x{bw} blocks"
                )));
            }
            let blocks: Vec<(usize, usize)> = (0..gh / bh)
                .flat_map(|by| (0..gw / bw).map(move |bx| (by, bx)))
                .collect();
            let index = |(by, bx): (usize, usize), k: usize| {
                (by * bh + k / bw) * gw + bx * bw + k % bw
            };
            let mut perm = Vec::with_capacity(n);
            if kind == OrderingKind::NestedRaster {
                for &b in &blocks {
                    perm.extend((0..bh * bw).map(|k| index(b, k)));
                }
            } else {
                for k in 0..bh * bw {
                    perm.extend(blocks.iter().map(|&b| index(b, k)));
                }
            }
            Ok(perm)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perm(grid: (usize, usize), s: OrderingStrategy) -> Vec<usize> {
        ordering_permutation(grid, s, &mut Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn block_orderings_on_4x4() {
        assert_eq!(
            perm((4, 4), OrderingStrategy::nested(2, 2)),
            vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
        assert_eq!(
            perm((4, 4), OrderingStrategy::round_robin(2, 2)),
            vec![0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15]
        );
        assert_eq!(perm((4, 4), OrderingStrategy::nested(4, 4)), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_grid_is_an_error() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(ordering_permutation((4, 6), OrderingStrategy::nested(4, 4), &mut rng).is_err());
        assert!(ordering_permutation((3, 3), OrderingStrategy::round_robin(2, 2), &mut rng).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let a = perm((4, 4), OrderingStrategy::random());
        assert_eq!(a, perm((4, 4), OrderingStrategy::random()));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn names_roundtrip() {
        for s in [
            OrderingStrategy::raster(),
            OrderingStrategy::random(),
            OrderingStrategy::nested(2, 2),
            OrderingStrategy::round_robin(4, 2),
        ] {
            assert_eq!(s.to_string().parse::<OrderingStrategy>().unwrap(), s);
        }
        assert!("nested_raster".parse::<OrderingStrategy>().is_err());
        assert!("round_robin:0".parse::<OrderingStrategy>().is_err());
        assert!("spiral".parse::<OrderingStrategy>().is_err());
    }
}
