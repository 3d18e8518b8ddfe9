use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// How an encoder output `[SOS, x_0 .. x_{T-1}]` becomes one feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Readout {
    /// Mean over the patch rows (SOS excluded).
    MeanPool,
    /// The last row.
    LastToken,
}

impl Readout {
    pub fn as_str(self) -> &'static str {
        match self {
            Readout::MeanPool => "mean",
            Readout::LastToken => "last",
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::MeanPool),
            "last" => Ok(Readout::LastToken),
            _ => Err(Error::invalid(format!("unknown readout `{s}`"))),
        }
    }
}

fn check_rows(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, d] if *n >= 2 => Ok((*n, *d)),
        _ => Err(Error::shape(format!(
            "readout needs [SOS + patches, d] with at least one patch, got {shape:?}"
        ))),
    }
}

/// Feature vector `[d]` of hidden states `h: [T+1, d]`.
pub fn readout(h: &Tensor, mode: Readout) -> Result<Tensor> {
    let (n, d) = check_rows(h.shape())?;
    let data = match mode {
        Readout::LastToken => h.row(n - 1).to_vec(),
        Readout::MeanPool => {
            let mut acc = vec![0.0; d];
            for r in 1..n {
                for (a, v) in acc.iter_mut().zip(h.row(r)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / (n - 1) as f64).collect()
        }
    };
    Tensor::new(vec![d], data)
}

/// Differentiable [`readout`]; returns `[1, d]`.
pub fn readout_var(g: &mut Graph, h: Var, mode: Readout) -> Result<Var> {
    let (n, _) = check_rows(g.shape(h))?;
    match mode {
        Readout::LastToken => g.slice_rows(h, n - 1, 1),
        Readout::MeanPool => {
            let mut w = vec![1.0 / (n - 1) as f64; n];
            w[0] = 0.0;
            let w = g.constant(Tensor::new(vec![1, n], w)?);
            g.matmul(w, h)
        }
    }
}

/// Affine classifier on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `[d, classes]`
    pub w: Tensor,
    /// `[classes]`
    pub b: Tensor,
}

impl LinearHead {
    /// Zero-initialized head.
    pub fn new(dim: usize, classes: usize) -> Self {
        LinearHead {
            w: Tensor::zeros(&[dim, classes]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    /// Logits `[n, classes]` for features `[n, d]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = classifier_logits(&mut g, x, w, b)?;
        Ok(g.value(y).clone())
    }

    /// Arg-max class of each feature row.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len())
                    .fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

pub fn classifier_logits(g: &mut Graph, features: Var, w: Var, b: Var) -> Result<Var> {
    g.affine(features, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readouts() {
        let h = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(readout(&h, Readout::MeanPool).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(readout(&h, Readout::LastToken).unwrap().data(), &[3.0, 6.0]);
        let mut g = Graph::new();
        let v = g.constant(h.clone());
        for mode in [Readout::MeanPool, Readout::LastToken] {
            let r = readout_var(&mut g, v, mode).unwrap();
            assert_eq!(g.value(r).data(), readout(&h, mode).unwrap().data());
        }
        assert!(readout(&Tensor::zeros(&[1, 2]), Readout::MeanPool).is_err());
        assert_eq!("last".parse::<Readout>().unwrap(), Readout::LastToken);
    }

    #[test]
    fn head_predicts_argmax() {
        let mut head = LinearHead::new(2, 3);
        head.w = Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![-2.0, 0.0]]).unwrap();
        assert_eq!(head.predict(&x).unwrap(), vec![0, 1, 2]);
    }
}
