//! Linear probes on frozen backbone activations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{readout, LinearHead, Model, Readout};
use crate::patch::{Dataset, ImageRecord};
use crate::tensor::{Graph, Tensor};
use crate::training::{adamw_update, eval_sequence, AdamW};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub readout: Readout,
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            readout: Readout::MeanPool,
            epochs: 300,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    /// Block index, 1-based.
    pub layer: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

pub fn check_layers(model: &Model, layers: &[usize]) -> Result<()> {
    let depth = model.depth();
    if layers.is_empty() {
        return Err(Error::invalid("no probe layers requested"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > depth) {
        return Err(Error::invalid(format!("probe layer {bad} out of range 1..={depth}")));
    }
    Ok(())
}

/// Read-out features `[n, d]` of each requested layer (the residual stream
/// after that block).
pub fn layer_features(
    model: &Model,
    records: &[ImageRecord],
    layers: &[usize],
    mode: Readout,
) -> Result<Vec<Tensor>> {
    check_layers(model, layers)?;
    let per_image: Vec<Result<Vec<Tensor>>> = records
        .par_iter()
        .map(|r| {
            let seq = eval_sequence(r, &model.config)?;
            let mut g = Graph::new();
            let b = model.bind_frozen(&mut g);
            let enc = b.encode(&mut g, &seq, model.config.causal)?;
            layers
                .iter()
                .map(|&l| readout(g.value(enc.layers[l - 1]), mode))
                .collect()
        })
        .collect();
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    (0..layers.len())
        .map(|j| {
            let rows: Vec<Vec<f64>> = per_image.iter().map(|f| f[j].data().to_vec()).collect();
            Tensor::from_rows(&rows)
        })
        .collect()
}

/// Standardizes both sets with the per-dimension mean and std of `train`.
pub fn standardize(train: &Tensor, test: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d) = (train.rows(), train.cols());
    if n == 0 || test.cols() != d {
        return Err(Error::shape(format!("standardize {:?} and {:?}", train.shape(), test.shape())));
    }
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&mean).zip(&var) {
                *v = (*v - m) / (s.sqrt() + 1e-8);
            }
        }
        out
    };
    Ok((apply(train), apply(test)))
}

/// Softmax regression trained full-batch with AdamW.
pub fn fit_linear_head(features: &Tensor, labels: &[usize], classes: usize, opts: &ProbeOptions) -> Result<LinearHead> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} feature rows for {} labels", features.rows(), labels.len())));
    }
    let mut head = LinearHead::new(features.cols(), classes);
    let hyper = AdamW {
        weight_decay: opts.weight_decay,
        ..AdamW::default()
    };
    let mut mw = Tensor::zeros(head.w.shape());
    let mut vw = mw.clone();
    let mut mb = Tensor::zeros(head.b.shape());
    let mut vb = mb.clone();
    for step in 1..=opts.epochs as u64 {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let w = g.param(head.w.clone());
        let b = g.param(head.b.clone());
        let logits = crate::model::classifier_logits(&mut g, x, w, b)?;
        let loss = g.cross_entropy(logits, labels)?;
        let grads = g.grad(loss, &[w, b])?;
        adamw_update(&mut head.w, &grads[0], &mut mw, &mut vw, step, &hyper, opts.lr, true)?;
        adamw_update(&mut head.b, &grads[1], &mut mb, &mut vb, step, &hyper, opts.lr, false)?;
    }
    Ok(head)
}

pub fn accuracy(head: &LinearHead, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = head.predict(features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    ds.records
        .iter()
        .map(|r| r.label.map(|l| l as usize))
        .collect::<Option<Vec<_>>>()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::invalid("linear probing needs a non-empty labeled dataset"))
}

/// Trains a probe on `train` and scores it on `test` at each layer.
pub fn probe(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    layers: &[usize],
    opts: &ProbeOptions,
) -> Result<Vec<ProbeResult>> {
    let (ytr, yte) = (labels_of(train)?, labels_of(test)?);
    let classes = train.num_classes().max(test.num_classes());
    let ftr = layer_features(model, &train.records, layers, opts.readout)?;
    let fte = layer_features(model, &test.records, layers, opts.readout)?;
    layers
        .iter()
        .zip(ftr.iter().zip(&fte))
        .map(|(&layer, (a, b))| {
            let (a, b) = standardize(a, b)?;
            let head = fit_linear_head(&a, &ytr, classes, opts)?;
            Ok(ProbeResult {
                layer,
                train_accuracy: accuracy(&head, &a, &ytr)?,
                accuracy: accuracy(&head, &b, &yte)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Rng;

    #[test]
    fn separable_features_are_learned() {
        let mut rng = Rng::seed_from_u64(0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let mut f = rng.gaussian_tensor(&[4]).scale(0.1).into_data();
            f[c] += 2.0;
            rows.push(f);
            labels.push(c);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let (x, _) = standardize(&x, &x).unwrap();
        let head = fit_linear_head(&x, &labels, 3, &ProbeOptions::default()).unwrap();
        assert_eq!(accuracy(&head, &x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn layer_range_and_labels() {
        let config = ModelConfig {
            image_size: (8, 8),
            depth: 2,
            width: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(config, &mut Rng::seed_from_u64(0)).unwrap();
        assert!(check_layers(&model, &[0]).is_err());
        assert!(check_layers(&model, &[3]).is_err());
        let img = ImageRecord::new(Tensor::full(&[8, 8, 1], 0.5), None).unwrap();
        let ds = Dataset::new(vec![img]);
        assert!(probe(&model, &ds, &ds, &[1], &ProbeOptions::default()).is_err());
        let f = layer_features(&model, &ds.records, &[1, 2], Readout::MeanPool).unwrap();
        assert_eq!(f[0].shape(), &[1, 8]);
    }
}
