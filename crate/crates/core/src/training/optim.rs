use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// Moments for each parameter plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    /// Zero moments shaped like `shapes`.
    pub fn new<'a>(hyper: AdamW, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        OptimState {
            hyper,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_params(hyper: AdamW, params: &ParamStore) -> Self {
        Self::new(hyper, params.entries().iter().map(|e| e.value.shape()))
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    hyper: &AdamW,
    lr: f64,
    decay: bool,
) -> Result<()> {
    if p.shape() != grad.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
        return Err(Error::shape(format!(
            "AdamW parameter {:?}, gradient {:?}, moments {:?}/{:?}",
            p.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let AdamW {
        beta1,
        beta2,
        weight_decay,
        eps,
    } = *hyper;
    let bc1 = 1.0 - beta1.powf(t as f64);
    let bc2 = 1.0 - beta2.powf(t as f64);
    let wd = if decay { weight_decay } else { 0.0 };
    let it = p
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
    for ((p, &g), (m, v)) in it {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
        *p -= lr * (update + wd * *p);
    }
    Ok(())
}

/// AdamW step over every parameter; decay follows each entry's flag.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} is negative")));
    }
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "{n} parameters, {} gradients, {} moment tensors",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    for i in 0..n {
        let id = crate::model::ParamId(i);
        let decay = params.entries()[i].decay;
        let hyper = state.hyper;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        adamw_update(params.get_mut(id), &grads[i], m, v, t, &hyper, lr, decay)?;
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
