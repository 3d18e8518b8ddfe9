use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the loss on a fresh graph from parameter leaves holding
/// `leaves`. Returns the largest `|analytic - numeric| / max(1, |analytic|)`
/// over every coordinate; zero when there is nothing to check.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("finite difference step {eps} outside (0, 1e-2]")));
    }
    if leaves.is_empty() {
        return Ok(0.0);
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let analytic = g.grad(loss, &vars)?;

    let mut work = leaves.to_vec();
    let mut worst: f64 = 0.0;
    for (li, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[li].data()[i];
            work[li].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[li].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[li].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_step() {
        let f = |g: &mut Graph, p: &[Var]| Ok(g.sum(p[0]));
        let leaves = [Tensor::ones(&[2])];
        assert!(finite_diff_check(f, &leaves, 0.0).is_err());
        assert!(finite_diff_check(f, &leaves, 0.1).is_err());
        assert_eq!(finite_diff_check(f, &[], 1e-4).unwrap(), 0.0);
    }
}
