//! Patch diffusion: Beta noise schedules, forward corruption, posterior
//! moments under target and noise parameterizations, the simplified loss,
//! the variational bound and the ancestral sampler.
//!
//! `gamma` is the cumulative signal level: `x_s = sqrt(gamma) x_0 + sqrt(1 - gamma) eps`.

use statrs::function::beta::{beta_reg, inv_beta_reg};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Training draws of gamma at 1 are pulled back to this value.
pub const GAMMA_MAX: f64 = 1.0 - 1e-6;
/// Lower clamp on the reverse-process variance.
pub const MIN_VARIANCE: f64 = 1e-12;
/// A final grid level above this leaves a visible prior mismatch in the bound.
pub const PRIOR_GAMMA_WARN: f64 = 1e-3;
/// Lowest signal level used when a noise-predicting model is sampled.
pub const NOISE_GAMMA_FLOOR: f64 = 1e-6;

/// What a denoiser outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Prediction {
    Target,
    Noise,
}

impl Prediction {
    pub fn as_str(self) -> &'static str {
        match self {
            Prediction::Target => "target",
            Prediction::Noise => "noise",
        }
    }
}

impl std::str::FromStr for Prediction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Prediction::Target),
            "noise" => Ok(Prediction::Noise),
            _ => Err(Error::invalid(format!("unknown prediction `{s}`"))),
        }
    }
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A conditional patch denoiser; any conditioning is captured by the implementor.
pub trait Denoiser {
    /// Prediction of the clean patch (or of the noise, see [`Denoiser::prediction`]) from `x_s`.
    fn denoise(&self, x_s: &Tensor, gamma: f64) -> Result<Tensor>;

    fn prediction(&self) -> Prediction {
        Prediction::Target
    }
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn denoise(&self, x_s: &Tensor, gamma: f64) -> Result<Tensor> {
        self(x_s, gamma)
    }
}

/// Beta(a, b) distribution of training gamma plus the sampling step count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub a: f64,
    pub b: f64,
    pub sample_steps: usize,
}

impl NoiseSchedule {
    pub fn new(a: f64, b: f64, sample_steps: usize) -> Result<Self> {
        if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("Beta parameters must be positive, got a={a}, b={b}")));
        }
        if sample_steps == 0 {
            return Err(Error::invalid("sample_steps must be at least 1"));
        }
        Ok(NoiseSchedule { a, b, sample_steps })
    }

    pub fn uniform(sample_steps: usize) -> Self {
        NoiseSchedule {
            a: 1.0,
            b: 1.0,
            sample_steps,
        }
    }

    pub fn with_steps(self, sample_steps: usize) -> Result<Self> {
        Self::new(self.a, self.b, sample_steps)
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    /// `(a - 1) / (a + b - 2)`, meaningful when both parameters exceed 1.
    pub fn mode(&self) -> f64 {
        (self.a - 1.0) / (self.a + self.b - 2.0)
    }

    /// `gamma_0 = 1 > gamma_1 > ... > gamma_S = 0`, with `gamma_s` the Beta(a, b)
    /// quantile at `1 - s/S`; for Beta(1, 1) this is exactly `1 - s/S`.
    ///
    /// Levels are capped at [`GAMMA_MAX`]. Where quantiles of extreme
    /// schedules collide in `f64`, each level is pushed a relative `1e-9`
    /// below its predecessor.
    pub fn gamma_grid(&self) -> Result<Vec<f64>> {
        let steps = self.sample_steps;
        let mut grid = Vec::with_capacity(steps + 1);
        grid.push(1.0);
        for s in 1..=steps {
            let p = 1.0 - s as f64 / steps as f64;
            let g = if s == steps {
                0.0
            } else if self.a == 1.0 && self.b == 1.0 {
                p
            } else {
                let prev = grid[s - 1];
                beta_quantile(self.a, self.b, p)
                    .min(GAMMA_MAX)
                    .min(prev * (1.0 - 1e-9))
            };
            grid.push(g);
        }
        if let Some(w) = grid.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(Error::invalid(format!(
                "Beta({}, {}) grid with {steps} steps is not strictly decreasing at step {}",
                self.a,
                self.b,
                w + 1
            )));
        }
        Ok(grid)
    }
}

/// Beta(a, b) quantile. `inv_beta_reg` loses accuracy deep in the tails
/// (quantiles below about 1e-16), so its answer is checked against
/// `beta_reg` and replaced by bisection on the logit when it is off.
pub fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let x = inv_beta_reg(a, b, p).clamp(0.0, 1.0);
    if x > 0.0 && x < 1.0 && (beta_reg(a, b, x) - p).abs() <= 1e-12 * p.max(1e-3) {
        return x;
    }
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    let (mut lo, mut hi) = (-745.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, sigmoid(mid)) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sigmoid(0.5 * (lo + hi))
}

/// One reverse transition from `gamma_prev` down to `gamma_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionStep {
    pub gamma_s: f64,
    pub gamma_prev: f64,
    pub alpha: f64,
}

impl DiffusionStep {
    pub fn new(gamma_prev: f64, gamma_s: f64) -> Result<Self> {
        if !(0.0 <= gamma_s && gamma_s <= gamma_prev && gamma_prev <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= gamma_s <= gamma_prev <= 1, got gamma_prev={gamma_prev}, gamma_s={gamma_s}"
            )));
        }
        let alpha = if gamma_prev == 0.0 { 1.0 } else { gamma_s / gamma_prev };
        Ok(DiffusionStep {
            gamma_s,
            gamma_prev,
            alpha,
        })
    }

    fn require_noise(&self) -> Result<()> {
        if self.gamma_s >= 1.0 {
            return Err(Error::invalid("gamma_s = 1: the step has no noise to remove"));
        }
        Ok(())
    }
}

/// Draws gamma ~ Beta(a, b) as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
///
/// Both variates are handled in log space; shapes below one use
/// `Gamma(k) = Gamma(k + 1) * U^(1/k)` so tiny shapes do not underflow.
pub fn sample_gamma(schedule: &NoiseSchedule, rng: &mut Rng) -> f64 {
    let lx = log_gamma_variate(schedule.a, rng);
    let ly = log_gamma_variate(schedule.b, rng);
    let g = 1.0 / (1.0 + (ly - lx).exp());
    g.clamp(0.0, 1.0)
}

fn log_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    if shape >= 1.0 {
        rng.gamma(shape).ln()
    } else {
        rng.gamma(shape + 1.0).ln() + rng.uniform_open().ln() / shape
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `sqrt(gamma) x0 + sqrt(1 - gamma) eps`.
pub fn forward_diffuse(x0: &Tensor, gamma: f64, eps: &Tensor) -> Result<Tensor> {
    check_gamma(gamma)?;
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Posterior mean of `x_{s-1}` given `x_s` and a clean-patch estimate.
pub fn posterior_mean_from_target(x_s: &Tensor, x0_hat: &Tensor, step: &DiffusionStep) -> Result<Tensor> {
    step.require_noise()?;
    let denom = 1.0 - step.gamma_s;
    let c_s = step.alpha.sqrt() * (1.0 - step.gamma_prev) / denom;
    let c_0 = step.gamma_prev.sqrt() * (1.0 - step.alpha) / denom;
    x_s.zip_map(x0_hat, |x, x0| c_s * x + c_0 * x0)
}

/// Posterior mean of `x_{s-1}` given `x_s` and a noise estimate.
pub fn posterior_mean_from_noise(x_s: &Tensor, eps_hat: &Tensor, step: &DiffusionStep) -> Result<Tensor> {
    step.require_noise()?;
    if step.alpha <= 0.0 {
        return Err(Error::invalid("alpha = 0: the noise parameterization is undefined"));
    }
    let c_s = 1.0 / step.alpha.sqrt();
    let c_e = (1.0 - step.alpha) / (step.alpha * (1.0 - step.gamma_s)).sqrt();
    x_s.zip_map(eps_hat, |x, e| c_s * x - c_e * e)
}

/// `(1 - alpha)(1 - gamma_prev) / (1 - gamma_s)`.
pub fn posterior_variance(step: &DiffusionStep) -> Result<f64> {
    step.require_noise()?;
    Ok((1.0 - step.alpha) * (1.0 - step.gamma_prev) / (1.0 - step.gamma_s))
}

/// Fixed reverse-process variance: the posterior variance clamped below.
pub fn reverse_variance(step: &DiffusionStep) -> Result<f64> {
    Ok(posterior_variance(step)?.max(MIN_VARIANCE))
}

/// Mean squared error over coordinates.
pub fn simplified_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    Ok(x0.zip_map(x0_hat, |a, b| (a - b).powi(2))?.mean())
}

/// Reverse mean of the model for `step`, using whichever parameterization the denoiser has.
pub fn model_mean(denoiser: &dyn Denoiser, x_s: &Tensor, step: &DiffusionStep) -> Result<Tensor> {
    let pred = denoiser.denoise(x_s, step.gamma_s)?;
    if pred.shape() != x_s.shape() {
        return Err(Error::shape(format!(
            "denoiser returned {:?} for input {:?}",
            pred.shape(),
            x_s.shape()
        )));
    }
    match denoiser.prediction() {
        Prediction::Target => posterior_mean_from_target(x_s, &pred, step),
        Prediction::Noise => posterior_mean_from_noise(x_s, &pred, step),
    }
}

/// `KL[N(mu_q, var) || N(mu_p, var)]` summed over coordinates.
pub fn gaussian_kl_matched(mu_q: &Tensor, mu_p: &Tensor, var: f64) -> Result<f64> {
    Ok(mu_q.zip_map(mu_p, |a, b| (a - b).powi(2))?.sum() / (2.0 * var))
}

/// `KL[N(mu_q, var_q) || N(mu_p, var_p)]` for one coordinate.
pub fn gaussian_kl(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
    0.5 * ((var_p / var_q).ln() + (var_q + (mu_q - mu_p).powi(2)) / var_p - 1.0)
}

/// Terms of the variational bound for one patch, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    /// `E[log p(x0 | x1)]`.
    pub reconstruction: f64,
    /// `E[KL[q(x_{s-1} | x_s, x0) || p(x_{s-1} | x_s)]]` for `s = 2..=S`.
    pub kl_terms: Vec<f64>,
    /// `KL[q(x_S | x0) || N(0, I)]`.
    pub prior_kl: f64,
    /// `H[q(x_S | x0)] - H[N(0, I)]`, the entropy part of the prior term.
    pub entropy_gap: f64,
    /// `reconstruction - sum(kl_terms) - prior_kl`.
    pub elbo: f64,
    pub warning: Option<String>,
}

/// Reconstruction variance of `p(x0 | x1)`: `(1 - gamma_1) / gamma_1`.
pub fn reconstruction_variance(gamma_1: f64) -> f64 {
    ((1.0 - gamma_1) / gamma_1.max(MIN_VARIANCE)).max(MIN_VARIANCE)
}

/// Monte Carlo estimate of the bound on `log p(x0)` over the schedule's grid,
/// averaging `draws` independent corruptions per term.
pub fn elbo(
    x0: &Tensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    draws: usize,
) -> Result<ElboReport> {
    if draws == 0 {
        return Err(Error::invalid("elbo needs at least one draw"));
    }
    let grid = schedule.gamma_grid()?;
    let steps = schedule.sample_steps;
    let d = x0.len() as f64;
    let n = draws as f64;

    let mut kl_terms = Vec::with_capacity(steps.saturating_sub(1));
    for s in 2..=steps {
        let step = DiffusionStep::new(grid[s - 1], grid[s])?;
        let var = reverse_variance(&step)?;
        let mut acc = 0.0;
        for _ in 0..draws {
            let eps = rng.gaussian_tensor(x0.shape());
            let x_s = forward_diffuse(x0, step.gamma_s, &eps)?;
            let mu_q = posterior_mean_from_target(&x_s, x0, &step)?;
            let mu_p = model_mean(denoiser, &x_s, &step)?;
            acc += gaussian_kl_matched(&mu_q, &mu_p, var)?;
        }
        kl_terms.push(acc / n);
    }

    let step1 = DiffusionStep::new(1.0, grid[1])?;
    let rec_var = reconstruction_variance(step1.gamma_s);
    let mut rec = 0.0;
    for _ in 0..draws {
        let eps = rng.gaussian_tensor(x0.shape());
        let x1 = forward_diffuse(x0, step1.gamma_s, &eps)?;
        let x0_hat = model_mean(denoiser, &x1, &step1)?;
        let sq = x0.zip_map(&x0_hat, |a, b| (a - b).powi(2))?.sum();
        rec += -0.5 * d * (2.0 * std::f64::consts::PI * rec_var).ln() - sq / (2.0 * rec_var);
    }
    let reconstruction = rec / n;

    let g_last = grid[steps];
    let var_q = 1.0 - g_last;
    let prior_kl = if var_q <= 0.0 {
        f64::INFINITY
    } else {
        x0.data()
            .iter()
            .map(|&x| gaussian_kl(g_last.sqrt() * x, var_q, 0.0, 1.0))
            .sum()
    };
    let entropy_gap = 0.5 * d * var_q.ln();
    let warning = (g_last > PRIOR_GAMMA_WARN).then(|| {
        let msg = format!(
            "final grid level gamma={g_last:.3e} exceeds {PRIOR_GAMMA_WARN}: the N(0, I) prior does not match q(x_S | x0) and the bound is loose"
        );
        log::warn!("{msg}");
        msg
    });
    let elbo = reconstruction - kl_terms.iter().sum::<f64>() - prior_kl;
    Ok(ElboReport {
        reconstruction,
        kl_terms,
        prior_kl,
        entropy_gap,
        elbo,
        warning,
    })
}

/// Ancestral sampling of one patch of `shape` from `x_S ~ N(0, I)`; the last
/// step returns the model mean without added noise.
pub fn sample_patch(
    denoiser: &dyn Denoiser,
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut grid = schedule.gamma_grid()?;
    if denoiser.prediction() == Prediction::Noise {
        let last = grid.len() - 1;
        grid[last] = grid[last].max(NOISE_GAMMA_FLOOR.min(grid[last - 1] / 2.0));
    }
    let mut x = rng.gaussian_tensor(shape);
    for s in (1..grid.len()).rev() {
        let step = DiffusionStep::new(grid[s - 1], grid[s])?;
        let mean = model_mean(denoiser, &x, &step)?;
        x = if s > 1 {
            let sd = reverse_variance(&step)?.sqrt();
            let noise = rng.gaussian_tensor(shape);
            mean.zip_map(&noise, |m, e| m + sd * e)?
        } else {
            mean
        };
    }
    Ok(x)
}
