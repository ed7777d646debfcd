//! Noise schedule and the closed-form diffusion algebra.
//!
//! Timesteps are 0-based over `[0, T)`. The latent space is the image space
//! itself, so every operation here works on `[C, H, W]` tensors directly.

use crate::error::{ensure_arg, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A latent code (identical to an image at this scale), shaped `[C, H, W]`.
pub type Latent<T = f64> = Tensor<T>;

/// Below this cumulative signal level the clean-image estimate is refused.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 200;

/// Linear beta endpoints for a `steps`-step process: `(1e-4, 0.02)` rescaled
/// by `1000 / steps`, so shorter processes still end near pure noise.
pub fn scaled_betas(steps: usize) -> (f64, f64) {
    let s = 1000.0 / steps.max(1) as f64;
    (1e-4 * s, (0.02 * s).min(0.999))
}

/// The linear schedule with [`scaled_betas`] endpoints.
pub fn default_schedule(steps: usize) -> Result<NoiseSchedule> {
    let (lo, hi) = scaled_betas(steps);
    make_schedule(steps, lo, hi)
}

/// Precomputed per-step coefficients of a discrete diffusion process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Builds a linear schedule: `betas` interpolate `beta_min -> beta_max` over
/// `steps` entries and `alpha_bars` are their cumulative products.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("step count must be at least 1".into()));
    }
    if !beta_min.is_finite() || !beta_max.is_finite() {
        return Err(Error::Schedule("betas must be finite".into()));
    }
    if !(0.0 <= beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 <= beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar` of the previous step, with the convention `alpha_bar(-1) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure_arg!(t < self.steps(), "timestep {t} outside [0, {})", self.steps());
        Ok(())
    }

    /// `(sqrt(ab), sqrt(1 - ab))` at step `t`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(c_x0, c_zt, variance)` of the ancestral posterior
    /// `q(z_{t-1} | z_t, x0)`. At `t = 0` the variance is zero and the mean is `x0`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bar_prev(t);
        let beta = self.betas[t];
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            // beta == 0 all the way: the process never moved.
            return (1.0, 0.0, 0.0);
        }
        let c_x0 = ab_prev.sqrt() * beta / denom;
        let c_zt = self.alphas[t].sqrt() * (1.0 - ab_prev) / denom;
        let var = if t == 0 { 0.0 } else { beta * (1.0 - ab_prev) / denom };
        (c_x0, c_zt, var)
    }
}

/// Forward diffusion: `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn diffuse<T: Real>(z0: &Latent<T>, t: usize, eps: &Latent<T>, sched: &NoiseSchedule) -> Result<Latent<T>> {
    sched.check_t(t)?;
    let (s, n) = sched.signal_noise(t);
    let (s, n) = (T::of(s), T::of(n));
    z0.zip_map(eps, |z, e| s * z + n * e)
}

/// Clean-image estimate: `(z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn derive_x0<T: Real>(zt: &Latent<T>, eps_hat: &Latent<T>, t: usize, sched: &NoiseSchedule) -> Result<Latent<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab < MIN_ALPHA_BAR {
        return Err(Error::Numeric(format!(
            "alpha_bar[{t}] = {ab:e} is too small to invert; use the noise-difference image"
        )));
    }
    let (s, n) = sched.signal_noise(t);
    let (s, n) = (T::of(s), T::of(n));
    zt.zip_map(eps_hat, |z, e| (z - n * e) / s)
}

/// Noise-difference image: `z_t - sqrt(1 - ab_t) eps_hat`, i.e. the clean
/// estimate scaled by `sqrt(ab_t)` without ever dividing by it.
pub fn noise_diff_latent<T: Real>(
    zt: &Latent<T>,
    eps_hat: &Latent<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent<T>> {
    sched.check_t(t)?;
    let n = T::of(sched.signal_noise(t).1);
    zt.zip_map(eps_hat, |z, e| z - n * e)
}
