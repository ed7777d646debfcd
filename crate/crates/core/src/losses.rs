//! Training objectives: the base denoising loss, the heatmap-weighted loss
//! `L_h`, the two-stage consistency loss `L_DC`, and `L_h + alpha * L_DC`.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::keypoint::{Detector, HeatmapStack};
use crate::nn::Act;
use crate::real::Real;
use crate::schedule::{Latent, NoiseSchedule};
use crate::tensor::Params;
use crate::world::{CANVAS, SLOTS};

/// Loss weights and the stage threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Heatmap weight strength in `W_a = 1 + lambda * H`.
    pub lambda: f64,
    /// Weight of the consistency loss.
    pub alpha: f64,
    /// Timesteps below this use the derived image, the rest the
    /// noise-difference image.
    pub k_stage: usize,
    /// Number of diffusion steps.
    pub steps: usize,
}

impl LossConfig {
    /// Defaults for a `steps`-step process, with `k_stage = floor(0.6 * steps)`.
    pub fn for_steps(steps: usize) -> Self {
        LossConfig {
            lambda: 2.0,
            alpha: DEFAULT_ALPHA,
            k_stage: stage_threshold(steps),
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.k_stage <= self.steps, "k_stage {} exceeds T = {}", self.k_stage, self.steps);
        ensure_arg!(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be finite and >= 0");
        ensure_arg!(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be finite and >= 0");
        Ok(())
    }

    pub fn stage(&self, t: usize) -> Stage {
        if t < self.k_stage {
            Stage::Drv
        } else {
            Stage::Dff
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_steps(crate::schedule::DEFAULT_STEPS)
    }
}

/// Default consistency-loss weight.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// `floor(0.6 * steps)`.
pub fn stage_threshold(steps: usize) -> usize {
    steps * 3 / 5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Supervise heatmaps of the derived clean image.
    Drv,
    /// Supervise heatmaps of the noise-difference image.
    Dff,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_base: f64,
    pub l_h: f64,
    pub l_dc: f64,
    pub l_total: f64,
    pub stage: Stage,
}

impl LossBreakdown {
    /// Checks every term for finiteness, naming the first offender.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (term, v) in [("l_base", self.l_base), ("l_h", self.l_h), ("l_dc", self.l_dc), ("l_total", self.l_total)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step });
            }
        }
        Ok(())
    }
}

thread_local! {
    static DCL_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of consistency-loss evaluations made on this thread.
pub fn dcl_calls() -> u64 {
    DCL_CALLS.with(|c| c.get())
}

fn count_dcl(n: usize) {
    DCL_CALLS.with(|c| c.set(c.get() + n as u64));
}

/// `mean((eps - eps_hat)^2)`.
pub fn base_denoising_loss<T: Real>(eps: &Latent<T>, eps_hat: &Latent<T>) -> Result<f64> {
    eps.check_same_shape(eps_hat)?;
    Ok(mean_sq(eps.data().iter().zip(eps_hat.data()).map(|(&a, &b)| (a - b).f64())))
}

fn mean_sq(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.map(|r| r * r).sum::<f64>() / n as f64
}

/// `mean((W_a * (eps - eps_hat))^2)` with `W_a = 1 + lambda * max_k H_k`.
pub fn weighted_sd_loss<T: Real>(
    eps: &Latent<T>,
    eps_hat: &Latent<T>,
    gt_heatmap: &HeatmapStack<T>,
    config: &LossConfig,
) -> Result<f64> {
    eps.check_same_shape(eps_hat)?;
    let h = gt_heatmap.collapse_max();
    h.check_same_shape(eps)?;
    let lambda = config.lambda;
    Ok(mean_sq(
        eps.data()
            .iter()
            .zip(eps_hat.data())
            .zip(h.data())
            .map(|((&a, &b), &w)| (1.0 + lambda * w.f64()) * (a - b).f64()),
    ))
}

/// The stage-selected L1 mean: `|h_inp - h_drv|` when `t < k_stage`,
/// otherwise `|h_inp - h_dff|`. The other stack is never read.
pub fn dcl_loss<T: Real>(
    t: usize,
    config: &LossConfig,
    h_inp: &HeatmapStack<T>,
    h_drv: &HeatmapStack<T>,
    h_dff: &HeatmapStack<T>,
) -> Result<(f64, Stage)> {
    ensure_arg!(t < config.steps, "timestep {t} out of range for T = {}", config.steps);
    let stage = config.stage(t);
    let other = match stage {
        Stage::Drv => h_drv,
        Stage::Dff => h_dff,
    };
    h_inp.maps.check_same_shape(&other.maps)?;
    count_dcl(1);
    Ok((l1_mean(h_inp.maps.data(), other.maps.data()), stage))
}

fn l1_mean<T: Real>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs().f64()).sum::<f64>() / a.len() as f64
}

/// `l_h + alpha * l_dc`.
pub fn total_loss(l_h: f64, l_dc: f64, config: &LossConfig) -> Result<f64> {
    for (term, v) in [("l_h", l_h), ("l_dc", l_dc)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{term} is not finite: {v}")));
        }
    }
    Ok(l_h + config.alpha * l_dc)
}

/// How the detector input is clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClampMode {
    /// Clamp the value; pass gradients through unchanged.
    StraightThrough,
    /// No clamping. Makes the objective smooth, for finite-difference checks.
    Off,
}

/// Inputs of the batched consistency loss.
pub struct DclBatch<'a, T> {
    /// Noisy latents `[1, B, 32, 32]`.
    pub zt: &'a Act<T>,
    /// Predicted noise `[1, B, 32, 32]`.
    pub eps_hat: &'a Act<T>,
    pub ts: &'a [usize],
    pub stages: &'a [Stage],
    /// Target heatmaps `[15, B, 32, 32]`.
    pub h_inp: &'a Act<T>,
    pub detector: &'a Params<T>,
    pub schedule: &'a NoiseSchedule,
    pub clamp: ClampMode,
}

pub struct DclOutput<T> {
    /// Per-sample L1 means.
    pub values: Vec<f64>,
    /// Gradient of `weight * sum_i values[i]` w.r.t. `eps_hat`.
    pub d_eps_hat: Act<T>,
    /// Gradient of the same through the direct `z_t` path only.
    pub d_zt: Act<T>,
}

/// Per-sample consistency losses and their gradients, scaled by `weight`.
///
/// Each sample's detector input is the derived image
/// `(z_t - sqrt(1 - ab) eps_hat) / sqrt(ab)` for stage `Drv`, or the
/// noise-difference image `z_t - sqrt(1 - ab) eps_hat` for `Dff`.
pub fn dcl_batch<T: Real>(inp: &DclBatch<'_, T>, weight: f64) -> Result<DclOutput<T>> {
    let b = inp.zt.b;
    ensure_arg!(inp.ts.len() == b && inp.stages.len() == b, "batch metadata length");
    ensure_arg!(inp.h_inp.c == SLOTS && inp.h_inp.b == b, "target heatmaps must be [{SLOTS}, {b}, 32, 32]");
    let hw = CANVAS * CANVAS;
    // x = a * z_t + c * eps_hat, per sample.
    let mut coef = Vec::with_capacity(b);
    for (&t, &stage) in inp.ts.iter().zip(inp.stages) {
        inp.schedule.check_t(t)?;
        let (s, n) = inp.schedule.signal_noise(t);
        coef.push(match stage {
            Stage::Drv => {
                if s * s < crate::schedule::MIN_ALPHA_BAR {
                    return Err(Error::Numeric(format!("alpha_bar[{t}] too small for the derived image")));
                }
                (1.0 / s, -n / s)
            }
            Stage::Dff => (1.0, -n),
        });
    }
    let mut img = inp.zt.zeros_like();
    for (bi, &(a, c)) in coef.iter().enumerate() {
        let (a, c) = (T::of(a), T::of(c));
        let z = inp.zt.plane(0, bi);
        let e = inp.eps_hat.plane(0, bi);
        for ((o, &zv), &ev) in img.plane_mut(0, bi).iter_mut().zip(z).zip(e) {
            let x = a * zv + c * ev;
            *o = match inp.clamp {
                ClampMode::StraightThrough => x.max(T::zero()).min(T::one()),
                ClampMode::Off => x,
            };
        }
    }
    count_dcl(b);
    let det = Detector::arch();
    let cache = det.forward(inp.detector, &img);
    let mut values = vec![0.0; b];
    let mut d_h = cache.out.zeros_like();
    let numel = (SLOTS * hw) as f64;
    let g = T::of(weight / numel);
    for k in 0..SLOTS {
        for (bi, value) in values.iter_mut().enumerate() {
            let (h, target) = (cache.out.plane(k, bi), inp.h_inp.plane(k, bi));
            let mut acc = 0.0;
            for ((d, &hv), &tv) in d_h.plane_mut(k, bi).iter_mut().zip(h).zip(target) {
                let r = hv - tv;
                acc += r.abs().f64();
                *d = if r > T::zero() {
                    g
                } else if r < T::zero() {
                    -g
                } else {
                    T::zero()
                };
            }
            *value += acc / numel;
        }
    }
    let d_img = det.backward(inp.detector, &cache, &d_h, None);
    let mut d_eps_hat = d_img.zeros_like();
    let mut d_zt = d_img.zeros_like();
    for (bi, &(a, c)) in coef.iter().enumerate() {
        let (a, c) = (T::of(a), T::of(c));
        let src = d_img.plane(0, bi);
        for (o, &dv) in d_eps_hat.plane_mut(0, bi).iter_mut().zip(src) {
            *o = c * dv;
        }
        for (o, &dv) in d_zt.plane_mut(0, bi).iter_mut().zip(src) {
            *o = a * dv;
        }
    }
    Ok(DclOutput { values, d_eps_hat, d_zt })
}

/// Batched objective used by training.
pub struct Objective<'a, T> {
    pub zt: &'a Act<T>,
    pub eps: &'a Act<T>,
    pub eps_hat: &'a Act<T>,
    pub ts: &'a [usize],
    /// Ground-truth heatmaps `[15, B, 32, 32]`: the loss weight and the
    /// consistency target.
    pub gt: &'a Act<T>,
    pub detector: &'a Params<T>,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a LossConfig,
    /// Forces every sample into one stage.
    pub stage_override: Option<Stage>,
    pub clamp: ClampMode,
}

pub struct ObjectiveOutput<T> {
    /// Batch means of every term.
    pub breakdown: LossBreakdown,
    /// Fraction of samples supervised by the noise-difference stage.
    pub stage_fraction_dff: f64,
    /// Per-sample breakdowns.
    pub per_sample: Vec<LossBreakdown>,
    /// Gradient of the batch-mean total w.r.t. `eps_hat`.
    pub d_eps_hat: Act<T>,
}

/// Evaluates `mean_i (l_h_i + alpha * l_dc_i)` and its gradient w.r.t. the
/// predicted noise. The consistency loss is skipped entirely when
/// `alpha == 0`, and reported as zero.
pub fn objective<T: Real>(o: &Objective<'_, T>) -> Result<ObjectiveOutput<T>> {
    let b = o.eps.b;
    ensure_arg!(b > 0, "empty batch");
    ensure_arg!(o.eps_hat.b == b && o.zt.b == b && o.ts.len() == b, "batch size mismatch");
    let cfg = o.config;
    let hw = CANVAS * CANVAS;
    let lambda = T::of(cfg.lambda);
    let mut d_eps_hat = o.eps.zeros_like();
    let mut per_sample = Vec::with_capacity(b);
    let grad_scale = T::of(2.0 / (b * hw) as f64);
    for bi in 0..b {
        let mut w = vec![T::zero(); hw];
        for k in 0..SLOTS {
            for (m, &v) in w.iter_mut().zip(o.gt.plane(k, bi)) {
                *m = m.max(v);
            }
        }
        let (mut sb, mut sh) = (0.0, 0.0);
        let (eps, eh) = (o.eps.plane(0, bi), o.eps_hat.plane(0, bi));
        let d = d_eps_hat.plane_mut(0, bi);
        for i in 0..hw {
            let r = eps[i] - eh[i];
            let wa = T::one() + lambda * w[i];
            let wr = wa * r;
            sb += r.f64() * r.f64();
            sh += wr.f64() * wr.f64();
            d[i] = -grad_scale * wa * wr;
        }
        let stage = o.stage_override.unwrap_or_else(|| cfg.stage(o.ts[bi]));
        per_sample.push(LossBreakdown {
            l_base: sb / hw as f64,
            l_h: sh / hw as f64,
            l_dc: 0.0,
            l_total: 0.0,
            stage,
        });
    }
    if cfg.alpha != 0.0 {
        let stages: Vec<Stage> = per_sample.iter().map(|s| s.stage).collect();
        let out = dcl_batch(
            &DclBatch {
                zt: o.zt,
                eps_hat: o.eps_hat,
                ts: o.ts,
                stages: &stages,
                h_inp: o.gt,
                detector: o.detector,
                schedule: o.schedule,
                clamp: o.clamp,
            },
            cfg.alpha / b as f64,
        )?;
        for (s, v) in per_sample.iter_mut().zip(&out.values) {
            s.l_dc = *v;
        }
        d_eps_hat.add_assign(&out.d_eps_hat);
    }
    for s in per_sample.iter_mut() {
        s.l_total = s.l_h + cfg.alpha * s.l_dc;
    }
    let mean = |f: fn(&LossBreakdown) -> f64| per_sample.iter().map(f).sum::<f64>() / b as f64;
    let dff = per_sample.iter().filter(|s| s.stage == Stage::Dff).count();
    let l_h = mean(|s| s.l_h);
    let l_dc = mean(|s| s.l_dc);
    let breakdown = LossBreakdown {
        l_base: mean(|s| s.l_base),
        l_h,
        l_dc,
        l_total: l_h + cfg.alpha * l_dc,
        stage: if dff * 2 > b { Stage::Dff } else { Stage::Drv },
    };
    Ok(ObjectiveOutput {
        breakdown,
        stage_fraction_dff: dff as f64 / b as f64,
        per_sample,
        d_eps_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> Latent<f64> {
        Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap()
    }

    fn stack(v: f64) -> HeatmapStack<f64> {
        HeatmapStack { maps: Tensor::full(&[SLOTS, CANVAS, CANVAS], v) }
    }

    #[test]
    fn base_loss_cases() {
        assert_eq!(base_denoising_loss(&scalar(0.4), &scalar(0.4)).unwrap(), 0.0);
        assert!((base_denoising_loss(&scalar(0.2), &scalar(0.5)).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(
            base_denoising_loss(&scalar(0.2), &scalar(0.5)).unwrap(),
            base_denoising_loss(&scalar(0.5), &scalar(0.2)).unwrap()
        );
        assert!(base_denoising_loss(&scalar(0.0), &Tensor::zeros(&[1, 2, 1])).is_err());
    }

    #[test]
    fn weighted_loss_cases() {
        let cfg = LossConfig { lambda: 2.0, ..LossConfig::for_steps(200) };
        let mut maps = Tensor::zeros(&[SLOTS, CANVAS, CANVAS]);
        maps.data_mut()[3 * CANVAS * CANVAS + 100] = 0.5;
        let h = HeatmapStack::new(maps).unwrap();
        let eps = Tensor::<f64>::zeros(&[1, CANVAS, CANVAS]);
        let mut eps_hat = eps.clone();
        eps_hat.data_mut()[100] = 0.3;
        let l = weighted_sd_loss(&eps, &eps_hat, &h, &cfg).unwrap();
        assert!((l * 1024.0 - 0.36).abs() < 1e-12);
        assert_eq!(weighted_sd_loss(&eps, &eps, &h, &cfg).unwrap(), 0.0);
        let flat = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(
            weighted_sd_loss(&eps, &eps_hat, &h, &flat).unwrap(),
            base_denoising_loss(&eps, &eps_hat).unwrap()
        );
    }

    #[test]
    fn stage_switch_at_threshold() {
        let cfg = LossConfig::for_steps(1000);
        assert_eq!(cfg.k_stage, 600);
        assert_eq!(LossConfig::for_steps(200).k_stage, 120);
        let (inp, a, b) = (stack(0.2), stack(0.5), stack(0.9));
        let (v, s) = dcl_loss(599, &cfg, &inp, &a, &b).unwrap();
        assert_eq!(s, Stage::Drv);
        assert!((v - 0.3).abs() < 1e-12);
        let (v, s) = dcl_loss(600, &cfg, &inp, &a, &b).unwrap();
        assert_eq!(s, Stage::Dff);
        assert!((v - 0.7).abs() < 1e-12);
        assert_eq!(dcl_loss(10, &cfg, &inp, &inp, &b).unwrap().0, 0.0);
        assert!(dcl_loss(1000, &cfg, &inp, &a, &b).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let cfg = LossConfig { alpha: 0.05, ..LossConfig::for_steps(200) };
        assert!((total_loss(0.36, 0.3, &cfg).unwrap() - 0.375).abs() < 1e-15);
        let off = LossConfig { alpha: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(0.36, 0.3, &off).unwrap(), 0.36);
        assert!(total_loss(f64::NAN, 0.3, &cfg).is_err());
        assert!(total_loss(0.1, f64::INFINITY, &cfg).is_err());
    }

    #[test]
    fn invalid_threshold_rejected() {
        let cfg = LossConfig { k_stage: 300, ..LossConfig::for_steps(200) };
        assert!(cfg.validate().is_err());
    }
}
