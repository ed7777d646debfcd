use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrainState;
use crate::denoiser::Denoiser;
use crate::error::{ensure_arg, Error, Result};
use crate::keypoint::{render_gt_heatmaps, Detector, DEFAULT_HEATMAP_SIGMA};
use crate::losses::{dcl_batch, ClampMode, DclBatch};
use crate::nn::Act;
use crate::schedule::Latent;
use crate::sgi::{caption_context, tokenize_annotations, Sgi};
use crate::tensor::Tensor;
use crate::world::{SceneSpec, TokenSeq, CANVAS, IMAGE_SHAPE, SLOTS};

/// One image to generate.
#[derive(Clone, Copy)]
pub struct SampleRequest<'a> {
    pub cond: &'a Latent<f32>,
    pub caption: &'a TokenSeq,
    /// Supplies the annotations for the SGI and the guidance target.
    pub scene: &'a SceneSpec,
    pub seed: u64,
}

fn check_state(state: &TrainState) -> Result<()> {
    state.config.validate()?;
    let finite = state.denoiser.is_finite() && state.sgi.is_finite() && state.detector.is_finite();
    if !finite {
        return Err(Error::CheckpointMismatch("checkpoint holds non-finite parameters".into()));
    }
    Ok(())
}

/// Ancestral sampling for a batch of requests, optionally with consistency
/// guidance of strength `guidance`.
///
/// Each request draws its noise from its own generator seeded with
/// `request.seed`, so results do not depend on batch composition. At every
/// step the clean estimate is clamped to `[0, 1]` and the latent moves to the
/// posterior mean plus posterior noise (none at `t = 0`). With guidance the
/// new latent is then shifted by `-g * grad_{z_t} L_DC(z_t)`, a descent step on
/// the consistency loss, whose stage follows the checkpoint's threshold.
///
/// Returns the final latents before any clamping.
pub fn sample_batch(state: &TrainState, reqs: &[SampleRequest<'_>], guidance: Option<f64>) -> Result<Vec<Latent<f32>>> {
    check_state(state)?;
    if let Some(g) = guidance {
        ensure_arg!(g >= 0.0 && g.is_finite(), "guidance strength must be finite and >= 0, got {g}");
    }
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    for r in reqs {
        ensure_arg!(r.cond.shape() == IMAGE_SHAPE, "condition must be [1, 32, 32], got {:?}", r.cond.shape());
    }
    let b = reqs.len();
    let hw = CANVAS * CANVAS;
    let sched = state.schedule();
    let loss_cfg = &state.config.loss;
    let (den, sgi) = (Denoiser::arch(), Sgi::arch());

    let mut ctx = Vec::with_capacity(b * 4 * 32);
    for r in reqs {
        let raw = caption_context::<f32>(r.caption).rows.into_data();
        if state.config.mode.uses_sgi() {
            ctx.extend(sgi.forward(&state.sgi, &raw, &tokenize_annotations(r.scene)).1.out);
        } else {
            ctx.extend(raw);
        }
    }
    let conds: Vec<&Tensor<f32>> = reqs.iter().map(|r| r.cond).collect();
    let cond = Act::from_samples(&conds);
    let gt = guidance.map(|_| {
        let maps: Vec<Tensor<f32>> = reqs
            .iter()
            .map(|r| render_gt_heatmaps(r.scene, DEFAULT_HEATMAP_SIGMA).maps)
            .collect();
        Act::from_samples(&maps.iter().collect::<Vec<_>>())
    });

    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut z = Act::zeros(1, b, CANVAS, CANVAS);
    for (bi, rng) in rngs.iter_mut().enumerate() {
        z.plane_mut(0, bi).iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    for t in (0..sched.steps()).rev() {
        let ts = vec![t; b];
        let cache = den.forward(&state.denoiser, &z, &cond, &ts, &ctx);
        let eps_hat = &cache.out;
        let (s, n) = sched.signal_noise(t);
        let (c_x0, c_zt, var) = sched.posterior(t);
        let (s, n, c_x0, c_zt, sigma) = (s as f32, n as f32, c_x0 as f32, c_zt as f32, var.sqrt() as f32);
        let mut next = z.zeros_like();
        for (bi, rng) in rngs.iter_mut().enumerate() {
            let (zp, ep) = (z.plane(0, bi), eps_hat.plane(0, bi));
            let out = next.plane_mut(0, bi);
            for i in 0..hw {
                let x0 = ((zp[i] - n * ep[i]) / s).clamp(0.0, 1.0);
                out[i] = c_x0 * x0 + c_zt * zp[i];
            }
            if t > 0 {
                out.iter_mut().for_each(|v| *v += sigma * rng.sample::<f32, _>(StandardNormal));
            }
        }
        if let (Some(g), Some(gt)) = (guidance, &gt) {
            let stage = loss_cfg.stage(t);
            let d = dcl_batch(
                &DclBatch {
                    zt: &z,
                    eps_hat,
                    ts: &ts,
                    stages: &vec![stage; b],
                    h_inp: gt,
                    detector: &state.detector,
                    schedule: &sched,
                    clamp: ClampMode::StraightThrough,
                },
                1.0,
            )?;
            let through = den.backward(&state.denoiser, &cache, &d.d_eps_hat, None, true);
            let mut grad = d.d_zt;
            grad.add_assign(&through.d_zt.expect("requested latent gradient"));
            let g = g as f32;
            for (v, &dv) in next.data.iter_mut().zip(&grad.data) {
                *v -= g * dv;
            }
        }
        z = next;
    }
    Ok((0..b).map(|bi| z.sample(bi)).collect())
}

/// Ancestral sampling of one image. Returns the final latent before clamping.
pub fn sample_ddpm(cond: &Latent<f32>, caption: &TokenSeq, scene: &SceneSpec, ckpt: &TrainState, rng_seed: u64) -> Result<Latent<f32>> {
    let req = SampleRequest { cond, caption, scene, seed: rng_seed };
    Ok(sample_batch(ckpt, &[req], None)?.remove(0))
}

/// [`sample_ddpm`] with consistency guidance of strength `g`.
pub fn guided_sample(
    cond: &Latent<f32>,
    caption: &TokenSeq,
    scene: &SceneSpec,
    ckpt: &TrainState,
    g: f64,
    rng_seed: u64,
) -> Result<Latent<f32>> {
    let req = SampleRequest { cond, caption, scene, seed: rng_seed };
    Ok(sample_batch(ckpt, &[req], Some(g))?.remove(0))
}

/// L1 mean between detector heatmaps of each clamped image and the
/// ground-truth heatmaps of its scene: the consistency loss of a final image.
pub fn heatmap_consistency(state: &TrainState, images: &[Latent<f32>], scenes: &[&SceneSpec]) -> Result<Vec<f64>> {
    ensure_arg!(images.len() == scenes.len(), "images and scenes differ in length");
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let clamped: Vec<Tensor<f32>> = images.iter().map(|x| x.map(|v| v.clamp(0.0, 1.0))).collect();
    let out = Detector::arch()
        .forward(&state.detector, &Act::from_samples(&clamped.iter().collect::<Vec<_>>()))
        .out;
    Ok(scenes
        .iter()
        .enumerate()
        .map(|(bi, s)| {
            let gt = render_gt_heatmaps::<f32>(s, DEFAULT_HEATMAP_SIGMA);
            let sum: f64 = (0..SLOTS)
                .map(|k| {
                    out.plane(k, bi)
                        .iter()
                        .zip(gt.channel(k))
                        .map(|(&a, &b)| (a - b).abs() as f64)
                        .sum::<f64>()
                })
                .sum();
            sum / (SLOTS * CANVAS * CANVAS) as f64
        })
        .collect())
}
