//! Central finite-difference checks of the hand-derived backward passes, in
//! f64. Each check returns the largest relative error it saw.

use ecnet::denoiser::{init_denoiser, Denoiser};
use ecnet::keypoint::{init_detector, render_gt_heatmaps, Detector};
use ecnet::losses::{objective, ClampMode, LossConfig, Objective};
use ecnet::nn::Act;
use ecnet::schedule::default_schedule;
use ecnet::sgi::{caption_context, init_sgi, tokenize_annotations, Sgi};
use ecnet::world::{encode_caption, render_image, sample_scene, GenConfig, SceneSpec};
use ecnet::{Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub type Check = Result<f64, String>;

fn within(what: &str, analytic: f64, numeric: f64, worst: &mut f64) -> Result<(), String> {
    let e = rel_err(analytic, numeric);
    *worst = worst.max(e);
    if e <= REL_TOL {
        Ok(())
    } else {
        Err(format!("{what}: analytic {analytic:e} numeric {numeric:e} rel {e:e}"))
    }
}

/// Compares `grad` against central differences of `loss` at `probes` flat indices.
fn check_params(what: &str, params: &Params<f64>, grad: &Params<f64>, probes: &[usize], loss: impl Fn(&Params<f64>) -> f64) -> Check {
    let mut worst = 0.0;
    let mut p = params.clone();
    for &i in probes {
        let x = p.flat_get(i);
        p.flat_set(i, x + H);
        let up = loss(&p);
        p.flat_set(i, x - H);
        let down = loss(&p);
        p.flat_set(i, x);
        let numeric = (up - down) / (2.0 * H);
        within(&format!("{what}[{i}]"), grad.flat_get(i), numeric, &mut worst)?;
    }
    Ok(worst)
}

fn random_probes(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..n)).collect()
}

/// One probe set per named tensor, so every parameter matrix is exercised.
fn per_tensor_probes(rng: &mut ChaCha8Rng, p: &Params<f64>, per: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    for (_, t) in p.iter() {
        for _ in 0..per {
            out.push(off + rng.gen_range(0..t.len()));
        }
        off += t.len();
    }
    out
}

fn scenes(n: u64) -> Vec<SceneSpec> {
    (0..n).map(|i| sample_scene(100 + i, &GenConfig::default()).unwrap()).collect()
}

fn batch_of(images: &[Tensor<f64>]) -> Act<f64> {
    Act::from_samples(&images.iter().collect::<Vec<_>>())
}

/// `keep * x + uniform(-amp, amp)`, elementwise.
fn noisy(x: &Tensor<f64>, rng: &mut ChaCha8Rng, keep: f64, amp: f64) -> Tensor<f64> {
    let data = x.data().iter().map(|&v| keep * v + rng.gen_range(-amp..amp)).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A denoiser whose zero-initialized output layer has been randomized, so
/// gradients reach every layer.
fn live_denoiser(seed: u64) -> Params<f64> {
    let mut p = init_denoiser::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for name in ["denoiser.conv_out.weight", "denoiser.conv_out.bias"] {
        p.by_name_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-0.2..0.2));
    }
    p
}

pub fn predict_noise() -> Check {
    let p = live_denoiser(1);
    let arch = Denoiser::arch();
    let sc = scenes(2);
    let conds: Vec<Tensor<f64>> = sc.iter().map(|s| render_image(s).cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let zts: Vec<Tensor<f64>> = conds.iter().map(|c| noisy(c, &mut rng, 1.0, 1.0)).collect();
    let ctx: Vec<f64> = sc.iter().flat_map(|s| caption_context::<f64>(&encode_caption(s)).rows.into_data()).collect();
    let (zt, cond, ts) = (batch_of(&zts), batch_of(&conds), [7usize, 150]);

    let loss = |p: &Params<f64>, zt: &Act<f64>, ctx: &[f64]| {
        let out = arch.forward(p, zt, &cond, &ts, ctx).out;
        out.data.iter().map(|v| v * v).sum::<f64>() / out.data.len() as f64
    };
    let cache = arch.forward(&p, &zt, &cond, &ts, &ctx);
    let mut d_out = cache.out.clone();
    let scale = 2.0 / d_out.data.len() as f64;
    d_out.data.iter_mut().for_each(|v| *v *= scale);
    let mut grads = p.zeros_like();
    let g = arch.backward(&p, &cache, &d_out, Some(&mut grads), true);

    let mut probes = random_probes(&mut rng, p.num_scalars(), 10);
    probes.extend(per_tensor_probes(&mut rng, &p, 1));
    let mut worst = check_params("denoiser", &p, &grads, &probes, |q| loss(q, &zt, &ctx))?;

    let d_zt = g.d_zt.unwrap();
    for _ in 0..5 {
        let i = rng.gen_range(0..zt.data.len());
        let (mut a, mut b) = (zt.clone(), zt.clone());
        a.data[i] += H;
        b.data[i] -= H;
        let n = (loss(&p, &a, &ctx) - loss(&p, &b, &ctx)) / (2.0 * H);
        within(&format!("d_zt[{i}]"), d_zt.data[i], n, &mut worst)?;
    }
    for _ in 0..5 {
        let i = rng.gen_range(0..ctx.len());
        let (mut a, mut b) = (ctx.clone(), ctx.clone());
        a[i] += H;
        b[i] -= H;
        let n = (loss(&p, &zt, &a) - loss(&p, &zt, &b)) / (2.0 * H);
        within(&format!("d_ctx[{i}]"), g.d_ctx[i], n, &mut worst)?;
    }
    Ok(worst)
}

pub fn sgi_fuse() -> Check {
    let p = init_sgi::<f64>(3);
    let arch = Sgi::arch();
    let scene = sample_scene(9, &GenConfig::with_count(2)).unwrap();
    let tokens = tokenize_annotations(&scene);
    let ctx = caption_context::<f64>(&encode_caption(&scene)).rows.into_data();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r: Vec<f64> = (0..ctx.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |q: &Params<f64>| dot(&arch.forward(q, &ctx, &tokens).1.out, &r);
    let (emb, fuse) = arch.forward(&p, &ctx, &tokens);
    let mut grads = p.zeros_like();
    arch.backward(&p, &emb, &fuse, &r, &mut grads);
    let probes = per_tensor_probes(&mut rng, &p, 5);
    check_params("sgi", &p, &grads, &probes, loss)
}

pub fn detect_heatmaps() -> Check {
    let p = init_detector::<f64>(5);
    let det = Detector::arch();
    let imgs: Vec<Tensor<f64>> = scenes(2).iter().map(|s| render_image(s).cast()).collect();
    let x = batch_of(&imgs);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cache = det.forward(&p, &x);
    let r: Vec<f64> = (0..cache.out.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_out = Act { data: r.clone(), ..cache.out.clone() };
    let mut grads = p.zeros_like();
    let dx = det.backward(&p, &cache, &d_out, Some(&mut grads));
    let loss = |q: &Params<f64>, x: &Act<f64>| dot(&det.forward(q, x).out.data, &r);

    let mut probes = random_probes(&mut rng, p.num_scalars(), 10);
    probes.extend(per_tensor_probes(&mut rng, &p, 1));
    let mut worst = check_params("detector", &p, &grads, &probes, |q| loss(q, &x))?;
    for _ in 0..5 {
        let i = rng.gen_range(0..x.data.len());
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data[i] += H;
        b.data[i] -= H;
        let n = (loss(&p, &a) - loss(&p, &b)) / (2.0 * H);
        within(&format!("d_image[{i}]"), dx.data[i], n, &mut worst)?;
    }
    Ok(worst)
}

/// The full objective `mean(l_h + alpha l_dc)`, composed through the SGI, the
/// denoiser, the derived / noise-difference images and the frozen detector.
pub fn total_loss() -> Check {
    let den = live_denoiser(7);
    let sgi = init_sgi::<f64>(8);
    let detector = init_detector::<f64>(9);
    let sched = default_schedule(200).unwrap();
    let cfg = LossConfig { alpha: 2.0, ..LossConfig::for_steps(200) };
    let sc = scenes(3);
    // One derived-image sample, two noise-difference samples.
    let ts = [30usize, 150, 199];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let conds: Vec<Tensor<f64>> = sc.iter().map(|s| render_image(s).cast()).collect();
    let eps: Vec<Tensor<f64>> = conds.iter().map(|c| noisy(c, &mut rng, 0.0, 1.5)).collect();
    let zts: Vec<Tensor<f64>> = conds
        .iter()
        .zip(&eps)
        .zip(ts)
        .map(|((c, e), t)| ecnet::schedule::diffuse(c, t, e, &sched).unwrap())
        .collect();
    let gts: Vec<Tensor<f64>> = sc.iter().map(|s| render_gt_heatmaps(s, 1.5).maps).collect();
    let (zt, cond, eps, gt) = (batch_of(&zts), batch_of(&conds), batch_of(&eps), batch_of(&gts));
    let tokens: Vec<_> = sc.iter().map(tokenize_annotations).collect();
    let raw_ctx: Vec<Vec<f64>> = sc.iter().map(|s| caption_context::<f64>(&encode_caption(s)).rows.into_data()).collect();
    let (darch, sarch) = (Denoiser::arch(), Sgi::arch());

    let run = |den: &Params<f64>, sgi: &Params<f64>| {
        let fused: Vec<_> = raw_ctx.iter().zip(&tokens).map(|(c, t)| sarch.forward(sgi, c, t)).collect();
        let ctx: Vec<f64> = fused.iter().flat_map(|(_, f)| f.out.clone()).collect();
        let cache = darch.forward(den, &zt, &cond, &ts, &ctx);
        let out = objective(&Objective {
            zt: &zt,
            eps: &eps,
            eps_hat: &cache.out,
            ts: &ts,
            gt: &gt,
            detector: &detector,
            schedule: &sched,
            config: &cfg,
            stage_override: None,
            clamp: ClampMode::Off,
        })
        .unwrap();
        (fused, cache, out)
    };
    let (fused, cache, out) = run(&den, &sgi);
    if out.breakdown.l_dc <= 0.0 || (out.stage_fraction_dff - 2.0 / 3.0).abs() > 1e-12 {
        return Err("both consistency stages must be exercised".into());
    }
    let mut g_den = den.zeros_like();
    let g = darch.backward(&den, &cache, &out.d_eps_hat, Some(&mut g_den), false);
    let mut g_sgi = sgi.zeros_like();
    for (i, (emb, f)) in fused.iter().enumerate() {
        let w = 4 * 32;
        sarch.backward(&sgi, emb, f, &g.d_ctx[i * w..(i + 1) * w], &mut g_sgi);
    }
    let mut probes = random_probes(&mut rng, den.num_scalars(), 5);
    probes.extend(per_tensor_probes(&mut rng, &den, 1));
    let a = check_params("total/denoiser", &den, &g_den, &probes, |q| run(q, &sgi).2.breakdown.l_total)?;
    let probes = random_probes(&mut rng, sgi.num_scalars(), 5);
    let b = check_params("total/sgi", &sgi, &g_sgi, &probes, |q| run(&den, q).2.breakdown.l_total)?;
    Ok(a.max(b))
}
