//! Keypoint heatmaps: ground-truth rendering, the frozen convolutional
//! detector, coordinate decoding, and detector training.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::nn::{self, Act, Conv2d, ConvSpec};
use crate::optim::Adam;
use crate::real::Real;
use crate::schedule::Latent;
use crate::tensor::{Params, Tensor};
use crate::world::{DatasetRecord, SceneSpec, CANVAS, SLOTS};

pub const DEFAULT_HEATMAP_SIGMA: f64 = 1.5;

/// Per-slot heatmaps `[15, 32, 32]`, figure-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T = f64> {
    pub maps: Tensor<T>,
}

impl<T: Real> HeatmapStack<T> {
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        ensure_arg!(
            maps.shape() == [SLOTS, CANVAS, CANVAS],
            "heatmap stack must be [{SLOTS}, {CANVAS}, {CANVAS}], got {:?}",
            maps.shape()
        );
        Ok(HeatmapStack { maps })
    }

    pub fn channel(&self, k: usize) -> &[T] {
        &self.maps.data()[k * CANVAS * CANVAS..(k + 1) * CANVAS * CANVAS]
    }

    /// Per-pixel maximum across channels, `[1, 32, 32]`.
    pub fn collapse_max(&self) -> Tensor<T> {
        let mut out = vec![T::zero(); CANVAS * CANVAS];
        for k in 0..SLOTS {
            for (o, &v) in out.iter_mut().zip(self.channel(k)) {
                *o = o.max(v);
            }
        }
        Tensor::from_vec(&[1, CANVAS, CANVAS], out).expect("canvas shape")
    }
}

/// Renders unit-peak Gaussians of width `sigma` at every present keypoint;
/// absent slots are exactly zero.
pub fn render_gt_heatmaps<T: Real>(scene: &SceneSpec, sigma: f64) -> HeatmapStack<T> {
    let mut maps = Tensor::zeros(&[SLOTS, CANVAS, CANVAS]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (slot, kp) in scene.slots().iter().enumerate() {
        let Some([kx, ky]) = *kp else { continue };
        let ch = &mut maps.data_mut()[slot * CANVAS * CANVAS..(slot + 1) * CANVAS * CANVAS];
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let d2 = (x as f64 - kx).powi(2) + (y as f64 - ky).powi(2);
                ch[y * CANVAS + x] = T::of((-d2 * inv).exp());
            }
        }
    }
    HeatmapStack { maps }
}

/// The keypoint detector: image plus two coordinate planes in, one sigmoid
/// heatmap per slot out. One stride-2 level with a dilated convolution gives a
/// receptive field of about 19 px; a skip connection restores full resolution.
#[derive(Clone, Debug)]
pub struct Detector {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
    head: Conv2d,
}

/// Bias of the output head at initialization: sigmoid(-4) is about 0.018,
/// close to the mostly-empty targets.
const HEAD_BIAS_INIT: f64 = -4.0;

impl Detector {
    pub fn register<T: Real, R: Rng>(p: &mut Params<T>, rng: &mut R) -> Self {
        let det = Detector {
            c1: Conv2d::register(p, "detector.c1", ConvSpec::same3(3, 16), rng, false),
            c2: Conv2d::register(
                p,
                "detector.c2",
                ConvSpec { cin: 16, cout: 32, k: 3, stride: 2, pad: 1, dil: 1 },
                rng,
                false,
            ),
            c3: Conv2d::register(p, "detector.c3", ConvSpec::same3(32, 32), rng, false),
            c4: Conv2d::register(
                p,
                "detector.c4",
                ConvSpec { cin: 32, cout: 16, k: 3, stride: 1, pad: 2, dil: 2 },
                rng,
                false,
            ),
            c5: Conv2d::register(p, "detector.c5", ConvSpec::same3(16, 16), rng, false),
            head: Conv2d::register(
                p,
                "detector.head",
                ConvSpec { cin: 16, cout: SLOTS, k: 1, stride: 1, pad: 0, dil: 1 },
                rng,
                false,
            ),
        };
        p.get_mut(det.head.b)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = T::of(HEAD_BIAS_INIT));
        det
    }

    /// The slot layout shared by every detector parameter set.
    pub fn arch() -> &'static Detector {
        static ARCH: OnceLock<Detector> = OnceLock::new();
        ARCH.get_or_init(|| Detector::register::<f32, _>(&mut Params::new(), &mut ChaCha8Rng::seed_from_u64(0)))
    }

    pub fn param_count(&self) -> usize {
        [&self.c1, &self.c2, &self.c3, &self.c4, &self.c5, &self.head]
            .iter()
            .map(|c| c.param_count())
            .sum()
    }

    fn coord_planes<T: Real>(b: usize) -> Act<T> {
        let mut a = Act::zeros(2, b, CANVAS, CANVAS);
        let scale = 2.0 / (CANVAS - 1) as f64;
        for bi in 0..b {
            for (i, v) in a.plane_mut(0, bi).iter_mut().enumerate() {
                *v = T::of((i % CANVAS) as f64 * scale - 1.0);
            }
            for (i, v) in a.plane_mut(1, bi).iter_mut().enumerate() {
                *v = T::of((i / CANVAS) as f64 * scale - 1.0);
            }
        }
        a
    }

    /// Batched forward pass on `[1, B, 32, 32]` images.
    pub fn forward<T: Real>(&self, p: &Params<T>, images: &Act<T>) -> DetectorCache<T> {
        assert_eq!((images.c, images.h, images.w), (1, CANVAS, CANVAS), "detector input shape");
        let x0 = Act::concat(&[images, &Self::coord_planes(images.b)]);
        let a1 = self.c1.forward(p, &x0);
        let h1 = nn::silu(&a1);
        let a2 = self.c2.forward(p, &h1);
        let h2 = nn::silu(&a2);
        let a3 = self.c3.forward(p, &h2);
        let h3 = nn::silu(&a3);
        let a4 = self.c4.forward(p, &h3);
        let u = nn::upsample2(&nn::silu(&a4));
        let mut a5 = self.c5.forward(p, &u);
        a5.add_assign(&h1);
        let h5 = nn::silu(&a5);
        let a6 = self.head.forward(p, &h5);
        let out = nn::sigmoid_act(&a6);
        DetectorCache { x0, a1, h1, a2, h2, a3, h3, a4, u, a5, h5, out }
    }

    /// Back-propagates `d_out`; parameter gradients accumulate into `grads`
    /// when given. Returns the image gradient `[1, B, 32, 32]`.
    pub fn backward<T: Real>(
        &self,
        p: &Params<T>,
        cache: &DetectorCache<T>,
        d_out: &Act<T>,
        mut grads: Option<&mut Params<T>>,
    ) -> Act<T> {
        let c = cache;
        let da6 = nn::sigmoid_backward(&c.out, d_out);
        let dh5 = self.head.backward(p, &c.h5, &da6, grads.as_deref_mut(), true).unwrap();
        let da5 = nn::silu_backward(&c.a5, &dh5);
        let du = self.c5.backward(p, &c.u, &da5, grads.as_deref_mut(), true).unwrap();
        let dh4 = nn::upsample2_backward(&du);
        let da4 = nn::silu_backward(&c.a4, &dh4);
        let dh3 = self.c4.backward(p, &c.h3, &da4, grads.as_deref_mut(), true).unwrap();
        let da3 = nn::silu_backward(&c.a3, &dh3);
        let dh2 = self.c3.backward(p, &c.h2, &da3, grads.as_deref_mut(), true).unwrap();
        let da2 = nn::silu_backward(&c.a2, &dh2);
        let mut dh1 = self.c2.backward(p, &c.h1, &da2, grads.as_deref_mut(), true).unwrap();
        dh1.add_assign(&da5);
        let da1 = nn::silu_backward(&c.a1, &dh1);
        let dx0 = self.c1.backward(p, &c.x0, &da1, grads, true).unwrap();
        dx0.split(1).0
    }
}

/// Intermediate activations of one detector pass.
pub struct DetectorCache<T> {
    x0: Act<T>,
    a1: Act<T>,
    h1: Act<T>,
    a2: Act<T>,
    h2: Act<T>,
    a3: Act<T>,
    h3: Act<T>,
    a4: Act<T>,
    u: Act<T>,
    a5: Act<T>,
    h5: Act<T>,
    /// Heatmaps `[15, B, 32, 32]`.
    pub out: Act<T>,
}

/// Initializes detector parameters deterministically from `seed`.
pub fn init_detector<T: Real>(seed: u64) -> Params<T> {
    let mut p = Params::new();
    Detector::register(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Heatmaps of one `[1, 32, 32]` image.
pub fn detect_heatmaps<T: Real>(image: &Latent<T>, params: &Params<T>) -> Result<HeatmapStack<T>> {
    ensure_arg!(
        image.shape() == [1, CANVAS, CANVAS],
        "detector expects [1, {CANVAS}, {CANVAS}], got {:?}",
        image.shape()
    );
    let cache = Detector::arch().forward(params, &Act::from_samples(&[image]));
    HeatmapStack::new(cache.out.sample(0))
}

/// Heatmaps for a batch of images.
pub fn detect_batch<T: Real>(images: &[&Latent<T>], params: &Params<T>) -> Vec<HeatmapStack<T>> {
    let out = Detector::arch().forward(params, &Act::from_samples(images)).out;
    (0..images.len())
        .map(|b| HeatmapStack { maps: out.sample(b) })
        .collect()
}

/// Fraction of the channel maximum below which pixels carry no weight in
/// [`soft_argmax`].
pub const SOFT_ARGMAX_FLOOR: f64 = 0.25;

/// A decoded keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedKeypoint {
    pub xy: [f64; 2],
    pub confidence: f64,
}

/// Decodes one keypoint per channel as the expectation of pixel coordinates
/// under the channel's weights `max(h - 0.25 * max_h, 0)`, normalized.
/// Confidence is the channel maximum. Empty channels decode to the canvas
/// center with zero confidence.
pub fn soft_argmax<T: Real>(maps: &HeatmapStack<T>) -> [DecodedKeypoint; SLOTS] {
    let mut out = [DecodedKeypoint { xy: [0.0; 2], confidence: 0.0 }; SLOTS];
    for (k, o) in out.iter_mut().enumerate() {
        let ch = maps.channel(k);
        let mx = ch.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        if mx <= 0.0 || !mx.is_finite() {
            let c = (CANVAS - 1) as f64 / 2.0;
            *o = DecodedKeypoint { xy: [c, c], confidence: 0.0 };
            continue;
        }
        let floor = SOFT_ARGMAX_FLOOR * mx;
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (i, v) in ch.iter().enumerate() {
            let w = (v.f64() - floor).max(0.0);
            sw += w;
            sx += w * (i % CANVAS) as f64;
            sy += w * (i / CANVAS) as f64;
        }
        *o = DecodedKeypoint {
            xy: [sx / sw, sy / sw],
            confidence: mx,
        };
    }
    out
}

/// Optimizer settings for [`train_detector`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sigma: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            sigma: DEFAULT_HEATMAP_SIGMA,
        }
    }
}

pub struct TrainedDetector {
    pub params: Params<f32>,
    /// Mean-squared error of every step's batch, before the update.
    pub losses: Vec<f64>,
}

/// Fits the detector to ground-truth heatmaps of clean target images by
/// mean-squared error. Deterministic for a fixed seed.
pub fn train_detector(
    records: &[DatasetRecord],
    cfg: &DetectorTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainedDetector> {
    ensure_arg!(!records.is_empty(), "detector training needs a nonempty dataset");
    ensure_arg!(cfg.batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::<f32>::new();
    let arch = Detector::register(&mut params, &mut rng);
    let mut grads = params.zeros_like();
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&DatasetRecord> = (0..cfg.batch_size)
            .map(|_| &records[rng.gen_range(0..records.len())])
            .collect();
        let images: Vec<&Tensor<f32>> = batch.iter().map(|r| &r.target_image).collect();
        let cache = arch.forward(&params, &Act::from_samples(&images));
        let targets: Vec<HeatmapStack<f32>> = batch
            .iter()
            .map(|r| render_gt_heatmaps(&r.scene, cfg.sigma))
            .collect();
        let target_refs: Vec<&Tensor<f32>> = targets.iter().map(|h| &h.maps).collect();
        let target = Act::from_samples(&target_refs);
        let numel = target.data.len() as f64;
        let mut d_out = cache.out.zeros_like();
        let mut loss = 0.0;
        let scale = (2.0 / numel) as f32;
        for ((d, &o), &t) in d_out.data.iter_mut().zip(&cache.out.data).zip(&target.data) {
            let r = o - t;
            loss += (r as f64) * (r as f64);
            *d = scale * r;
        }
        loss /= numel;
        losses.push(loss);
        on_step(step, loss);
        grads.fill_zero();
        arch.backward(&params, &cache, &d_out, Some(&mut grads));
        opt.step(&mut params, &grads);
    }
    Ok(TrainedDetector { params, losses })
}

/// File name used for a trained detector inside its output directory.
pub const DETECTOR_FILE: &str = "detector.ecnt";

/// Writes detector parameters in the checkpoint container format.
pub fn save_detector(params: &Params<f32>, path: &std::path::Path) -> Result<()> {
    let mut c = crate::checkpoint::Container::default();
    c.push_params("", params);
    c.write(path)
}

/// Reads detector parameters written by [`save_detector`]. A directory is
/// resolved to the [`DETECTOR_FILE`] inside it.
pub fn load_detector(path: &std::path::Path) -> Result<Params<f32>> {
    let file = if path.is_dir() { path.join(DETECTOR_FILE) } else { path.to_path_buf() };
    let c = crate::checkpoint::Container::read(&file)?;
    let mut p = init_detector::<f32>(0);
    c.fill_params("", &mut p)?;
    Ok(p)
}
