//! The synthetic stick-figure world: scene sampling, rendering, captions and
//! dataset persistence.
//!
//! Figure `i` of a scene is always placed in vertical band `i` of the canvas
//! (left, middle, right), so a figure's slot index is a function of where it
//! is drawn.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Manifest, DATASET_FORMAT_VERSION, VOCAB_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Latent;
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;
pub const KEYPOINTS_PER_FIGURE: usize = 5;
pub const MAX_FIGURES: usize = 3;
/// Number of (figure, keypoint) slots.
pub const SLOTS: usize = KEYPOINTS_PER_FIGURE * MAX_FIGURES;
pub const IMAGE_SHAPE: [usize; 3] = [1, CANVAS, CANVAS];

/// Keypoints are snapped to this grid so integer translations stay exact.
const COORD_QUANTUM: f64 = 1.0 / 256.0;
const MAX_ATTEMPTS: usize = 100;
const BLOB_SIGMA: f64 = 1.0;
const MIN_CENTER_DISTANCE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Thin,
    Thick,
}

impl Style {
    pub fn stroke_width(self) -> f64 {
        match self {
            Style::Thin => 1.0,
            Style::Thick => 2.0,
        }
    }
}

/// Keypoint order within a figure.
pub const KEYPOINT_NAMES: [&str; KEYPOINTS_PER_FIGURE] = ["head", "hand_l", "hand_r", "foot_l", "foot_r"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    /// `(x, y)` in pixel units, ordered as [`KEYPOINT_NAMES`].
    pub keypoints: [[f64; 2]; KEYPOINTS_PER_FIGURE],
    pub style: Style,
}

impl Figure {
    /// The torso midpoint, halfway between the head and the mean of the feet.
    pub fn torso(&self) -> [f64; 2] {
        let [head, _, _, fl, fr] = self.keypoints;
        let hip = [(fl[0] + fr[0]) / 2.0, (fl[1] + fr[1]) / 2.0];
        [(head[0] + hip[0]) / 2.0, (head[1] + hip[1]) / 2.0]
    }

    /// Limb segments: head to each hand, head to the torso midpoint, and the
    /// torso midpoint to each foot.
    pub fn limbs(&self) -> [([f64; 2], [f64; 2]); 5] {
        let [head, hl, hr, fl, fr] = self.keypoints;
        let m = self.torso();
        [(head, hl), (head, hr), (head, m), (m, fl), (m, fr)]
    }

    pub fn center(&self) -> [f64; 2] {
        let n = KEYPOINTS_PER_FIGURE as f64;
        let sx: f64 = self.keypoints.iter().map(|k| k[0]).sum();
        let sy: f64 = self.keypoints.iter().map(|k| k[1]).sum();
        [sx / n, sy / n]
    }
}

/// A scene of one to three figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub figures: Vec<Figure>,
}

impl SceneSpec {
    pub fn keypoint_count(&self) -> usize {
        self.figures.len() * KEYPOINTS_PER_FIGURE
    }

    /// Slot-aligned keypoints; `None` for absent slots.
    pub fn slots(&self) -> [Option<[f64; 2]>; SLOTS] {
        let mut out = [None; SLOTS];
        for (f, fig) in self.figures.iter().enumerate() {
            for (k, kp) in fig.keypoints.iter().enumerate() {
                out[f * KEYPOINTS_PER_FIGURE + k] = Some(*kp);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.figures.is_empty() || self.figures.len() > MAX_FIGURES {
            return Err(Error::Argument(format!("scene has {} figures", self.figures.len())));
        }
        for fig in &self.figures {
            for kp in &fig.keypoints {
                if !in_canvas(*kp) {
                    return Err(Error::Argument(format!("keypoint {kp:?} outside canvas")));
                }
            }
        }
        Ok(())
    }
}

fn in_canvas(p: [f64; 2]) -> bool {
    let hi = (CANVAS - 1) as f64;
    (0.0..=hi).contains(&p[0]) && (0.0..=hi).contains(&p[1])
}

/// Ranges used when sampling scenes. All lengths are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub min_figures: usize,
    pub max_figures: usize,
    /// Horizontal jitter of a figure's torso around its band center.
    pub center_jitter: f64,
    pub center_y: [f64; 2],
    /// Vertical distance from torso to head.
    pub head_len: [f64; 2],
    pub head_dx: [f64; 2],
    /// Horizontal distance from torso to each hand.
    pub arm_dx: [f64; 2],
    /// Vertical offset of the hands relative to the torso (negative is up).
    pub arm_dy: [f64; 2],
    pub leg_dx: [f64; 2],
    pub leg_len: [f64; 2],
    pub thick_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            min_figures: 1,
            max_figures: 3,
            center_jitter: 1.0,
            center_y: [12.0, 17.0],
            head_len: [5.0, 8.0],
            head_dx: [-1.0, 1.0],
            arm_dx: [2.0, 4.0],
            arm_dy: [-5.0, 1.0],
            leg_dx: [1.5, 3.5],
            leg_len: [6.0, 10.0],
            thick_probability: 0.5,
        }
    }
}

impl GenConfig {
    pub fn with_count(n: usize) -> Self {
        GenConfig {
            min_figures: n,
            max_figures: n,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = 1 <= self.min_figures && self.min_figures <= self.max_figures && self.max_figures <= MAX_FIGURES;
        if !ok {
            return Err(Error::Generation(format!(
                "figure count range [{}, {}] must lie in [1, {MAX_FIGURES}]",
                self.min_figures, self.max_figures
            )));
        }
        let ranges = [
            self.center_y,
            self.head_len,
            self.head_dx,
            self.arm_dx,
            self.arm_dy,
            self.leg_dx,
            self.leg_len,
        ];
        if ranges.iter().any(|r| !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]))
            || !self.center_jitter.is_finite()
            || self.center_jitter < 0.0
            || !(0.0..=1.0).contains(&self.thick_probability)
        {
            return Err(Error::Generation("malformed generation ranges".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn quantize(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

fn band_center(i: usize) -> f64 {
    (i as f64 + 0.5) * CANVAS as f64 / MAX_FIGURES as f64
}

fn sample_figure(rng: &mut ChaCha8Rng, band: usize, cfg: &GenConfig) -> Result<Figure> {
    for _ in 0..MAX_ATTEMPTS {
        let jitter = if cfg.center_jitter > 0.0 {
            rng.gen_range(-cfg.center_jitter..cfg.center_jitter)
        } else {
            0.0
        };
        let cx = band_center(band) + jitter;
        let cy = draw(rng, cfg.center_y);
        let head = [cx + draw(rng, cfg.head_dx), cy - draw(rng, cfg.head_len)];
        let (ax_l, ay_l) = (draw(rng, cfg.arm_dx), draw(rng, cfg.arm_dy));
        let (ax_r, ay_r) = (draw(rng, cfg.arm_dx), draw(rng, cfg.arm_dy));
        let (lx_l, ll_l) = (draw(rng, cfg.leg_dx), draw(rng, cfg.leg_len));
        let (lx_r, ll_r) = (draw(rng, cfg.leg_dx), draw(rng, cfg.leg_len));
        let style = if rng.gen_bool(cfg.thick_probability) {
            Style::Thick
        } else {
            Style::Thin
        };
        let raw = [
            head,
            [cx - ax_l, cy + ay_l],
            [cx + ax_r, cy + ay_r],
            [cx - lx_l, cy + ll_l],
            [cx + lx_r, cy + ll_r],
        ];
        let keypoints = raw.map(|p| [quantize(p[0]), quantize(p[1])]);
        if keypoints.iter().all(|&p| in_canvas(p)) {
            return Ok(Figure { keypoints, style });
        }
    }
    Err(Error::Generation(format!(
        "no in-canvas figure for band {band} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Samples a scene deterministically from `seed`.
pub fn sample_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_figures..=cfg.max_figures);
    for _ in 0..MAX_ATTEMPTS {
        let figures = (0..count)
            .map(|band| sample_figure(&mut rng, band, cfg))
            .collect::<Result<Vec<_>>>()?;
        if separated(&figures) {
            return Ok(SceneSpec { figures });
        }
    }
    Err(Error::Generation(format!(
        "figure centers closer than {MIN_CENTER_DISTANCE} px after {MAX_ATTEMPTS} attempts"
    )))
}

fn separated(figures: &[Figure]) -> bool {
    figures.iter().enumerate().all(|(i, a)| {
        figures[i + 1..].iter().all(|b| {
            let (ca, cb) = (a.torso(), b.torso());
            (ca[0] - cb[0]).hypot(ca[1] - cb[1]) >= MIN_CENTER_DISTANCE
        })
    })
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Renders limbs as anti-aliased strokes and keypoints as unit-peak Gaussian
/// blobs; overlapping marks combine by maximum and the result lies in `[0, 1]`.
///
/// Pixel `(x, y)` samples the point `(x, y)` in keypoint coordinates.
pub fn render_image(scene: &SceneSpec) -> Latent<f32> {
    let mut img = vec![0.0f64; CANVAS * CANVAS];
    for fig in &scene.figures {
        let half = fig.style.stroke_width() / 2.0;
        let limbs = fig.limbs();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let p = [x as f64, y as f64];
                let mut v: f64 = 0.0;
                for (a, b) in &limbs {
                    let d = segment_distance(p, *a, *b);
                    v = v.max((half + 0.5 - d).clamp(0.0, 1.0));
                }
                for kp in &fig.keypoints {
                    let d2 = (p[0] - kp[0]).powi(2) + (p[1] - kp[1]).powi(2);
                    v = v.max((-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp());
                }
                let cell = &mut img[y * CANVAS + x];
                *cell = cell.max(v);
            }
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec(&IMAGE_SHAPE, data).expect("canvas shape")
}

pub const CAPTION_LEN: usize = 4;
pub const VOCAB_SIZE: usize = 16;
pub const TOKEN_PAD: u8 = 0;
pub const TOKEN_STYLE_THIN: u8 = 4;
pub const TOKEN_STYLE_THICK: u8 = 5;

pub fn token_count(n: usize) -> u8 {
    n as u8
}

/// A fixed-length caption over the 16-token vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: [u8; CAPTION_LEN],
}

impl TokenSeq {
    pub fn new(ids: [u8; CAPTION_LEN]) -> Result<Self> {
        if ids.iter().any(|&i| i as usize >= VOCAB_SIZE) || !(1..=3).contains(&ids[0]) {
            return Err(Error::Argument(format!("invalid caption ids {ids:?}")));
        }
        Ok(TokenSeq { ids })
    }
}

/// `[COUNT_n, STYLE_of_first_figure, PAD, PAD]`.
pub fn encode_caption(scene: &SceneSpec) -> TokenSeq {
    let style = match scene.figures.first().map(|f| f.style) {
        Some(Style::Thick) => TOKEN_STYLE_THICK,
        _ => TOKEN_STYLE_THIN,
    };
    TokenSeq {
        ids: [token_count(scene.figures.len()), style, TOKEN_PAD, TOKEN_PAD],
    }
}

/// One training example: the target image, its condition image (the same
/// skeleton rendering), caption and the ground-truth scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub scene: SceneSpec,
    pub target_image: Latent<f32>,
    pub cond_image: Latent<f32>,
    pub caption: TokenSeq,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn from_scene(scene: SceneSpec, seed: u64) -> Self {
        let target_image = render_image(&scene);
        DatasetRecord {
            cond_image: target_image.clone(),
            caption: encode_caption(&scene),
            target_image,
            scene,
            seed,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n` records; record `i` is a pure function of `(master_seed, i, cfg)`.
pub fn generate_dataset(master_seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<DatasetRecord>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = mix_seed(master_seed, i as u64);
            sample_scene(seed, cfg).map(|s| DatasetRecord::from_scene(s, seed))
        })
        .collect()
}
