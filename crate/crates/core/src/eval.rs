//! Keypoint-fidelity evaluation of generated images: PCK at several radii,
//! normalized mean error and figure-count error, measured through the frozen
//! detector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Fnv1a;
use crate::engine::{sample_batch, SampleRequest, TrainState};
use crate::error::{ensure_arg, Error, Result};
use crate::keypoint::{detect_batch, soft_argmax, HeatmapStack};
use crate::tensor::{Params, Tensor};
use crate::world::{mix_seed, read_dataset, DatasetRecord, SceneSpec, KEYPOINTS_PER_FIGURE, MAX_FIGURES, SLOTS};

/// PCK radii reported by [`evaluate_run`], in pixels.
pub const PCK_RADII: [f64; 3] = [1.0, 2.0, 3.0];
/// Default confidence threshold for counting figures.
pub const COUNT_THRESHOLD: f64 = 0.5;
const SAMPLE_CHUNK: usize = 64;

fn distances(pred: &[[f64; 2]], gt: &[Option<[f64; 2]>]) -> Result<Vec<f64>> {
    ensure_arg!(pred.len() == gt.len(), "prediction has {} slots, ground truth {}", pred.len(), gt.len());
    Ok(pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| g.map(|g| (p[0] - g[0]).hypot(p[1] - g[1])))
        .collect())
}

/// Fraction of present slots predicted within `radius` pixels.
pub fn pck_metric(pred: &[[f64; 2]], gt: &[Option<[f64; 2]>], radius: f64) -> Result<f64> {
    let d = distances(pred, gt)?;
    ensure_arg!(!d.is_empty(), "no present keypoints");
    Ok(d.iter().filter(|&&x| x <= radius).count() as f64 / d.len() as f64)
}

/// Diagonal of the bounding box of every keypoint in `scene`.
pub fn bbox_diagonal(scene: &SceneSpec) -> f64 {
    let pts = scene.figures.iter().flat_map(|f| f.keypoints.iter());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

/// Mean keypoint distance over present slots, divided by the scene's
/// keypoint bounding-box diagonal.
pub fn nme_metric(pred: &[[f64; 2]], gt: &[Option<[f64; 2]>], scene: &SceneSpec) -> Result<f64> {
    let diag = bbox_diagonal(scene);
    ensure_arg!(diag > 0.0 && diag.is_finite(), "scene has a degenerate bounding box");
    let d = distances(pred, gt)?;
    ensure_arg!(!d.is_empty(), "no present keypoints");
    Ok(d.iter().sum::<f64>() / d.len() as f64 / diag)
}

/// Figure blocks (5 channels each) whose channel maxima reach `threshold` in
/// at least 3 of 5 channels.
pub fn predicted_count(maps: &HeatmapStack<f32>, threshold: f64) -> usize {
    (0..MAX_FIGURES)
        .filter(|f| {
            (0..KEYPOINTS_PER_FIGURE)
                .filter(|k| {
                    let ch = maps.channel(f * KEYPOINTS_PER_FIGURE + k);
                    ch.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64 >= threshold
                })
                .count()
                >= 3
        })
        .count()
}

/// `|predicted_count - gt_count|`.
pub fn count_error(pred_maps: &HeatmapStack<f32>, gt_count: usize, conf_threshold: f64) -> f64 {
    (predicted_count(pred_maps, conf_threshold) as f64 - gt_count as f64).abs()
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub seed: u64,
    pub gt_count: usize,
    pub pred_count: usize,
    /// Per-slot distance in pixels; `None` for absent slots.
    pub distances: Vec<Option<f64>>,
    pub nme: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// PCK keyed by radius in pixels.
    pub pck_at: BTreeMap<String, f64>,
    pub nme: f64,
    pub count_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub mode: String,
    pub guidance: Option<f64>,
    /// Digest of the detector parameters used for evaluation.
    pub detector_digest: String,
    pub checkpoint_digest: String,
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    pub fn pck(&self, radius: f64) -> Option<f64> {
        self.pck_at.get(&radius_key(radius)).copied()
    }

    /// Digest of the JSON encoding.
    pub fn digest(&self) -> u64 {
        Fnv1a::digest(&serde_json::to_vec(self).expect("report serializes"))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,seed,gt_count,pred_count,nme");
        for k in 0..SLOTS {
            let _ = write!(s, ",d{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{},{}", r.index, r.seed, r.gt_count, r.pred_count, r.nme);
            for d in &r.distances {
                match d {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

fn radius_key(r: f64) -> String {
    format!("{r}")
}

/// Pooled PCK of the detector on the records' clean target images: how well
/// the evaluation instrument itself localizes keypoints.
pub fn detector_pck(detector: &Params<f32>, records: &[DatasetRecord], radius: f64) -> Result<f64> {
    ensure_arg!(!records.is_empty(), "detector evaluation needs a nonempty set");
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in records.chunks(SAMPLE_CHUNK) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.target_image).collect();
        for (r, m) in chunk.iter().zip(detect_batch(&images, detector)) {
            for (d, g) in soft_argmax(&m).iter().zip(r.scene.slots()) {
                if let Some(g) = g {
                    total += 1;
                    hit += ((d.xy[0] - g[0]).hypot(d.xy[1] - g[1]) <= radius) as usize;
                }
            }
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Samples one image for each of the first `n` records (record `i` uses seed
/// `mix_seed(seed, i)`), decodes keypoints with the checkpoint's detector and
/// aggregates the metrics. PCK is pooled over all present keypoints; NME and
/// count error are means over samples.
pub fn evaluate_records(
    ckpt: &TrainState,
    records: &[DatasetRecord],
    n: usize,
    seed: u64,
    guidance: Option<f64>,
) -> Result<EvalReport> {
    ensure_arg!(!records.is_empty() && n > 0, "evaluation needs a nonempty validation set");
    ensure_arg!(n <= records.len(), "asked for {n} samples from {} records", records.len());
    let records = &records[..n];
    let mut rows = Vec::with_capacity(n);
    for (c, chunk) in records.chunks(SAMPLE_CHUNK).enumerate() {
        let base = c * SAMPLE_CHUNK;
        let reqs: Vec<SampleRequest> = chunk
            .iter()
            .enumerate()
            .map(|(i, r)| SampleRequest {
                cond: &r.cond_image,
                caption: &r.caption,
                scene: &r.scene,
                seed: mix_seed(seed, (base + i) as u64),
            })
            .collect();
        let images: Vec<Tensor<f32>> = sample_batch(ckpt, &reqs, guidance)?
            .into_iter()
            .map(|x| x.map(|v| v.clamp(0.0, 1.0)))
            .collect();
        let maps = detect_batch(&images.iter().collect::<Vec<_>>(), &ckpt.detector);
        for (i, (r, m)) in chunk.iter().zip(&maps).enumerate() {
            let pred: Vec<[f64; 2]> = soft_argmax(m).iter().map(|d| d.xy).collect();
            let gt = r.scene.slots();
            let distances: Vec<Option<f64>> = pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| g.map(|g| (p[0] - g[0]).hypot(p[1] - g[1])))
                .collect();
            rows.push(SampleRow {
                index: base + i,
                seed: reqs[i].seed,
                gt_count: r.scene.figures.len(),
                pred_count: predicted_count(m, COUNT_THRESHOLD),
                nme: nme_metric(&pred, &gt, &r.scene)?,
                distances,
            });
        }
    }
    let all: Vec<f64> = rows.iter().flat_map(|r| r.distances.iter().flatten().copied()).collect();
    let pck_at = PCK_RADII
        .iter()
        .map(|&rad| {
            let hit = all.iter().filter(|&&d| d <= rad).count();
            (radius_key(rad), hit as f64 / all.len() as f64)
        })
        .collect();
    let mean = |f: &dyn Fn(&SampleRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        pck_at,
        nme: mean(&|r| r.nme),
        count_error: mean(&|r| (r.pred_count as f64 - r.gt_count as f64).abs()),
        n_samples: rows.len(),
        seed,
        mode: ckpt.config.mode.name().into(),
        guidance,
        detector_digest: format!("{:016x}", ckpt.detector.digest()),
        checkpoint_digest: format!("{:016x}", ckpt.digest()),
        rows,
    })
}

/// [`evaluate_records`] on a dataset directory, writing the report into
/// `out_dir` when given. Nothing is written on error.
pub fn evaluate_run(
    ckpt: &TrainState,
    val_dataset: &Path,
    n: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let records = read_dataset(val_dataset)?;
    let report = evaluate_records(ckpt, &records, n, seed, None)?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}
