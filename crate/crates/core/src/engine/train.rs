use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{MetricsLog, MetricsRow, TrainConfig, TrainState};
use crate::denoiser::Denoiser;
use crate::error::{ensure_arg, Error, Result};
use crate::keypoint::{render_gt_heatmaps, DEFAULT_HEATMAP_SIGMA};
use crate::losses::{objective, ClampMode, LossBreakdown, Objective};
use crate::nn::Act;
use crate::schedule::{diffuse, Latent};
use crate::sgi::{caption_context, tokenize_annotations, Sgi};
use crate::tensor::{Params, Tensor};
use crate::world::{read_dataset, DatasetRecord, CANVAS, IMAGE_SHAPE};

pub const CHECKPOINT_FILE: &str = "checkpoint.ecnt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "train_config.toml";

/// What one optimizer step saw.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// The step just completed (1-based).
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub stage_fraction_dff: f64,
    /// The timestep drawn for each record.
    pub ts: Vec<usize>,
}

/// Draws `t ~ U{0..steps-1}`, then standard-normal noise, from `rng`.
pub fn draw_time_and_noise<R: Rng>(rng: &mut R, steps: usize) -> (usize, Latent<f32>) {
    let t = rng.gen_range(0..steps);
    let eps = (0..CANVAS * CANVAS).map(|_| rng.sample(StandardNormal)).collect();
    (t, Tensor::from_vec(&IMAGE_SHAPE, eps).expect("image shape"))
}

/// One optimizer step on `batch`: draws a timestep and noise per record,
/// evaluates the mode's objective and updates the denoiser (and the SGI when
/// the mode uses it). The detector is never updated.
pub fn train_step(state: &mut TrainState, batch: &[&DatasetRecord]) -> Result<StepReport> {
    ensure_arg!(!batch.is_empty(), "empty batch");
    let mode = state.config.mode;
    let loss_cfg = mode.effective_loss(&state.config.loss);
    let sched = state.schedule();
    let steps = sched.steps();

    let mut ts = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len());
    let mut zts = Vec::with_capacity(batch.len());
    for r in batch {
        let (t, e) = draw_time_and_noise(&mut state.rng, steps);
        zts.push(diffuse(&r.target_image, t, &e, &sched)?);
        ts.push(t);
        eps.push(e);
    }

    let sgi = Sgi::arch();
    let mut fused = Vec::new();
    let mut ctx = Vec::with_capacity(batch.len() * 4 * 32);
    for r in batch {
        let raw = caption_context::<f32>(&r.caption).rows.into_data();
        if mode.uses_sgi() {
            let (emb, f) = sgi.forward(&state.sgi, &raw, &tokenize_annotations(&r.scene));
            ctx.extend_from_slice(&f.out);
            fused.push((emb, f));
        } else {
            ctx.extend(raw);
        }
    }

    let gts: Vec<Tensor<f32>> = batch
        .iter()
        .map(|r| render_gt_heatmaps(&r.scene, DEFAULT_HEATMAP_SIGMA).maps)
        .collect();
    let batch_act = |v: &[Tensor<f32>]| Act::from_samples(&v.iter().collect::<Vec<_>>());
    let zt = batch_act(&zts);
    let eps = batch_act(&eps);
    let conds: Vec<&Tensor<f32>> = batch.iter().map(|r| &r.cond_image).collect();
    let cond = Act::from_samples(&conds);
    let gt = batch_act(&gts);

    let den = Denoiser::arch();
    let cache = den.forward(&state.denoiser, &zt, &cond, &ts, &ctx);
    let out = objective(&Objective {
        zt: &zt,
        eps: &eps,
        eps_hat: &cache.out,
        ts: &ts,
        gt: &gt,
        detector: &state.detector,
        schedule: &sched,
        config: &loss_cfg,
        stage_override: mode.stage_override(),
        clamp: ClampMode::StraightThrough,
    })?;
    let step = state.step + 1;
    out.breakdown.check_finite(step)?;

    let mut g_den = state.denoiser.zeros_like();
    let g = den.backward(&state.denoiser, &cache, &out.d_eps_hat, Some(&mut g_den), false);
    state.opt_denoiser.step(&mut state.denoiser, &g_den);
    if mode.uses_sgi() {
        let mut g_sgi = state.sgi.zeros_like();
        let w = 4 * 32;
        for (i, (emb, f)) in fused.iter().enumerate() {
            sgi.backward(&state.sgi, emb, f, &g.d_ctx[i * w..(i + 1) * w], &mut g_sgi);
        }
        state.opt_sgi.step(&mut state.sgi, &g_sgi);
    }
    state.step = step;
    Ok(StepReport {
        step,
        breakdown: out.breakdown,
        stage_fraction_dff: out.stage_fraction_dff,
        ts,
    })
}

fn draw_batch<'a>(state: &mut TrainState, records: &'a [DatasetRecord]) -> Vec<&'a DatasetRecord> {
    (0..state.config.batch_size)
        .map(|_| &records[state.rng.gen_range(0..records.len())])
        .collect()
}

/// Trains in memory until `state.step == state.config.steps`. Batches are
/// drawn with replacement from `records`.
pub fn train_on_records(
    state: &mut TrainState,
    records: &[DatasetRecord],
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<()> {
    ensure_arg!(!records.is_empty(), "training needs a nonempty dataset");
    while state.step < state.config.steps {
        let batch = draw_batch(state, records);
        let report = train_step(state, &batch)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Trains on the dataset in `dataset`, writing `metrics.csv`, the resolved
/// configuration and `checkpoint.ecnt` into `out_dir`. An existing checkpoint
/// there is resumed, provided it was made with the same configuration (the
/// step count may grow) and detector.
pub fn train(
    dataset: &Path,
    detector: &Params<f32>,
    config: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&StepReport),
) -> Result<TrainState> {
    config.validate()?;
    let records = read_dataset(dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut state = if ckpt_path.exists() {
        let mut s = super::load_checkpoint(&ckpt_path)?;
        let same = TrainConfig { steps: config.steps, ..s.config.clone() } == *config;
        if !same {
            return Err(Error::CheckpointMismatch(format!(
                "{} was written with a different configuration",
                ckpt_path.display()
            )));
        }
        if s.detector.digest() != detector.digest() {
            return Err(Error::CheckpointMismatch("checkpoint was trained against a different detector".into()));
        }
        s.config.steps = config.steps;
        s
    } else {
        TrainState::new(config.clone(), detector.clone())?
    };
    let cfg_path = out_dir.join(CONFIG_FILE);
    let cfg_text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&cfg_path, cfg_text).map_err(|e| Error::io(&cfg_path, e))?;

    let mut log = MetricsLog::open(&out_dir.join(METRICS_FILE), state.step)?;
    let wall0 = log.rows().last().map_or(0.0, |r| r.wall_ms);
    let start = Instant::now();
    let (log_every, ckpt_every, last) = (config.log_every, config.ckpt_every, config.steps);
    train_on_records(&mut state, &records, |s, r| {
        progress(r);
        if r.step % log_every == 0 {
            log.append(MetricsRow {
                step: r.step,
                l_base: r.breakdown.l_base,
                l_h: r.breakdown.l_h,
                l_dc: r.breakdown.l_dc,
                l_total: r.breakdown.l_total,
                stage_fraction_dff: r.stage_fraction_dff,
                wall_ms: wall0 + start.elapsed().as_secs_f64() * 1e3,
            })?;
        }
        if r.step % ckpt_every == 0 || r.step == last {
            super::save_checkpoint(s, &ckpt_path)?;
        }
        Ok(())
    })?;
    if !ckpt_path.exists() || state.step == 0 {
        super::save_checkpoint(&state, &ckpt_path)?;
    }
    Ok(state)
}
