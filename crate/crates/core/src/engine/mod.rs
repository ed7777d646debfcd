//! Training, checkpoints, metric logs and sampling.

mod metrics;
mod sample;
mod state;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::losses::{LossConfig, Stage};

pub use metrics::{MetricsLog, MetricsRow, METRICS_HEADER};
pub use sample::{guided_sample, heatmap_consistency, sample_batch, sample_ddpm, SampleRequest};
pub use state::{load_checkpoint, save_checkpoint, TrainState};
pub use train::{draw_time_and_noise, train, train_on_records, train_step, StepReport, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Raw caption context, plain denoising loss.
    Base,
    /// Fused context and the heatmap-weighted loss; no consistency loss.
    SgiOnly,
    /// As `Full`, but always supervising the derived image.
    SgiDrv,
    /// The complete objective.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::SgiOnly, Mode::SgiDrv, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::SgiOnly => "sgi_only",
            Mode::SgiDrv => "sgi_drv",
            Mode::Full => "full",
        }
    }

    pub fn uses_sgi(self) -> bool {
        self != Mode::Base
    }

    /// The loss configuration this mode actually trains with.
    pub fn effective_loss(self, cfg: &LossConfig) -> LossConfig {
        match self {
            Mode::Base => LossConfig { lambda: 0.0, alpha: 0.0, ..cfg.clone() },
            Mode::SgiOnly => LossConfig { alpha: 0.0, ..cfg.clone() },
            Mode::SgiDrv | Mode::Full => cfg.clone(),
        }
    }

    pub fn stage_override(self) -> Option<Stage> {
        (self == Mode::SgiDrv).then_some(Stage::Drv)
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::Argument(format!("unknown mode `{s}` (base, sgi_only, sgi_drv, full)")))
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Write a metrics row every this many steps.
    pub log_every: u64,
    /// Write a checkpoint every this many steps (and at the end).
    pub ckpt_every: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            mode: Mode::Full,
            log_every: 100,
            ckpt_every: 1000,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.batch_size > 0, "batch_size must be positive");
        ensure_arg!(self.log_every > 0 && self.ckpt_every > 0, "log_every and ckpt_every must be positive");
        ensure_arg!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be finite and >= 0"
        );
        ensure_arg!(self.loss.steps >= 1, "the diffusion needs at least one step");
        self.loss.validate()
    }
}
