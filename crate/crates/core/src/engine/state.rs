use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::checkpoint::{bytes_to_f64s, f64s_to_bytes, Block, Container};
use crate::denoiser::init_denoiser;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::schedule::{default_schedule, NoiseSchedule};
use crate::sgi::init_sgi;
use crate::tensor::Params;
use crate::world::mix_seed;

/// Everything needed to continue training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub config: TrainConfig,
    pub denoiser: Params<f32>,
    pub sgi: Params<f32>,
    /// Frozen; never updated by training.
    pub detector: Params<f32>,
    pub opt_denoiser: Adam<f32>,
    pub opt_sgi: Adam<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, detector: Params<f32>) -> Result<Self> {
        config.validate()?;
        let denoiser = init_denoiser(mix_seed(config.seed, 1));
        let sgi = init_sgi(mix_seed(config.seed, 2));
        Ok(TrainState {
            step: 0,
            opt_denoiser: Adam::new(&denoiser, config.learning_rate),
            opt_sgi: Adam::new(&sgi, config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3)),
            config,
            denoiser,
            sgi,
            detector,
        })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        default_schedule(self.config.loss.steps).expect("validated step count")
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push(Block::scalar("step", self.step as f64));
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let words = bytes_to_f64s(&json);
        c.push(Block::new("config.json", &[words.len()], words));
        let seed = self.rng.get_seed();
        let seed_words: Vec<f64> = seed
            .chunks(4)
            .map(|w| u32::from_le_bytes(w.try_into().expect("4 bytes")) as f64)
            .collect();
        c.push(Block::new("rng.seed", &[8], seed_words));
        c.push(Block::new("rng.stream", &[2], split_u64(self.rng.get_stream()).to_vec()));
        let pos = self.rng.get_word_pos();
        let pos_words = [split_u64(pos as u64), split_u64((pos >> 64) as u64)].concat();
        c.push(Block::new("rng.word_pos", &[4], pos_words));
        c.push_params("", &self.denoiser);
        c.push_params("", &self.sgi);
        c.push_params("", &self.detector);
        for (name, opt) in [("denoiser", &self.opt_denoiser), ("sgi", &self.opt_sgi)] {
            c.push(Block::scalar(format!("adam.{name}.t"), opt.t as f64));
            c.push_params("adam.m.", &opt.m);
            c.push_params("adam.v.", &opt.v);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bytes = f64s_to_bytes(&c.require("config.json")?.data)
            .ok_or_else(|| Error::CheckpointMismatch("config block is malformed".into()))?;
        let config: TrainConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CheckpointMismatch(format!("config block: {e}")))?;
        config.validate()?;
        let mut state = TrainState::new(config, crate::keypoint::init_detector(0))?;
        state.step = c.scalar("step")? as u64;
        c.fill_params("", &mut state.denoiser)?;
        c.fill_params("", &mut state.sgi)?;
        c.fill_params("", &mut state.detector)?;
        for (name, opt) in [("denoiser", &mut state.opt_denoiser), ("sgi", &mut state.opt_sgi)] {
            opt.t = c.scalar(&format!("adam.{name}.t"))? as u64;
            c.fill_params("adam.m.", &mut opt.m)?;
            c.fill_params("adam.v.", &mut opt.v)?;
        }
        let words = |name: &str, n: usize| -> Result<Vec<u32>> {
            let b = c.require(name)?;
            if b.data.len() != n || b.data.iter().any(|&w| w.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&w)) {
                return Err(Error::CheckpointMismatch(format!("block `{name}` is malformed")));
            }
            Ok(b.data.iter().map(|&w| w as u32).collect())
        };
        let mut seed = [0u8; 32];
        for (dst, w) in seed.chunks_mut(4).zip(words("rng.seed", 8)?) {
            dst.copy_from_slice(&w.to_le_bytes());
        }
        let stream = words("rng.stream", 2)?;
        let pos = words("rng.word_pos", 4)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(join_u64(stream[0], stream[1]));
        rng.set_word_pos(join_u64(pos[0], pos[1]) as u128 | (join_u64(pos[2], pos[3]) as u128) << 64);
        state.rng = rng;
        Ok(state)
    }

    /// Digest of the encoded checkpoint.
    pub fn digest(&self) -> u64 {
        self.to_container().digest()
    }
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: u32, hi: u32) -> u64 {
    lo as u64 | (hi as u64) << 32
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_container().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_container(&Container::read(path)?)
}
