//! A desk-scale laboratory for controllable diffusion: keypoint-annotation
//! injection into a caption context, and two-stage heatmap consistency
//! supervision, trained on a synthetic stick-figure world.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod eval;
pub mod keypoint;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod real;
pub mod schedule;
pub mod sgi;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Params, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/sgi.md")]
    mod sgi {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/persistence.md")]
    mod persistence {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
