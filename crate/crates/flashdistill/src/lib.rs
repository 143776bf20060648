//! Few-step distillation of equivariant point-cloud diffusion models.
//!
//! The library trains a multi-step denoising teacher on toy molecules, then
//! distills it into a generator that needs only a handful of network
//! evaluations per sample. Distillation matches the student's output
//! distribution to the teacher's through score differences, with an optional
//! discriminator-derived Jensen-Shannon weighting, and samples the student on
//! a respaced noise grid instead of a uniform one.
//!
//! Modules are layered bottom-up: `geom` (point sets, rotations), `schedule`
//! (noise schedules and step grids), `netgrad` (flat parameters, gradient
//! checking, checkpoints), `egnn` (the equivariant backbone), `diffusion`
//! (corruption, denoising loss, samplers), `distill` (divergence weights and
//! the distillation gradient), `disc` (feature-space discriminator), `oracle`
//! (closed-form Gaussian references), `toymol` (toy chemistry), `trainer`
//! (training loops), and `cli` (command-line entry points).

pub mod cli;
pub mod disc;
pub mod distill;
pub mod diffusion;
pub mod egnn;
pub mod geom;
pub mod netgrad;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod toymol;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type. `InvalidArg` maps to CLI exit code 2 and
/// `Numeric` to exit code 3; everything else is an I/O or format failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
