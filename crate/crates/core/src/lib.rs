//! Minimum entropy coupling between two unpaired continuous datasets.
//!
//! Two conditional denoising diffusion models, `p(x | y)` and `p(y | x)`, are
//! initialized from unconditional models pretrained on each marginal and then
//! fine-tuned cooperatively: each model samples, the other scores the samples
//! with a Monte-Carlo conditional log-likelihood, and a clipped policy
//! gradient pushes the sampler towards pairs its partner finds predictable.
//! A KL anchor keeps each model close to its pretrained marginal and a
//! denoising update on generated pairs keeps the two joints consistent.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`numkit`] | tensors, tape autodiff, Adam, gradient clipping |
//! | [`denoiser`] | MLP noise predictor with a zero-initialized conditioning branch |
//! | [`diffusion`] | schedules, forward process, DDPM/DDIM samplers, loss, NLL estimator |
//! | [`mec`] | the alternating coupling loop, rewards, policy and anchor updates |
//! | [`metrics`] | FOSCTTM, k-NN accuracies, entropy estimates, discrete MEC oracle |
//! | [`data`] | CSV ingestion, normalization, synthetic tasks, checkpoints |

use thiserror::Error;

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod mec;
pub mod metrics;
pub mod numkit;
pub mod rng;

pub use data::{Checkpoint, Normalizer, SyntheticSpec, TabularDataset};
pub use denoiser::{CondInput, Denoiser, DenoiserConfig};
pub use diffusion::{DiffusionModel, NllWeighting, NoiseSchedule, PretrainConfig, SampleConfig, TrajectoryBatch};
pub use mec::{CouplingPair, CouplingTrainer, Phase, RLConfig, ReplayBuffer, StepDiagnostics};
pub use numkit::{AdamState, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data error at row {row}: {msg}")]
    DataRow { row: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint magic mismatch: found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what: what.to_string(), expected, got })
    }
}
