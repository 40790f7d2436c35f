//! Geometric autoencoder for conformational ensembles of 3D polygonal chains.
//!
//! The model encodes a chain conformation through two separate branches:
//! an *intrinsic* branch that sees only contact-graph edge lengths, and an
//! *extrinsic* branch that sees only backbone bond orientations. Each branch
//! is pooled into a Tanh-bounded latent code; a graph decoder maps the
//! concatenated code back to centered 3D coordinates.
//!
//! Modules, bottom-up:
//!
//! - [`trajdata`]: dataset format, synthetic ensembles and splits
//! - [`geom`]: contact/backbone graphs, input signals, Kabsch alignment, metrics
//! - [`adiff`]: dense tensors with tape-based reverse-mode differentiation
//! - [`nnops`]: FPS hierarchy, radius graphs, edge convolution, graph attention
//! - [`progae`]: model assembly, loss and reconstruction
//! - [`train`]: ADAM training loop, evaluation, checkpoints, transfer
//! - [`latent`]: CCA, one-shot classification, probes, interpolation

pub mod adiff;
pub mod error;
pub mod geom;
pub mod latent;
pub mod nnops;
pub mod progae;
pub mod train;
pub mod trajdata;

pub use error::{Error, Result};
pub use geom::{Point3, RigidTransform};
pub use latent::{CcaResult, EmbeddingMatrix, ProbeResult};
pub use progae::{LatentCode, ModelConfig, ProGaeModel, Reconstruction};
pub use train::{EvalReport, TrainConfig};

pub use trajdata::{ConformationFrame, DatasetMeta, SplitAssignment, SyntheticConfig, TrajectoryDataset};

/// Environment variable capping evaluation fan-out.
pub const THREADS_ENV: &str = "CONFORMER_FORGE_THREADS";

/// Worker count for parallel evaluation, read from [`THREADS_ENV`] (default 1).
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
