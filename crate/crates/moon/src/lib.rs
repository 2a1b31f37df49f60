//! Multi-organ ordinal grading pipeline.
//!
//! Components: a dense tensor engine with reverse-mode differentiation, small
//! 3D conv+attention backbones per organ, a cross-organ feature interaction
//! block, ordinal + deep CCA losses, volumetric clinical priors, a synthetic
//! cohort generator, evaluation metrics with bootstrap confidence intervals,
//! and a deterministic training loop. See the `moon` binary for the CLI.

pub mod backbone;
pub mod cli;
pub mod cohort;
pub mod config;
pub mod losses;
pub mod ori;
pub mod metrics;
pub mod model;
pub mod mvol;
pub mod params;
pub mod priors;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use cli::run_cli;
pub use tensor::{backward, backward_seeded, Graph, Tensor, TensorError};
