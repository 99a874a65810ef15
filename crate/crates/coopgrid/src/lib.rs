//! Cooperative-perception sandbox: evidential semantic grids, a deterministic
//! 2D micro-world with occlusion-aware rendering, a short-term visual memory,
//! a request-for-perception MDP with shaped rewards, Monte-Carlo sequence-model
//! losses over diagonal Gaussians, and a suite of request policies.
//!
//! The crate is organized around one struct per concern:
//!
//! - [`mass`]: per-cell mass functions over the 5-class frame plus ignorance,
//!   with discounting, contour extraction, and the conjunctive fusion rule.
//! - [`grid`]: ego-centered semantic grids of mass functions and their file
//!   format.
//! - [`world`]: the seedable micro-world producing complete and partial
//!   (field-of-view and line-of-sight limited) observations each step.
//! - [`memory`]: the visual memory that re-expresses remembered cells under
//!   ego motion, ages them, and fuses them with fresh perception.
//! - [`mdp`]: bounding-box request actions, the spatial value filter, reward
//!   density and request reward, and the environment transition.
//! - [`vae`]: diagonal-Gaussian sequence-model losses (belief, smoothing,
//!   transition, emission heads), their analytic gradients, and an exact
//!   linear-Gaussian filter/smoother.
//! - [`policy`]: broadcast / silent / random / greedy / oracle policies and a
//!   cross-entropy-method trainer for a small parametric policy.
//! - [`metrics`]: episode records, information-gain and request-size metrics,
//!   mass score, and change accuracy.
//! - [`config`]: the experiment configuration file schema.
//! - [`checkpoint`]: named-array parameter checkpoints.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod mass;
pub mod mdp;
pub mod memory;
pub mod metrics;
pub mod policy;
pub mod vae;
pub mod world;

use thiserror::Error;

/// Unified error type for fallible operations across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid mass function: {0}")]
    Mass(String),
    #[error("grid dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
