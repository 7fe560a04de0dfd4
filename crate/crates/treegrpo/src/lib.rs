//! Tree-structured group-relative policy optimization (GRPO) for diffusion
//! and flow-matching policies.
//!
//! The crate implements a complete small-scale training stack:
//!
//! * rollout trees that share a prefix and split into correlated branches at
//!   configured denoising steps ([`tree`], [`dynamics`]),
//! * a 2-D Gaussian-mixture toy task with a hand-differentiated velocity
//!   network so every gradient is exact and checkable ([`policy`]),
//! * reward fusion along tree paths, depth-wise advantage normalization and
//!   width/depth pruning of the gradient set ([`credit`], [`pruning`]),
//! * the clipped-ratio GRPO edge loss, a sequential-rollout baseline and an
//!   AdamW-style optimizer with EMA tracking ([`trainer`]),
//! * kernel two-sample statistics and distributional checks used by the
//!   test-suite and the `diversity` CLI subcommand ([`metrics`]),
//! * INI-style run configuration and CSV/JSON run outputs ([`config`],
//!   [`runio`]).
//!
//! Everything is driven by a single run seed through counter-based RNG
//! streams, so single-threaded runs are reproducible byte for byte.

pub mod config;
pub mod credit;
pub mod dynamics;
pub mod metrics;
pub mod policy;
pub mod pruning;
pub mod rng;
pub mod runio;
pub mod trainer;
pub mod tree;

/// Crate-wide error type. The CLI maps each variant to a stable exit code:
/// configuration errors exit with 2, numerical failures with 3, I/O with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
