//! Desk-scale dataset distillation over analytically tractable targets.
//!
//! The library synthesizes a small surrogate dataset from a labeled
//! Gaussian-mixture target by running a guided reverse-diffusion sampler.
//! Two guidance signals steer every sampling step:
//!
//! - **semantic matching** — classifier-free guidance driven by a
//!   time-staged dynamic soft label ([`semantic`], [`denoiser`]);
//! - **distribution matching** — the gradient of an entropic
//!   optimal-transport cost between the partially built surrogate set and a
//!   quantized approximation of the per-class target distribution
//!   ([`transport`], [`quantization`], [`guidance`]).
//!
//! Because the target is a Gaussian mixture, the noise predictor is exact
//! ([`denoiser::AnalyticDenoiser`]), which makes every guidance identity
//! checkable against independent oracles (finite differences, exact
//! transport solvers, brute-force metrics). [`checks`] bundles those oracle
//! suites; the `distill` binary exposes them as `distill check <suite>`.
//!
//! Modules mirror the processing stages:
//!
//! | module | responsibility |
//! |--------|----------------|
//! | [`numerics`] | mixture densities, scores, posteriors, seeded RNG streams |
//! | [`diffusion`] | noise schedule, DDIM stepping, generic guided step |
//! | [`denoiser`] | exact conditional/unconditional noise prediction, CFG |
//! | [`semantic`] | dynamic soft-label schedule and label rescaling |
//! | [`transport`] | cost matrices, Sinkhorn, exact small-instance solvers |
//! | [`quantization`] | k-means / mean / density-sampled target approximations |
//! | [`guidance`] | per-step distribution-matching gradient assembly |
//! | [`pipeline`] | per-class greedy sampling loop, dataset assembly |
//! | [`metrics`] | transport distance, coverage, diversity, alignment, k-NN |
//! | [`cli`] | subcommands, config files, CSV/JSON artifacts |

use thiserror::Error;

pub mod checks;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod quantization;
pub mod semantic;
pub mod transport;


/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A class label outside the mixture's label set.
    #[error("unknown class label {0}")]
    UnknownLabel(usize),

    /// A scalar or structural parameter fails its precondition.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Covariance rejected at construction (asymmetric or near-singular).
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    /// Mass vector is not a probability vector.
    #[error("masses must be nonnegative and sum to 1 (sum = {0})")]
    NotNormalized(f64),

    /// Timestep outside the schedule's `1..=T` range.
    #[error("timestep {t} outside schedule range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    /// The reverse-step coefficient has a negative radicand.
    #[error("invalid eta/schedule pair at t={t}: negative radicand in step coefficient")]
    NegativeRadicand { t: usize },

    /// The plain scaling Sinkhorn iteration underflowed.
    #[error("scaling Sinkhorn underflowed (epsilon too small for this cost range); use the log-domain variant")]
    ScalingUnderflow,

    /// Exact transport solver size guard.
    #[error("instance too large for the exact solver: {n}x{m} exceeds {limit} cells")]
    ExactSolverTooLarge { n: usize, m: usize, limit: usize },

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Inputs do not come from the claimed source.
    #[error("provenance mismatch: {0}")]
    Provenance(String),

    /// Malformed configuration file or flag.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent data file.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
