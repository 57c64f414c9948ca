//! otrlab: a desk-scale laboratory for studying token-level rollout
//! fine-tuning objectives on tiny language models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a minimal reverse-mode autodiff engine over dense `f64`
//!   tensors (define-by-run tape, explicit op set, no broadcasting).
//! - [`gradcheck`]: central-difference gradient verification for any scalar
//!   function built on the engine.
//! - [`rng`]: counter-based deterministic random streams; every stochastic
//!   event is keyed, never drawn from shared mutable state.
//! - [`model`]: tiny causal language models (a pre-norm transformer and a
//!   tabular bigram) expressed through the autodiff engine.
//! - [`loss`]: the training objectives — standard fine-tuning (SFT), a
//!   probability-weighted variant (DFT), and the one-token-rollout (OTR)
//!   Monte Carlo objective — plus the exact-expectation oracle used to
//!   verify the stochastic estimator.
//! - [`optim`]: AdamW with decoupled weight decay and a warmup+cosine
//!   learning-rate schedule.
//! - [`data`]: character vocabularies, synthetic arithmetic/copy tasks, and
//!   JSONL corpus loading.
//! - [`checkpoint`]: a plain-text manifest + little-endian `f64` blob format
//!   with byte-exact round-trips.
//! - [`train`]: the training loop (batching, clipping, metrics, evaluation,
//!   resume).
//! - [`verify`]: self-check suites (gradient checks, estimator
//!   unbiasedness, objective equivalences) shared by the CLI and the test
//!   suite.
//! - [`config`] / [`cli`]: JSON run configuration and the command-line
//!   front end.
//!
//! Determinism is a design constraint throughout: identical configuration
//! and seed produce byte-identical metrics and checkpoints on any platform
//! with IEEE-754 doubles.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
