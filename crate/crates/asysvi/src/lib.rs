//! Serial and asynchronous-parallel stochastic variational inference for
//! conjugate exponential-family models, with latent Dirichlet allocation as
//! the concrete model.
//!
//! The crate is organised around a small set of layers:
//!
//! - [`expfam`]: global variational parameters, learning-rate schedules and
//!   the generic natural-gradient update machinery shared by all drivers.
//! - [`lda`]: the LDA instantiation: local coordinate ascent, sufficient
//!   statistics, stochastic natural gradients and held-out evaluation.
//! - [`corpus`]: bag-of-words corpora (UCI format), train/test splitting and
//!   synthetic-corpus persistence.
//! - [`serial`]: the single-threaded online driver, which doubles as the
//!   determinism baseline for the asynchronous engine.
//! - [`engine`]: the bounded-staleness master-worker engine, in a
//!   deterministic simulated mode and a real threaded mode.
//! - [`metrics`]: per-checkpoint run metrics and CSV emission.

pub mod corpus;
pub mod engine;
mod error;
pub mod expfam;
pub mod lda;
pub mod math;
pub mod metrics;
pub mod serial;

pub use error::{Error, Result};
