//! Active level-set estimation over discrete candidate pools.
//!
//! The crate classifies every point of a finite pool as above or below a
//! threshold (fixed, or a fraction of the unknown maximum) while querying a
//! noisy oracle as few times as possible. An MC-dropout network provides the
//! posterior samples; acquisition functions score the pool from them. A
//! Gaussian-process Straddle baseline and a benchmark harness are included.

pub mod acquisition;
pub mod benchmarks;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod plot;
pub mod seeding;
pub mod surrogate;
pub mod tuning;

pub use error::{LseError, Result};
