//! Cascade HMM classification for multiyear time series.
//!
//! A small transformer encoder scores each year's observation series; an
//! HMM layer made of per-year-pair joint label priors combines those scores
//! through forward and backward cascades, and the fused result gives each
//! year a posterior that conditions on every year's observations.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod math;
pub mod training;

pub use error::{Error, Result};
