//! Uncertainty-aware routing between a fast pairwise preference model and a
//! slow strong judge, with leave-one-out advantages for policy training.
//!
//! The preference model is a spectrally-normalized encoder followed by a
//! random-feature Gaussian-process head ([`sngp::GpHead`]). Pairs whose
//! uncertainty exceeds a threshold are escalated to a [`judge::Judge`] by the
//! [`router`], and routed reward differences feed the RLOO loop in [`rloo`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod rff;
pub mod judge;
pub mod report;
pub mod rloo;
pub mod router;
pub mod sngp;

pub use error::{Error, Result};

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
