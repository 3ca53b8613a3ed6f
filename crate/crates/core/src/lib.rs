//! Correlation-regime analysis of regional daily-count panels.
//!
//! The pipeline removes weekly reporting artifacts with an FFT band-stop
//! filter, converts counts to day-over-day returns, builds Pearson
//! correlation matrices over overlapping epochs, clusters those matrices with
//! k-means, and compares each cluster's eigenvalue spectrum with
//! random-matrix benchmarks.

pub mod clustering;
pub mod error;
pub mod figures;
pub mod matrix;
pub mod panel;
pub mod pipeline;
pub mod returns;
pub mod rmt;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
