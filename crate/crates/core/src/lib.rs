//! Open-set recognition lab.
//!
//! * [`numerics`]: vectors, matrices and a rectifier MLP with an analytic
//!   backward pass and a finite-difference oracle.
//! * [`losses`]: entropic, objectosphere and intraspread-objectosphere
//!   losses with exact gradients.
//! * [`trainer`]: mini-batch SGD with per-epoch centroid refresh and
//!   new-class training on the merged dataset.
//! * [`datagen`]: seeded Gaussian-blob open-world datasets.
//! * [`eval`]: thresholded open-set metrics and the feature scatter plot.
//! * [`autolabel`]: box merge + slack post-processing, the threshold /
//!   morphology baseline segmenter, annotation and PGM files.
//! * [`gradcheck`]: randomized analytic-vs-numeric gradient comparison.
//! * [`cli`]: the command implementations behind the `osrlab` binary.

pub mod autolabel;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
