//! Blind-deconvolution toolkit: the classical blind Richardson-Lucy
//! iteration and its deep-unfolded, self-supervised variant, with a
//! purpose-built reverse-mode autodiff tape, quality metrics, dataset
//! plumbing, and a reproducible CLI.

pub mod autodiff;
pub mod benchmark;
pub mod cli;
pub mod durl;
pub mod error;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod rl;
pub mod synth;

pub use error::{DeconvError, Result};
pub use grid::{BoundaryMode, Grid, NoiseSpec};
