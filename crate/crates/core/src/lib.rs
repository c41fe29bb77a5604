//! Low-complexity acoustic scene classification.
//!
//! The pipeline turns mono 44.1 kHz audio into a normalized 64-band
//! Gammatone time-frequency matrix ([`dsp`]), classifies it with a compact
//! residual CNN built from squeeze-excitation blocks ([`nn`]), trains it with
//! focal loss and Adam under a plateau schedule ([`train`]), and exports it in
//! a size-accounted binary format with optional binary16 weights ([`modelio`]).
//! [`data`] handles DCASE-style metadata, WAV decoding, feature caching and a
//! deterministic synthetic corpus for desk-scale experiments.
//!
//! Batch-level work (per-item forward/backward passes, feature extraction
//! across clips) runs on rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise. Reductions always happen in item
//! order, so both paths produce bit-identical results.

pub mod data;
pub mod dsp;
mod error;
pub mod exec;
pub mod modelio;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
