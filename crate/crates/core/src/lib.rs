//! Lightweight speech separation with group communication.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! recurrent layers built on it ([`layers`]), the dual-path pipeline
//! ([`dprnn`]) and its grouped variant ([`groupcomm`]), the full
//! encoder/separator/decoder model ([`separator`]), objectives and metrics,
//! an analytical complexity profiler and a deterministic trainer.

pub mod cli;
pub mod config;
pub mod dprnn;
pub mod error;
pub mod groupcomm;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod profiler;
pub mod separator;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
pub use tensor::Tensor;
