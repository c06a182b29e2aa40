//! Audio-visual temporal action localization with gated multi-resolution
//! feature fusion.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), a log-mel audio front-end ([`audio`]), the fusion network
//! ([`model`]), its training objective ([`loss`]), segment decoding and mAP
//! evaluation ([`decode`], [`eval`]), and the feature/annotation file
//! formats plus a synthetic dataset generator ([`data`], [`synth`]).

pub mod audio;
pub mod error;
pub mod model;
pub mod data;
pub mod synth;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
