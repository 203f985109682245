//! Simulation-supervised susceptibility source separation.
//!
//! The crate is organised bottom-up: [`volume`] grids and spectral
//! transforms, the [`physics`] forward model, training-data [`synth`]esis,
//! the dual-branch [`network`], training [`losses`], the [`training`] loop,
//! a classical [`baseline`] solver and evaluation [`metrics`].

pub mod baseline;
pub mod error;
pub mod filter;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod physics;
pub mod synth;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
