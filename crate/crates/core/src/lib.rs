//! Mixture-of-feature-modulation-experts image restoration, from tensors up.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide dense
//! arrays and reverse-mode gradients; [`routing`] and [`experts`] build the
//! sparse expert layers; [`model`] assembles the restoration network;
//! [`data`], [`losses`], [`metrics`], [`train`] and [`bench`] drive it.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
