//! Spectral super-resolution of multi-resolution multispectral imagery.
//!
//! The library turns a few-band multispectral cube whose bands come at mixed
//! ground resolutions into a many-band hyperspectral cube on the finest pixel
//! grid. The reconstruction runs in two passes: an ADMM-driven unfolding
//! solver recovers the spectral dimension, then a spatiospectral attention
//! fusion network restores the spatial detail using the input's own
//! high-resolution bands. Training of the learnable blocks uses hand-derived
//! reverse-mode gradients and ADAM. A blind-source-separation pipeline
//! (MDL model-order selection, VCA endmember extraction, FCLS abundances)
//! and the usual image-quality metrics (PSNR/SAM/RMSE/SSIM) round out the
//! toolbox.
//!
//! Core numerics are generic over the scalar type; `f64` aliases are exported
//! at the crate root and are what the CLI and the training path use.

pub mod bss;
pub mod cube;
pub mod envi;
pub mod error;
pub mod fuse;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod prox;
pub mod scaling;
pub mod simulate;
pub mod unfold;

pub use cube::{Cube, MultiResCube, ResClass, SrtMatrix};
pub use error::{Error, Result};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt;
use std::iter::Sum;

/// Floating-point scalar the core numerics are generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + ScalarOperand
        + LinalgScalar
        + Sum
        + Send
        + Sync
        + fmt::Debug
        + fmt::Display
        + 'static
{
}

/// Default-precision hyperspectral cube.
pub type HyperCube = Cube<f64>;
/// Single-precision hyperspectral cube.
pub type HyperCube32 = Cube<f32>;

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub(crate) fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 constant representable in scalar type")
}
