//! Locality-constrained feature coders, dictionary learning and an adaptive
//! manifold-mixing controller for GAN discriminators.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`], [`rng`], [`support`]: dense column-sample matrices, seeded
//!   random streams and nearest-atom selection.
//! * [`coders`]: HA, SC, SC+, OMP, LLC, SA, LCSA and a denoising auto-encoder,
//!   plus the analytic LCSA Jacobian.
//! * [`dictionary`]: atom initialization, gradient and EMA dictionary updates.
//! * [`meta`]: the overfitting detector driving the mixing weight β and the
//!   proximity weight γ.
//! * [`manifold`]: discriminator blocks that mix features with their manifold
//!   view and expose the proximity loss.
//! * [`toy_gan`]: a 2-D GAN harness built from those blocks.
//! * [`analysis`]: numerical checks of the coder geometry.
//! * [`io`]: matrix files, key=value configs, CSV metrics and SVG plots.

// `!(x > t)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod coders;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod manifold;
pub mod matrix;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod support;
pub mod toy_gan;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
pub use support::SupportSet;
