//! Numerics for time-shift changes of measure on path space.
//!
//! Paths are two-sided, piecewise linear and carried by a finite Haar
//! system; the initial value is drawn from a density `m`. On top of that the
//! crate provides a finite-dimensional Malliavin layer, temporally
//! homogeneous process models `X = W + A` with drift or jumps, mollified flow
//! approximations of such models, the time-shift densities and Monte Carlo
//! checks of the identities they satisfy.
//!
//! Replica loops run on rayon when the `parallel` feature is enabled (the
//! default) and sequentially otherwise. Every replica draws from its own
//! counter-derived stream, so results do not depend on the worker count.

pub mod basis;
pub mod density;
pub mod error;
pub mod malliavin;
pub mod mc;
pub mod measure;
pub mod mollify;
pub mod particles;
pub mod process;
pub mod quad;

pub use error::{Error, Result};
