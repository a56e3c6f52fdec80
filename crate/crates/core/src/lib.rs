//! Binary neural architecture search: autodiff engine, binarization
//! kernels, gated supercells, analytic cost model and training stages.

pub mod autograd;
pub mod binarize;
pub mod cell;
pub mod costmodel;
pub mod error;
pub mod io;
pub mod nasgate;
pub mod trainer;

pub use error::{Error, Result};
