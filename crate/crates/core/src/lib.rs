//! Reduced density matrices and entanglement entropies of the
//! transverse-field Ising chain from hierarchical autoregressive sampling of
//! its classical two-dimensional counterpart.

pub mod autoreg;
pub mod error;
pub mod estimator;
pub mod extrapolate;
pub mod han;
pub mod io;
pub mod lattice;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod svg;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
