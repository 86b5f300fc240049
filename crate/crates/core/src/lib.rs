//! Mixed finite elements for saddle-point evolution problems: time-dependent
//! Stokes flow and the linearized hydrostatic (primitive) equations.

pub mod assembly;
pub mod error;
pub mod evolution;
pub mod fespace;
pub mod harness;
pub mod ldl;
pub mod mesh;
pub mod oracle;
pub mod quadrature;
pub mod saddle;
pub mod sparse;

pub use error::{Error, Result};
