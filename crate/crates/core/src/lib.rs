//! Numerical laboratory for Allen-Cahn phase transitions: layered solutions,
//! energy density, stability, level sets, the Toda reduction for interacting
//! layers and the flatness iteration for their ends.

pub mod energy;
pub mod error;
pub mod field;
pub mod flatness;
pub mod io;
pub mod levelset;
pub mod linalg;
pub mod poisson;
pub mod potential;
pub mod quadrature;
pub mod radial;
pub mod solver;
pub mod stability;
pub mod toda;

pub use error::{Error, GateReason, Result};
pub use field::{BoundaryConditions, Face, GridSpec, RadialField, ScalarField};
