pub mod cli;
pub mod darboux;
pub mod error;
pub mod expr;
pub mod flows;
pub mod foliation;
pub mod geometry;
pub mod linalg;
pub mod ode;
pub mod quadrature;
pub mod systems;
pub mod tolerances;

pub use error::{Error, Result};
