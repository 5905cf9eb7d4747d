pub mod coords;
pub mod error;
pub mod flow;
pub mod integrator;
mod integrator_tableau;
pub mod jet;
pub mod kepler;
pub mod levi_civita;
pub mod moser;
pub mod orbit_finder;
pub mod rtbp;

pub use error::{Error, Result};
