pub mod assumptions;
pub mod basis;
pub mod criticality;
pub mod error;
pub mod grid;
pub mod interp;
pub mod io;
pub mod lbfgs;
pub mod linalg;
pub mod nonlinearity;
pub mod quadrature;
pub mod rate;
pub mod rng;
pub mod solver;
pub mod spde;

pub use error::{Error, Result};
