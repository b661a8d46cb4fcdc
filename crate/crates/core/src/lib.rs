pub mod cli;
pub mod conic;
pub mod error;
pub mod markov;
pub mod mjls;
pub mod ocp;
pub mod polyhedra;
pub mod risk;
pub mod safety;
pub mod simulator;
pub mod tree;
pub use error::{Error, Result};
