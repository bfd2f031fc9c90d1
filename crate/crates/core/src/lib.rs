pub mod config;
pub mod eikonal;
pub mod error;
pub mod expr;
pub mod factorization;
pub mod grid;
pub mod operator;
pub mod propagator;
pub mod quad;
pub mod scenario;
pub mod stochastic;
pub mod symbol;
pub mod wave;
pub mod verify;
pub mod weak;

pub use error::{Error, Result};
