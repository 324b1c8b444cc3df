//! Distributed model predictive control of wind farm active power.

pub mod error;
pub mod jacobi;
pub mod linear;
pub mod plant;
pub mod prediction;
pub mod qp;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
