//! Federated dual coordinate descent: simulator, solvers and verification lab.

pub mod cli;
pub mod data;
pub mod dual;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
