//! Bayesian neural network inference and uncertainty evaluation for radio galaxy
//! morphology classification.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hmc;
pub mod laplace;
pub mod map_trainer;
pub mod metrics;
pub mod optim;
mod par;
pub mod posterior;
pub mod predictive;
pub mod report;
pub mod tensor_grad;
pub mod vi;

pub use error::{BnnError, Result};
