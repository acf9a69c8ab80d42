pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod container;
pub mod distributions;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod smc;
pub mod ssm;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
