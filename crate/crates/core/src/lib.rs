pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hca;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tac;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
