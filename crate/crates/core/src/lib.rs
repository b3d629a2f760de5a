pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod hmrnet;
pub mod loss;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{GaitError, Result};
pub use scalar::Scalar;

pub type HmrNet32 = hmrnet::HmrNet<f32>;
pub type HmrNet64 = hmrnet::HmrNet<f64>;
