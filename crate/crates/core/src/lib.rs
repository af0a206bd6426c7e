//! Tube-masked video autoencoder pretraining and few-shot seizure
//! forecasting, with a self-contained tensor engine and a synthetic
//! cross-species clip generator.

pub mod clipdata;
pub mod error;
pub mod fewshot_eval;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod seeds;
pub mod training;
pub mod tubelet;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Params64 = model::ModelParams<f64>;
