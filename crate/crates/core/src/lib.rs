pub mod autodiff;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradsuite;
pub mod lsl;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod text;
pub mod train;

pub use autodiff::{ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use model::EventDetector;
pub use train::{train, TrainConfig, TrainLog, Trained};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Trained32 = Trained<f32>;
pub type Trained64 = Trained<f64>;
