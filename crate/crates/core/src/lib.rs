pub mod autograd;
pub mod error;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod textualize;
pub mod workflow;
pub mod graph_qa;
pub mod seeding;
pub mod encoders;
pub mod fusion;
pub mod model;
pub mod search;
pub mod training;
pub mod evaluation;
pub mod checkpoint;

pub use error::{Error, Result};

pub type Model32 = model::SurrogateModel<f32>;
pub type Model64 = model::SurrogateModel<f64>;
pub type Features32 = model::FeatureSet<f32>;
pub type Features64 = model::FeatureSet<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
