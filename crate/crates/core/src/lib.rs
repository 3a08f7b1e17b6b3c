//! Masked adversarial text generation for knowledge distillation.
//!
//! A masked-LM generator rewrites randomly masked tokens of training
//! texts so as to maximize the divergence between a frozen teacher and a
//! student; the student is then trained on the original texts and on the
//! rewritten ones. Everything numeric is generic over [`Scalar`]; the
//! aliases below fix the two supported precisions.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod models;
pub mod optim;
pub mod perturb;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Encoder32 = models::Encoder<f32>;
pub type Encoder64 = models::Encoder<f64>;
pub type Teacher32 = models::Teacher<f32>;
pub type Teacher64 = models::Teacher<f64>;
