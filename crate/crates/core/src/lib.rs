//! Miniature BERT-style Transformer pretraining and deep self-attention
//! distillation with a small reverse-mode autodiff core.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
