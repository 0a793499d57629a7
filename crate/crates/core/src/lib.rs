// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod config;
pub mod error;
pub mod factworld;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod surgery;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Activation, AttentionLayout, Segment, Var};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape<'a> = tape::Tape<'a, f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TapeF32<'a> = tape::Tape<'a, f32>;
pub type Seq2SeqModel = model::Seq2SeqModel<f64>;
pub type Seq2SeqModelF32 = model::Seq2SeqModel<f32>;
