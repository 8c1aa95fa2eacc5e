//! Sentence-pair inference models built on a small reverse-mode autodiff tape.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense 2-D tensors recorded on a [`tensor::Tape`], with
//!   reverse-mode gradients and a finite-difference checker in [`check`].
//! - [`layers`]: LSTM cell, bidirectional scan, word attention and direction
//!   fusion, assembled into the attention-boosted encoder.
//! - [`model`]: the four-stage ESIM pipeline (encode, align, compose,
//!   classify) with either encoder kind, plus alignment-matrix export.
//! - [`data`]: corpus loaders (JSONL and TSV), tokenizer, vocabulary,
//!   embedding-file ingestion and batching.
//! - [`train`]: Adam, the training loop and evaluation.
//! - [`checkpoint`]: bitwise-exact model/optimizer serialization.

pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tape, Tensor, Var};
