//! Minimal differentiable numeric core: a dense tensor, a reverse-mode tape,
//! masked attention, losses and a finite-difference gradient checker.

mod attention;
mod gradcheck;
mod loss;
mod tape;
mod tensor;

pub use attention::{masked_attention, masked_attention_rows};
pub use gradcheck::{grad_check, grad_check_tape};
pub use loss::{bce_with_logits, cross_entropy, log_softmax_row, softmax_row};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("query row {0} has no visible keys")]
    EmptyAttentionRow(usize),
    #[error("target {target} outside vocabulary of size {vocab}")]
    IndexOutOfVocab { target: usize, vocab: usize },
    #[error("non-finite gradient at input {input}, coordinate {coord}")]
    NonFiniteGradient { input: usize, coord: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
