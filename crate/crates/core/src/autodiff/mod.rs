//! Dense tensors, a reverse-mode tape and ReLU networks: enough machinery to
//! train every model in the crate.

mod mlp;
mod tape;
mod tensor;

pub use mlp::{forward_mlp, BoundMlp, MlpParams};
pub use tape::{logsumexp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("expected {expected} entries, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("matrix is singular")]
    Singular,
    #[error("parameter binding ran out of variables")]
    BindingExhausted,
    #[error("{0}")]
    Invalid(String),
}

/// Anything that owns trainable tensors in a fixed, stable order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub(crate) fn take_var(vars: &mut impl Iterator<Item = Var>) -> Result<Var, TensorError> {
    vars.next().ok_or(TensorError::BindingExhausted)
}

/// Puts every tensor of `params` on the tape as a differentiable leaf.
pub fn bind_trainable<P: Parameters + ?Sized>(tape: &mut Tape, params: &P) -> Vec<Var> {
    params.tensors().into_iter().map(|t| tape.param(t.clone())).collect()
}

/// Puts every tensor of `params` on the tape as a constant.
pub fn bind_constants<P: Parameters + ?Sized>(tape: &mut Tape, params: &P) -> Vec<Var> {
    params
        .tensors()
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect()
}
