//! Uniform traversal of named parameters and state buffers. Checkpointing
//! walks everything; optimizers walk only trainable entries, partitioned
//! into the two update groups.

use crate::tensor::SharedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by an optimizer, receives gradients.
    Trainable,
    /// Carried state (e.g. batch-norm running stats): saved and restored,
    /// never touched by optimizers.
    Buffer,
}

/// Optimizer grouping: the convolutional encoder trains under SGD, every
/// other trainable tensor under Adam with gradient-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Cnn,
    Attention,
}

pub type ParamVisitor<'v> = dyn FnMut(String, &SharedTensor, ParamKind) + 'v;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
