//! Minimal dense differentiable compute: layers with explicit backward passes,
//! losses, the optimizer, gradient checking, and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod params;
pub mod patch;
pub mod tensor;

pub use attention::{AttentionBlock, BlockCache, BlockStack};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{affine, affine_backward, gelu, gelu_backward, softmax_rows, Affine, LayerNorm};
pub use loss::{bce_with_logits, bce_with_logits_weighted, cross_entropy, cross_entropy_smoothed};
pub use params::{adam_step, adam_update, AdamConfig, Grads, ParamId, ParamStore};
pub use patch::{PatchEmbed, PatchUnembed, PATCH};
pub use tensor::{gemm, matmul, MatMut, MatRef, Real, Tensor, TensorF};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
}
