//! Differentiable tensor kernels for GPT-style blocks.

mod attention;
mod dump;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use attention::{masked_attention, AttentionMask, AttnBlock, AttnLayout};
pub use dump::{decode_dump, encode_dump, read_dump, write_dump};
pub use gradcheck::{grad_check, grad_check_params, REL_ERR_FLOOR};
pub use graph::{cross_entropy, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;
