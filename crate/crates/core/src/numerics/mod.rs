//! Tensors, reverse-mode differentiation, and the layer set used by the
//! encoders and the policy.

mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::ConvGeometry;
pub use gradcheck::{gradient_check, GradSample};
pub use graph::{log_softmax_row, Gradients, Graph, Var};
pub use layers::{Conv2d, Conv3d, Embedding, GroupNorm, GruCell, Linear, LinearInit, NORM_GROUPS};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use params::{kaiming_uniform, orthogonal, ParamId, ParamStore, Parameter};
pub use scalar::{gemm, Real};
pub use tensor::Tensor;
