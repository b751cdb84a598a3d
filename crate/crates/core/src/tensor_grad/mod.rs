//! Dense tensors, layered CNN descriptions and their forward/backward evaluation.

mod engine;
mod network;
mod tensor;

pub use engine::{forward, forward_features, item_nll, logsumexp, loss_grad, softmax, DropoutMode, Reduction};
pub use network::{
    build_desk_cnn, build_lenet_expanded, build_lenet_expanded_with_dropout, build_mlp, ActShape, Layer,
    NetworkSpec, ParamLayout, ParamSlot, ParamVector,
};
pub use tensor::Tensor;

/// Total scalar parameter count, including biases.
pub fn param_count(spec: &NetworkSpec) -> crate::Result<usize> {
    spec.param_count()
}
