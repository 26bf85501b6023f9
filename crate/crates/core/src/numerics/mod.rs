//! Dense `f64` tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{clip_grad_norm, Adam};
pub use graph::{
    gelu_with_derivative, layer_norm_in_place, log_softmax, softmax, AttentionLayout, Gradients, Graph, RowSource, Var, LAYER_NORM_EPS,
};
pub use params::Params;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;

/// Tensor of i.i.d. `N(0, std²)` entries.
pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}
