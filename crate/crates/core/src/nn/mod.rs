//! Small dense-tensor and convolution substrate with hand-written backward
//! passes. Everything runs in `f64` so gradients can be checked against
//! central differences.

mod checkpoint;
mod gemm;
mod gradcheck;
mod layers;
mod optim;
mod scratch;
mod sequential;
mod sum;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC,
};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_piecewise, numeric_gradient, relative_error,
    GradCheckReport, Stencil, OBJECTIVE_STEP,
};
pub use layers::{
    avg_pool2, avg_pool2_backward, concat_channels, l2_normalize_channels, relu, relu_backward,
    softmax_channels, softmax_channels_backward, split_channels, standardize, standardize_backward,
    upsample_bilinear, upsample_bilinear_backward, Conv2d, STANDARDIZE_EPS,
};
pub use optim::{poly_decay_lr, sgd_step, SgdConfig};
pub use sequential::{Layer, Sequential, Trace};
pub use sum::CompensatedSum;
pub use tensor::Tensor;

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameterized {
    /// Parameters with stable, unique names (used by checkpoints).
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}
