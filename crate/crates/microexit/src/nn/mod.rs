//! Fixed-shape 1D tensor kernels with forward, backward, and cost accounting.
//!
//! Everything here operates on [`Tensor2`], a dense time-by-channel matrix.
//! The layer set is exactly what the two-head network needs: valid-padding
//! 1D convolution, average pooling, batch normalization, dense, leaky ReLU,
//! softmax, and a flatten relabel. Each layer provides an immutable
//! single-sample forward pass for inference and a batched forward/backward
//! pair for training, plus a parameter count and a per-layer operation count
//! under a pluggable [`FlopConvention`].
//!
//! No autodiff, no padding modes other than valid, no dilation or groups.

mod flops;
mod layers;
mod tensor;

pub use flops::{forward_sequence, sequence_ledger, CostRow, FlopConvention};
pub use layers::{AvgPool1d, BatchNorm1d, Cache, Conv1d, Dense, Flatten, Layer, LeakyRelu, Softmax};
pub use tensor::Tensor2;

/// Output length of a valid-padding sliding window: `floor((len - k)/stride) + 1`.
///
/// Returns `None` when the input is shorter than the kernel.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::conv_out_len;

    #[test]
    fn out_len_matches_closed_form() {
        assert_eq!(conv_out_len(32, 5, 3), Some(10));
        assert_eq!(conv_out_len(10, 2, 2), Some(5));
        assert_eq!(conv_out_len(5, 4, 1), Some(2));
        assert_eq!(conv_out_len(3, 4, 1), None);
        assert_eq!(conv_out_len(4, 4, 7), Some(1));
    }
}
