//! Dense time-by-channel matrix used by every kernel in this crate.

use crate::{Error, Result};

/// A `len x channels` matrix of `f64` in time-major order: the value at
/// time step `t`, channel `c` lives at `data[t * channels + c]`.
///
/// Flat vectors (dense-layer activations, logits, probabilities) are
/// represented as `len x 1` tensors, so flattening a time-by-channel block
/// into a vector is a relabel of the same storage, not a copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// All-zero tensor of the given shape.
    pub fn zeros(len: usize, channels: usize) -> Self {
        Tensor2 {
            len,
            channels,
            data: vec![0.0; len * channels],
        }
    }

    /// Builds a tensor from time-major data. Errors unless
    /// `data.len() == len * channels`.
    pub fn from_data(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * channels {
            return Err(Error::shape(
                "Tensor2::from_data",
                format!("{} values for {len}x{channels}", len * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor2 { len, channels, data })
    }

    /// Single-channel tensor wrapping a flat vector.
    pub fn from_vector(data: Vec<f64>) -> Self {
        Tensor2 {
            len: data.len(),
            channels: 1,
            data,
        }
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.len
    }

    /// True when the tensor holds no values.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of channels.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(len, channels)` pair.
    pub fn shape(&self) -> (usize, usize) {
        (self.len, self.channels)
    }

    /// Value at time step `t`, channel `c`.
    #[inline]
    pub fn at(&self, t: usize, c: usize) -> f64 {
        debug_assert!(t < self.len && c < self.channels);
        self.data[t * self.channels + c]
    }

    /// Mutable value at time step `t`, channel `c`.
    #[inline]
    pub fn at_mut(&mut self, t: usize, c: usize) -> &mut f64 {
        debug_assert!(t < self.len && c < self.channels);
        &mut self.data[t * self.channels + c]
    }

    /// Time-major view of the underlying storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable time-major view of the underlying storage.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor and returns its time-major storage.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the storage as a `(len*channels) x 1` vector tensor.
    pub fn flatten(self) -> Tensor2 {
        Tensor2 {
            len: self.len * self.channels,
            channels: 1,
            data: self.data,
        }
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_time_major() {
        let t = Tensor2::from_data(2, 3, vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        assert_eq!(t.at(0, 2), 2.0);
        assert_eq!(t.at(1, 0), 10.0);
        assert_eq!(t.shape(), (2, 3));
    }

    #[test]
    fn from_data_rejects_wrong_length() {
        assert!(Tensor2::from_data(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn flatten_preserves_storage_order() {
        let t = Tensor2::from_data(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = t.flatten();
        assert_eq!(flat.shape(), (4, 1));
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
