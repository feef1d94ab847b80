//! Per-layer floating-point operation counts under a pluggable convention.
//!
//! There is no single agreed way to count FLOPs for a network: conventions
//! differ on whether a multiply-accumulate is one operation or two, what a
//! divide or exponential costs, and whether batch-norm is priced as folded
//! into a scale-and-shift or evaluated in full. [`FlopConvention`] makes
//! those choices explicit so a count is meaningful only together with the
//! convention that produced it. Reports should always name the convention.

use crate::nn::{Layer, Tensor2};
use crate::Result;

/// Elementary operation prices and structural counting choices.
///
/// A multiply-accumulate is priced as `add + mul`. Average pooling is priced
/// as `kernel_size - 1` additions plus one multiply by the precomputed
/// reciprocal of the window length; softmax divides by a runtime sum, so its
/// normalization is priced as a true divide. Scanning for the maximum logit
/// moves no data and is not counted; when `softmax_max_shift` is set, the
/// subtraction of that maximum is counted, one add per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopConvention {
    pub add: u64,
    pub mul: u64,
    pub div: u64,
    pub cmp: u64,
    pub sqrt: u64,
    pub exp: u64,
    /// Price batch norm as a per-element scale-and-shift (the form it takes
    /// once the normalization constants are folded after training) instead
    /// of the full subtract/divide/scale/shift with a per-channel sqrt.
    pub fold_batchnorm: bool,
    /// Count the max-subtraction pass of the stable softmax.
    pub softmax_max_shift: bool,
}

impl FlopConvention {
    /// Textbook convention: every elementary operation costs 1, comparisons
    /// are free, batch norm is folded, and the softmax max-shift is not
    /// counted. A multiply-accumulate therefore costs 2.
    pub fn minimal() -> Self {
        FlopConvention {
            add: 1,
            mul: 1,
            div: 1,
            cmp: 0,
            sqrt: 1,
            exp: 1,
            fold_batchnorm: true,
            softmax_max_shift: false,
        }
    }

    /// Convention for microcontrollers without a hardware FPU, where floats
    /// go through a software library: adds, multiplies, and comparisons cost
    /// one unit, divides and square roots cost 14, exponentials cost 30, and
    /// nothing is folded away. These prices are round figures for a typical
    /// Cortex-M3-class soft-float routine relative to an add.
    pub fn soft_float() -> Self {
        FlopConvention {
            add: 1,
            mul: 1,
            div: 14,
            cmp: 1,
            sqrt: 14,
            exp: 30,
            fold_batchnorm: false,
            softmax_max_shift: true,
        }
    }

    fn mac(&self) -> u64 {
        self.add + self.mul
    }

    /// Operation count for one forward pass of `layer` on an input of shape
    /// `(len, channels)`. Errors when the shape is invalid for the layer.
    pub fn layer_flops(&self, layer: &Layer, input: (usize, usize)) -> Result<u64> {
        let (out_len, out_ch) = layer.output_shape(input)?;
        let out_elems = (out_len * out_ch) as u64;
        let in_elems = (input.0 * input.1) as u64;
        Ok(match layer {
            Layer::Conv1d(l) => {
                let per_elem = self.mac() * (l.kernel_size * l.in_channels) as u64 + self.add;
                out_elems * per_elem
            }
            Layer::AvgPool1d(l) => out_elems * ((l.kernel_size as u64 - 1) * self.add + self.mul),
            Layer::BatchNorm1d(l) => {
                if self.fold_batchnorm {
                    in_elems * (self.mul + self.add)
                } else {
                    // subtract mean, divide by std, scale, shift; plus one
                    // var+epsilon add and sqrt per channel
                    in_elems * (2 * self.add + self.div + self.mul) + l.channels as u64 * (self.add + self.sqrt)
                }
            }
            Layer::LeakyRelu(_) => in_elems * (self.cmp + self.mul),
            Layer::Flatten(_) => 0,
            Layer::Dense(l) => out_elems * (self.mac() * l.in_features as u64 + self.add),
            Layer::Softmax(_) => {
                let shift = if self.softmax_max_shift { self.add } else { 0 };
                in_elems * (self.exp + self.add + self.div + shift)
            }
        })
    }

    /// Total operation count for a layer sequence starting from the given
    /// input shape. Counts are additive over layers.
    pub fn sequence_flops(&self, layers: &[Layer], mut shape: (usize, usize)) -> Result<u64> {
        let mut total = 0;
        for layer in layers {
            total += self.layer_flops(layer, shape)?;
            shape = layer.output_shape(shape)?;
        }
        Ok(total)
    }
}

/// The counts in reports default to the soft-float convention: the target
/// class of device runs floats in software, and that is the convention the
/// shipped cost profiles were calibrated under.
impl Default for FlopConvention {
    fn default() -> Self {
        FlopConvention::soft_float()
    }
}

/// One row of a per-layer cost ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: (usize, usize),
    pub params: usize,
    pub flops: u64,
}

/// Builds a per-layer ledger for a named layer sequence, tracking shapes
/// from `input`.
pub fn sequence_ledger(
    names: &[&str],
    layers: &[Layer],
    input: (usize, usize),
    convention: &FlopConvention,
) -> Result<Vec<CostRow>> {
    debug_assert_eq!(names.len(), layers.len());
    let mut rows = Vec::with_capacity(layers.len());
    let mut shape = input;
    for (name, layer) in names.iter().zip(layers) {
        let flops = convention.layer_flops(layer, shape)?;
        shape = layer.output_shape(shape)?;
        rows.push(CostRow {
            name: (*name).to_string(),
            kind: layer.kind(),
            output_shape: shape,
            params: layer.param_count(),
            flops,
        });
    }
    Ok(rows)
}

/// Checks that one inference forward pass of `layers` on `input` leaves
/// every intermediate finite, returning the final output.
pub fn forward_sequence(layers: &[Layer], input: &Tensor2) -> Result<Tensor2> {
    let mut current = input.clone();
    for layer in layers {
        current = layer.forward(&current)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AvgPool1d, BatchNorm1d, Conv1d, Dense, Flatten, LeakyRelu, Softmax};

    fn early_path(nc: usize) -> Vec<Layer> {
        vec![
            Layer::Conv1d(Conv1d::new(5, 3, 7, 6)),
            Layer::LeakyRelu(LeakyRelu { alpha: 0.01 }),
            Layer::AvgPool1d(AvgPool1d { kernel_size: 2, stride: 2 }),
            Layer::BatchNorm1d(BatchNorm1d::new(6, 1e-3, 0.01)),
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(30, nc)),
            Layer::Softmax(Softmax),
        ]
    }

    fn baseline_path(nc: usize) -> Vec<Layer> {
        let mut layers = early_path(nc);
        layers.truncate(4); // shared trunk up to the first batch norm
        layers.extend([
            Layer::Conv1d(Conv1d::new(4, 1, 6, 8)),
            Layer::LeakyRelu(LeakyRelu { alpha: 0.01 }),
            Layer::BatchNorm1d(BatchNorm1d::new(8, 1e-3, 0.01)),
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(16, 16)),
            Layer::LeakyRelu(LeakyRelu { alpha: 0.01 }),
            Layer::Dense(Dense::new(16, nc)),
            Layer::Softmax(Softmax),
        ]);
        layers
    }

    #[test]
    fn pool_count_under_minimal_convention() {
        let conv = FlopConvention::minimal();
        let pool = Layer::AvgPool1d(AvgPool1d { kernel_size: 2, stride: 2 });
        // 5x6 outputs, kernel 2: one add and one scale per output element.
        assert_eq!(conv.layer_flops(&pool, (10, 6)).unwrap(), 60);
    }

    #[test]
    fn whole_path_counts_under_minimal_convention() {
        let conv = FlopConvention::minimal();
        assert_eq!(conv.sequence_flops(&early_path(8), (32, 7)).unwrap(), 4952);
        assert_eq!(conv.sequence_flops(&baseline_path(8), (32, 7)).unwrap(), 6104);
    }

    #[test]
    fn whole_path_counts_under_soft_float_convention() {
        let conv = FlopConvention::soft_float();
        assert_eq!(conv.sequence_flops(&early_path(8), (32, 7)).unwrap(), 5896);
        assert_eq!(conv.sequence_flops(&baseline_path(8), (32, 7)).unwrap(), 7440);
    }

    #[test]
    fn counts_are_additive_over_layers() {
        for convention in [FlopConvention::minimal(), FlopConvention::soft_float()] {
            let layers = baseline_path(8);
            let total = convention.sequence_flops(&layers, (32, 7)).unwrap();
            let mut sum = 0;
            let mut shape = (32, 7);
            for layer in &layers {
                sum += convention.layer_flops(layer, shape).unwrap();
                shape = layer.output_shape(shape).unwrap();
            }
            assert_eq!(total, sum);
        }
    }

    #[test]
    fn conv_and_dense_counts_grow_with_output_size() {
        let convention = FlopConvention::default();
        let small = convention
            .layer_flops(&Layer::Conv1d(Conv1d::new(3, 1, 2, 4)), (10, 2))
            .unwrap();
        let large = convention
            .layer_flops(&Layer::Conv1d(Conv1d::new(3, 1, 2, 4)), (20, 2))
            .unwrap();
        assert!(large > small);

        let small = convention.layer_flops(&Layer::Dense(Dense::new(8, 4)), (8, 1)).unwrap();
        let large = convention.layer_flops(&Layer::Dense(Dense::new(8, 9)), (8, 1)).unwrap();
        assert!(large > small);
    }

    #[test]
    fn ledger_tracks_shapes_and_params() {
        let layers = early_path(8);
        let names = ["conv1", "act1", "pool1", "bn1", "flat1", "head1", "sm1"];
        let rows = sequence_ledger(&names, &layers, (32, 7), &FlopConvention::minimal()).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].output_shape, (10, 6));
        assert_eq!(rows[0].params, 216);
        assert_eq!(rows[2].output_shape, (5, 6));
        assert_eq!(rows[4].output_shape, (30, 1));
        assert_eq!(rows[5].output_shape, (8, 1));
        let total: u64 = rows.iter().map(|r| r.flops).sum();
        assert_eq!(total, 4952);
    }
}
