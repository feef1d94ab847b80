//! The two-head network: a shared convolutional trunk with a cheap early
//! classifier partway through and a full-depth classifier at the end, plus
//! seeded construction and a checksummed weight archive.
//!
//! The standard geometry classifies a 32-step, 7-channel segment:
//!
//! ```text
//! input 32x7
//!   stage 1: conv(k=5,s=3,7->6) -> leaky relu -> avgpool(2,2) -> batchnorm   => 5x6
//!     early head: flatten(30) -> dense(30->n) -> softmax                     => n probs
//!   stage 2: conv(k=4,s=1,6->8) -> leaky relu -> batchnorm                   => 2x8
//!     final head: flatten(16) -> dense(16->16) -> leaky relu
//!                 -> dense(16->n) -> softmax                                 => n probs
//! ```
//!
//! The early path costs 240 + 31n parameters, the full path 744 + 17n; both
//! heads together hold 744 + 48n. The early computation is a strict prefix
//! of the full one: running the final head never recomputes stage 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::format::{open_verified, push_f64s, seal, take_f64s};
use crate::nn::{
    sequence_ledger, AvgPool1d, BatchNorm1d, Conv1d, CostRow, Dense, Flatten, FlopConvention, Layer, LeakyRelu,
    Softmax, Tensor2,
};
use crate::{Error, Result};

/// Which classifier head answers for a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitPoint {
    /// The cheap head fed by stage 1 only.
    EarlyExit,
    /// The full-depth head; what the network would be without an early exit.
    Baseline,
}

/// Geometry and normalization constants for [`MultiOutputCnn::build`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_length: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub leaky_alpha: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Standard geometry with the given class count.
    pub fn with_classes(num_classes: usize) -> Self {
        ModelConfig {
            input_length: 32,
            input_channels: 7,
            num_classes,
            leaky_alpha: 0.01,
            bn_epsilon: 1e-3,
            bn_momentum: 0.01,
        }
    }

    /// Checks every field's domain.
    pub fn validate(&self) -> Result<()> {
        if self.input_length == 0 || self.input_channels == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(self.leaky_alpha > 0.0) {
            return Err(Error::Config("leaky_alpha must be positive".into()));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_momentum must be in (0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_classes(8)
    }
}

/// A two-head network: `stage1` feeds both `head1` (the early exit) and,
/// through `stage2`, `head2` (the full-depth exit).
///
/// Inference borrows the model immutably, so a loaded model can serve
/// concurrent forward passes. Only training mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOutputCnn {
    input_shape: (usize, usize),
    num_classes: usize,
    pub(crate) stage1: Vec<Layer>,
    pub(crate) head1: Vec<Layer>,
    pub(crate) stage2: Vec<Layer>,
    pub(crate) head2: Vec<Layer>,
    names: Vec<String>,
}

/// Named section of a [`MultiOutputCnn`], in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Stage1,
    Head1,
    Stage2,
    Head2,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::Stage1, Section::Head1, Section::Stage2, Section::Head2];

    pub fn tag(self) -> &'static str {
        match self {
            Section::Stage1 => "stage1",
            Section::Head1 => "head1",
            Section::Stage2 => "stage2",
            Section::Head2 => "head2",
        }
    }
}

fn assign_names(sections: [&[Layer]; 4]) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<&'static str, usize> = std::collections::BTreeMap::new();
    let mut names = Vec::new();
    for section in sections {
        for layer in section {
            let short = match layer.kind() {
                "conv1d" => "conv",
                "avgpool1d" => "pool",
                "batchnorm" => "bn",
                "leaky_relu" => "act",
                "flatten" => "flat",
                "dense" => "dense",
                "softmax" => "softmax",
                other => other,
            };
            let n = counts.entry(short).or_insert(0);
            *n += 1;
            names.push(format!("{short}{n}"));
        }
    }
    names
}

fn validate_chain(mut shape: (usize, usize), layers: &[Layer], section: &str) -> Result<(usize, usize)> {
    for (i, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(shape).map_err(|e| {
            Error::Config(format!("{section} layer {i} ({}) rejects its input: {e}", layer.kind()))
        })?;
    }
    Ok(shape)
}

impl MultiOutputCnn {
    /// Assembles a network from explicit layer sections, validating that the
    /// shape chain works out and that both heads end in a softmax over the
    /// same class count.
    pub fn from_parts(
        input_shape: (usize, usize),
        stage1: Vec<Layer>,
        head1: Vec<Layer>,
        stage2: Vec<Layer>,
        head2: Vec<Layer>,
    ) -> Result<Self> {
        let mid = validate_chain(input_shape, &stage1, "stage1")?;
        let (h1_len, h1_ch) = validate_chain(mid, &head1, "head1")?;
        let deep = validate_chain(mid, &stage2, "stage2")?;
        let (h2_len, h2_ch) = validate_chain(deep, &head2, "head2")?;
        if h1_ch != 1 || h2_ch != 1 || h1_len != h2_len {
            return Err(Error::Config(format!(
                "heads must produce equal-length probability vectors, got {h1_len}x{h1_ch} and {h2_len}x{h2_ch}"
            )));
        }
        for (head, tag) in [(&head1, "head1"), (&head2, "head2")] {
            if !matches!(head.last(), Some(Layer::Softmax(_))) {
                return Err(Error::Config(format!("{tag} must end in a softmax layer")));
            }
        }
        let names = assign_names([&stage1, &head1, &stage2, &head2]);
        Ok(MultiOutputCnn {
            input_shape,
            num_classes: h1_len,
            stage1,
            head1,
            stage2,
            head2,
            names,
        })
    }

    /// Builds the standard geometry with seeded initialization: weights are
    /// uniform in the fan-balanced range `±sqrt(6/(fan_in+fan_out))`, biases
    /// zero, batch-norm at identity. The same seed always produces the same
    /// model.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let act = || Layer::LeakyRelu(LeakyRelu { alpha: config.leaky_alpha });
        let bn = |ch: usize| Layer::BatchNorm1d(BatchNorm1d::new(ch, config.bn_epsilon, config.bn_momentum));

        let stage1 = vec![
            Layer::Conv1d(Conv1d::new(5, 3, config.input_channels, 6)),
            act(),
            Layer::AvgPool1d(AvgPool1d { kernel_size: 2, stride: 2 }),
            bn(6),
        ];
        let mid = validate_chain((config.input_length, config.input_channels), &stage1, "stage1")?;
        let flat1 = mid.0 * mid.1;
        let head1 = vec![
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(flat1, config.num_classes)),
            Layer::Softmax(Softmax),
        ];
        let stage2 = vec![Layer::Conv1d(Conv1d::new(4, 1, 6, 8)), act(), bn(8)];
        let deep = validate_chain(mid, &stage2, "stage2")?;
        let flat2 = deep.0 * deep.1;
        let head2 = vec![
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(flat2, 16)),
            act(),
            Layer::Dense(Dense::new(16, config.num_classes)),
            Layer::Softmax(Softmax),
        ];

        let mut model = MultiOutputCnn::from_parts(
            (config.input_length, config.input_channels),
            stage1,
            head1,
            stage2,
            head2,
        )?;
        model.randomize(seed);
        Ok(model)
    }

    /// Re-initializes all weights from the seed as in [`build`](Self::build).
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for layer in self.layers_mut() {
            match layer {
                Layer::Conv1d(l) => {
                    let fan_in = l.in_channels * l.kernel_size;
                    let fan_out = l.out_channels * l.kernel_size;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for w in &mut l.weights {
                        *w = rng.random_range(-limit..limit);
                    }
                    l.bias.fill(0.0);
                }
                Layer::Dense(l) => {
                    let limit = (6.0 / (l.in_features + l.out_features) as f64).sqrt();
                    for w in &mut l.weights {
                        *w = rng.random_range(-limit..limit);
                    }
                    l.bias.fill(0.0);
                }
                Layer::BatchNorm1d(l) => {
                    l.gamma.fill(1.0);
                    l.beta.fill(0.0);
                    l.running_mean.fill(0.0);
                    l.running_var.fill(1.0);
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Layers of one section.
    pub fn section(&self, s: Section) -> &[Layer] {
        match s {
            Section::Stage1 => &self.stage1,
            Section::Head1 => &self.head1,
            Section::Stage2 => &self.stage2,
            Section::Head2 => &self.head2,
        }
    }

    /// All layers in execution order: stage1, head1, stage2, head2.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        Section::ALL.iter().flat_map(|s| self.section(*s).iter())
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.stage1
            .iter_mut()
            .chain(self.head1.iter_mut())
            .chain(self.stage2.iter_mut())
            .chain(self.head2.iter_mut())
    }

    /// Ledger names parallel to [`layers`](Self::layers).
    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    fn check_segment(&self, segment: &Tensor2) -> Result<()> {
        if segment.shape() != self.input_shape {
            return Err(Error::shape(
                "model forward",
                format!("{}x{}", self.input_shape.0, self.input_shape.1),
                format!("{}x{}", segment.len(), segment.channels()),
            ));
        }
        Ok(())
    }

    fn run(layers: &[Layer], mut x: Tensor2, log: Option<&mut Vec<String>>, names: &[String], offset: usize) -> Result<Tensor2> {
        match log {
            Some(log) => {
                for (i, layer) in layers.iter().enumerate() {
                    x = layer.forward(&x)?;
                    log.push(names[offset + i].clone());
                }
            }
            None => {
                for layer in layers {
                    x = layer.forward(&x)?;
                }
            }
        }
        Ok(x)
    }

    /// Probability vector from the chosen exit. The early exit runs stage 1
    /// and the early head only.
    pub fn forward(&self, segment: &Tensor2, exit: ExitPoint) -> Result<Vec<f64>> {
        self.check_segment(segment)?;
        let mid = Self::run(&self.stage1, segment.clone(), None, &self.names, 0)?;
        let out = match exit {
            ExitPoint::EarlyExit => Self::run(&self.head1, mid, None, &self.names, 0)?,
            ExitPoint::Baseline => {
                let deep = Self::run(&self.stage2, mid, None, &self.names, 0)?;
                Self::run(&self.head2, deep, None, &self.names, 0)?
            }
        };
        Ok(out.into_data())
    }

    /// Both heads' probabilities from one pass; stage 1 runs exactly once.
    pub fn forward_both(&self, segment: &Tensor2) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_segment(segment)?;
        let mid = Self::run(&self.stage1, segment.clone(), None, &self.names, 0)?;
        let early = Self::run(&self.head1, mid.clone(), None, &self.names, 0)?;
        let deep = Self::run(&self.stage2, mid, None, &self.names, 0)?;
        let full = Self::run(&self.head2, deep, None, &self.names, 0)?;
        Ok((early.into_data(), full.into_data()))
    }

    /// Forward pass that also returns the executed layer names in order,
    /// for asserting that shared work is not repeated.
    pub fn forward_traced(&self, segment: &Tensor2, exit: ExitPoint) -> Result<(Vec<f64>, Vec<String>)> {
        self.check_segment(segment)?;
        let mut log = Vec::new();
        let s1 = self.stage1.len();
        let h1 = self.head1.len();
        let s2 = self.stage2.len();
        let mid = Self::run(&self.stage1, segment.clone(), Some(&mut log), &self.names, 0)?;
        let out = match exit {
            ExitPoint::EarlyExit => Self::run(&self.head1, mid, Some(&mut log), &self.names, s1)?,
            ExitPoint::Baseline => {
                let deep = Self::run(&self.stage2, mid, Some(&mut log), &self.names, s1 + h1)?;
                Self::run(&self.head2, deep, Some(&mut log), &self.names, s1 + h1 + s2)?
            }
        };
        Ok((out.into_data(), log))
    }

    /// Stage 1 output alone; the early computation is a strict prefix of the
    /// full one, and this exposes the shared value for verification.
    pub fn shared_activations(&self, segment: &Tensor2) -> Result<Tensor2> {
        self.check_segment(segment)?;
        Self::run(&self.stage1, segment.clone(), None, &self.names, 0)
    }

    /// Class prediction at the chosen exit: argmax with ties broken toward
    /// the lowest index.
    pub fn predict_class(&self, segment: &Tensor2, exit: ExitPoint) -> Result<usize> {
        Ok(argmax(&self.forward(segment, exit)?))
    }

    /// Parameter count along one exit path (shared stage included).
    pub fn path_param_count(&self, exit: ExitPoint) -> usize {
        let shared: usize = self.stage1.iter().map(Layer::param_count).sum();
        match exit {
            ExitPoint::EarlyExit => shared + self.head1.iter().map(Layer::param_count).sum::<usize>(),
            ExitPoint::Baseline => {
                shared
                    + self.stage2.iter().map(Layer::param_count).sum::<usize>()
                    + self.head2.iter().map(Layer::param_count).sum::<usize>()
            }
        }
    }

    /// Total parameters across both heads.
    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    /// Operation count along one exit path under a convention.
    pub fn path_flops(&self, exit: ExitPoint, convention: &FlopConvention) -> Result<u64> {
        let mid_shape = validate_chain(self.input_shape, &self.stage1, "stage1")?;
        let shared = convention.sequence_flops(&self.stage1, self.input_shape)?;
        Ok(match exit {
            ExitPoint::EarlyExit => shared + convention.sequence_flops(&self.head1, mid_shape)?,
            ExitPoint::Baseline => {
                let deep_shape = validate_chain(mid_shape, &self.stage2, "stage2")?;
                shared
                    + convention.sequence_flops(&self.stage2, mid_shape)?
                    + convention.sequence_flops(&self.head2, deep_shape)?
            }
        })
    }

    /// Per-layer cost ledger over all four sections in execution order.
    pub fn cost_ledger(&self, convention: &FlopConvention) -> Result<Vec<CostRow>> {
        let mid = validate_chain(self.input_shape, &self.stage1, "stage1")?;
        let deep = validate_chain(mid, &self.stage2, "stage2")?;
        let names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        let (n1, n2, n3) = (self.stage1.len(), self.head1.len(), self.stage2.len());
        let mut rows = sequence_ledger(&names[..n1], &self.stage1, self.input_shape, convention)?;
        rows.extend(sequence_ledger(&names[n1..n1 + n2], &self.head1, mid, convention)?);
        rows.extend(sequence_ledger(&names[n1 + n2..n1 + n2 + n3], &self.stage2, mid, convention)?);
        rows.extend(sequence_ledger(&names[n1 + n2 + n3..], &self.head2, deep, convention)?);
        Ok(rows)
    }

    /// Flat copy of every trainable parameter, section by section.
    pub fn collect_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            layer.append_params(&mut out);
        }
        out
    }

    /// Overwrites every trainable parameter from a flat vector produced by
    /// [`collect_params`](Self::collect_params).
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.layers().map(Layer::trainable_count).sum();
        if flat.len() != expected {
            return Err(Error::shape(
                "assign_params",
                format!("{expected} values"),
                format!("{} values", flat.len()),
            ));
        }
        let mut cursor = flat;
        for layer in self.layers_mut() {
            let used = layer.load_params(cursor);
            cursor = &cursor[used..];
        }
        Ok(())
    }

    /// Serializes the model to the weight-archive format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_archive_bytes(Precision::F64)).map_err(Error::from)
    }

    /// Serializes with an explicit storage precision.
    pub fn save_with_precision(&self, path: &std::path::Path, precision: Precision) -> Result<()> {
        std::fs::write(path, self.to_archive_bytes(precision)).map_err(Error::from)
    }

    /// Reads a model back from a weight archive.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive_bytes(&std::fs::read(path)?)
    }

    /// The archive as bytes. Single-precision storage rounds every value to
    /// `f32`; double precision round-trips bit-exactly.
    pub fn to_archive_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut header: Vec<(String, String)> = vec![
            ("precision".into(), precision.tag().into()),
            ("input_length".into(), self.input_shape.0.to_string()),
            ("input_channels".into(), self.input_shape.1.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
        ];
        let mut index = 0;
        for s in Section::ALL {
            for layer in self.section(s) {
                header.push((format!("layer.{index}"), format!("{} {}", s.tag(), describe_layer(layer))));
                index += 1;
            }
        }

        let mut payload = Vec::new();
        for layer in self.layers() {
            for block in stored_blocks(layer) {
                match precision {
                    Precision::F64 => push_f64s(&mut payload, block),
                    Precision::F32 => {
                        for v in block {
                            payload.extend_from_slice(&(*v as f32).to_le_bytes());
                        }
                    }
                }
            }
        }
        seal(ARCHIVE_MAGIC, &header, &payload)
    }

    /// Parses an archive produced by
    /// [`to_archive_bytes`](Self::to_archive_bytes), verifying checksum,
    /// version, manifest consistency, and payload size.
    pub fn from_archive_bytes(bytes: &[u8]) -> Result<Self> {
        let file = open_verified(bytes, ARCHIVE_MAGIC)?;
        let precision = Precision::from_tag(file.header.get("precision")?)?;
        let input_shape = (
            file.header.parse::<usize>("input_length")?,
            file.header.parse::<usize>("input_channels")?,
        );
        let num_classes: usize = file.header.parse("num_classes")?;

        let mut sections: [Vec<Layer>; 4] = [vec![], vec![], vec![], vec![]];
        for (index, (key, value)) in file.header.with_prefix("layer.").enumerate() {
            let expected_key = format!("layer.{index}");
            if key != expected_key {
                return Err(Error::Format(format!("layer manifest out of order: found {key}, expected {expected_key}")));
            }
            let (tag, desc) = value
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad layer manifest entry {value:?}")))?;
            let slot = Section::ALL
                .iter()
                .position(|s| s.tag() == tag)
                .ok_or_else(|| Error::Format(format!("unknown model section {tag:?}")))?;
            sections[slot].push(parse_layer(desc)?);
        }
        let [stage1, head1, stage2, head2] = sections;

        let mut model = MultiOutputCnn::from_parts(input_shape, stage1, head1, stage2, head2)
            .map_err(|e| Error::Incompatible(format!("archive manifest does not form a valid model: {e}")))?;
        if model.num_classes != num_classes {
            return Err(Error::Incompatible(format!(
                "archive claims {num_classes} classes but its manifest produces {}",
                model.num_classes
            )));
        }

        let mut cursor = file.payload.as_slice();
        for layer in model.layers_mut() {
            for block in stored_block_sizes(layer) {
                let values = match precision {
                    Precision::F64 => take_f64s(&mut cursor, block.1)?,
                    Precision::F32 => take_f32s(&mut cursor, block.1)?,
                };
                write_stored_block(layer, block.0, &values);
            }
        }
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} unexpected trailing payload bytes", cursor.len())));
        }
        Ok(model)
    }
}

/// Storage precision tag of a weight archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Format(format!("unknown precision tag {other:?}"))),
        }
    }
}

const ARCHIVE_MAGIC: &str = "MXW1\n";

/// Index of the highest value, ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn describe_layer(layer: &Layer) -> String {
    match layer {
        Layer::Conv1d(l) => format!("conv1d:{},{},{},{}", l.kernel_size, l.stride, l.in_channels, l.out_channels),
        Layer::AvgPool1d(l) => format!("avgpool1d:{},{}", l.kernel_size, l.stride),
        Layer::BatchNorm1d(l) => format!("batchnorm:{},{},{}", l.channels, l.epsilon, l.momentum),
        Layer::LeakyRelu(l) => format!("leaky_relu:{}", l.alpha),
        Layer::Flatten(_) => "flatten".into(),
        Layer::Dense(l) => format!("dense:{},{}", l.in_features, l.out_features),
        Layer::Softmax(_) => "softmax".into(),
    }
}

fn parse_layer(desc: &str) -> Result<Layer> {
    let bad = || Error::Format(format!("bad layer descriptor {desc:?}"));
    let (kind, rest) = match desc.split_once(':') {
        Some((k, r)) => (k, r),
        None => (desc, ""),
    };
    let nums: Vec<&str> = if rest.is_empty() { vec![] } else { rest.split(',').collect() };
    let usize_at = |i: usize| -> Result<usize> { nums.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    let f64_at = |i: usize| -> Result<f64> { nums.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    Ok(match kind {
        "conv1d" => Layer::Conv1d(Conv1d::new(usize_at(0)?, usize_at(1)?, usize_at(2)?, usize_at(3)?)),
        "avgpool1d" => Layer::AvgPool1d(AvgPool1d {
            kernel_size: usize_at(0)?,
            stride: usize_at(1)?,
        }),
        "batchnorm" => Layer::BatchNorm1d(BatchNorm1d::new(usize_at(0)?, f64_at(1)?, f64_at(2)?)),
        "leaky_relu" => Layer::LeakyRelu(LeakyRelu { alpha: f64_at(0)? }),
        "flatten" => Layer::Flatten(Flatten),
        "dense" => Layer::Dense(Dense::new(usize_at(0)?, usize_at(1)?)),
        "softmax" => Layer::Softmax(Softmax),
        _ => return Err(bad()),
    })
}

/// Stored value blocks of a layer, in archive order: weights then bias for
/// conv and dense; gamma, beta, running mean, running variance for batch
/// norm.
fn stored_blocks(layer: &Layer) -> Vec<&[f64]> {
    match layer {
        Layer::Conv1d(l) => vec![&l.weights, &l.bias],
        Layer::Dense(l) => vec![&l.weights, &l.bias],
        Layer::BatchNorm1d(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
        _ => vec![],
    }
}

fn stored_block_sizes(layer: &Layer) -> Vec<(usize, usize)> {
    stored_blocks(layer)
        .iter()
        .enumerate()
        .map(|(i, b)| (i, b.len()))
        .collect()
}

fn write_stored_block(layer: &mut Layer, index: usize, values: &[f64]) {
    let target: &mut Vec<f64> = match (layer, index) {
        (Layer::Conv1d(l), 0) => &mut l.weights,
        (Layer::Conv1d(l), 1) => &mut l.bias,
        (Layer::Dense(l), 0) => &mut l.weights,
        (Layer::Dense(l), 1) => &mut l.bias,
        (Layer::BatchNorm1d(l), 0) => &mut l.gamma,
        (Layer::BatchNorm1d(l), 1) => &mut l.beta,
        (Layer::BatchNorm1d(l), 2) => &mut l.running_mean,
        (Layer::BatchNorm1d(l), 3) => &mut l.running_var,
        _ => unreachable!("block index out of range for layer kind"),
    };
    target.copy_from_slice(values);
}

fn take_f32s(payload: &mut &[u8], count: usize) -> Result<Vec<f64>> {
    let need = count * 4;
    if payload.len() < need {
        return Err(Error::Format(format!(
            "payload ended early: needed {need} more bytes, found {}",
            payload.len()
        )));
    }
    let (head, rest) = payload.split_at(need);
    *payload = rest;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_segment(rng: &mut StdRng, shape: (usize, usize)) -> Tensor2 {
        let data = (0..shape.0 * shape.1).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor2::from_data(shape.0, shape.1, data).unwrap()
    }

    #[test]
    fn standard_geometry_matches_the_documented_shape_chain() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 1).unwrap();
        let convention = FlopConvention::minimal();
        let rows = model.cost_ledger(&convention).unwrap();
        let by_name: std::collections::BTreeMap<&str, &CostRow> =
            rows.iter().map(|r| (r.name.as_str(), r)).collect();
        assert_eq!(by_name["conv1"].output_shape, (10, 6));
        assert_eq!(by_name["pool1"].output_shape, (5, 6));
        assert_eq!(by_name["flat1"].output_shape, (30, 1));
        assert_eq!(by_name["conv2"].output_shape, (2, 8));
        assert_eq!(by_name["flat2"].output_shape, (16, 1));
        assert_eq!(by_name["conv1"].params, 216);
        assert_eq!(by_name["bn1"].params, 24);
        assert_eq!(by_name["conv2"].params, 200);
        assert_eq!(by_name["bn2"].params, 32);
        assert_eq!(by_name["dense2"].params, 272);
    }

    #[test]
    fn path_param_formulas_hold_for_all_class_counts() {
        for nc in 1..64 {
            let model = MultiOutputCnn::build(&ModelConfig::with_classes(nc), 0).unwrap();
            assert_eq!(model.path_param_count(ExitPoint::EarlyExit), 240 + 31 * nc, "early, nc={nc}");
            assert_eq!(model.path_param_count(ExitPoint::Baseline), 744 + 17 * nc, "baseline, nc={nc}");
            assert_eq!(model.param_count(), 744 + 48 * nc, "total, nc={nc}");
        }
    }

    #[test]
    fn documented_param_examples() {
        let m8 = MultiOutputCnn::build(&ModelConfig::with_classes(8), 0).unwrap();
        assert_eq!(m8.path_param_count(ExitPoint::EarlyExit), 488);
        assert_eq!(m8.path_param_count(ExitPoint::Baseline), 880);
        assert_eq!(m8.param_count(), 1128);
        let m4 = MultiOutputCnn::build(&ModelConfig::with_classes(4), 0).unwrap();
        assert_eq!(m4.path_param_count(ExitPoint::EarlyExit), 364);
        assert_eq!(m4.path_param_count(ExitPoint::Baseline), 812);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = MultiOutputCnn::build(&ModelConfig::with_classes(4), 77).unwrap();
        let b = MultiOutputCnn::build(&ModelConfig::with_classes(4), 77).unwrap();
        assert_eq!(a, b);
        let c = MultiOutputCnn::build(&ModelConfig::with_classes(4), 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn both_exits_emit_probability_vectors() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 5).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let seg = rand_segment(&mut rng, model.input_shape());
            for exit in [ExitPoint::EarlyExit, ExitPoint::Baseline] {
                let p = model.forward(&seg, exit).unwrap();
                assert_eq!(p.len(), 8);
                assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_dense_weights_give_uniform_probabilities() {
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(4), 3).unwrap();
        let zeros = vec![0.0; model.collect_params().len()];
        model.assign_params(&zeros).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let seg = rand_segment(&mut rng, model.input_shape());
        let p = model.forward(&seg, ExitPoint::EarlyExit).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn full_path_runs_stage_one_exactly_once() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 9).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let seg = rand_segment(&mut rng, model.input_shape());
        let (_, trace) = model.forward_traced(&seg, ExitPoint::Baseline).unwrap();
        assert_eq!(trace.iter().filter(|n| *n == "conv1").count(), 1);
        assert_eq!(
            trace,
            vec!["conv1", "act1", "pool1", "bn1", "conv2", "act2", "bn2", "flat2", "dense2", "act3", "dense3", "softmax2"]
        );
        let (_, trace) = model.forward_traced(&seg, ExitPoint::EarlyExit).unwrap();
        assert_eq!(trace, vec!["conv1", "act1", "pool1", "bn1", "flat1", "dense1", "softmax1"]);
    }

    #[test]
    fn early_computation_is_a_prefix_of_the_full_one() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 11).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..10 {
            let seg = rand_segment(&mut rng, model.input_shape());
            let shared = model.shared_activations(&seg).unwrap();
            // forward_both reuses exactly this tensor; recomputing stage 1
            // from the same input must be bit-identical.
            let again = model.shared_activations(&seg).unwrap();
            assert_eq!(shared, again);
            let (early, full) = model.forward_both(&seg).unwrap();
            assert_eq!(early, model.forward(&seg, ExitPoint::EarlyExit).unwrap());
            assert_eq!(full, model.forward(&seg, ExitPoint::Baseline).unwrap());
        }
    }

    #[test]
    fn predict_class_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.1, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
    }

    #[test]
    fn wrong_segment_shape_is_rejected() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 0).unwrap();
        let err = model.forward(&Tensor2::zeros(31, 7), ExitPoint::EarlyExit).unwrap_err();
        assert!(err.to_string().contains("32x7"), "{err}");
    }

    #[test]
    fn archive_round_trip_preserves_inference_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxw");
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 123).unwrap();
        // Make running stats non-trivial so they are exercised too.
        if let Layer::BatchNorm1d(bn) = &mut model.stage1[3] {
            bn.running_mean = vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6];
            bn.running_var = vec![1.1, 0.9, 1.2, 0.8, 1.3, 0.7];
        }
        model.save(&path).unwrap();
        let loaded = MultiOutputCnn::load(&path).unwrap();
        assert_eq!(loaded.num_classes(), 8);
        assert_eq!(model, loaded);

        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let seg = rand_segment(&mut rng, model.input_shape());
            let (a1, a2) = model.forward_both(&seg).unwrap();
            let (b1, b2) = loaded.forward_both(&seg).unwrap();
            for (x, y) in a1.iter().zip(&b1).chain(a2.iter().zip(&b2)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn single_precision_archive_loads_deterministically() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(4), 55).unwrap();
        let bytes = model.to_archive_bytes(Precision::F32);
        let a = MultiOutputCnn::from_archive_bytes(&bytes).unwrap();
        let b = MultiOutputCnn::from_archive_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        // Values agree with the original to single-precision rounding.
        for (x, y) in model.collect_params().iter().zip(a.collect_params()) {
            assert!((x - y).abs() <= (x.abs() + 1e-3) * 1e-6);
        }
    }

    #[test]
    fn truncated_archive_fails_with_a_checksum_error() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 1).unwrap();
        let bytes = model.to_archive_bytes(Precision::F64);
        let cut = &bytes[..bytes.len() - 100];
        match MultiOutputCnn::from_archive_bytes(cut) {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_archive_fails_with_a_checksum_error() {
        let model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 1).unwrap();
        let mut bytes = model.to_archive_bytes(Precision::F64);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            MultiOutputCnn::from_archive_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn vector_argument_errors_are_descriptive() {
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(8), 1).unwrap();
        let err = model.assign_params(&[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("1100 values"), "{err}");
    }

    #[test]
    fn models_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<MultiOutputCnn>();
    }
}
