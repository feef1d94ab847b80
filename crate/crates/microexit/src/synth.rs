//! Seeded synthetic activity data for desk-scale experiments.
//!
//! Each class gets a signal archetype: a tone in its own frequency band
//! plus a DC offset, buried in Gaussian noise. Per-segment normalization
//! wipes out offset and amplitude, so the network has to tell classes apart
//! by waveform, while the statistical features are computed before
//! normalization and keep the offsets, so an exit-routing tree has
//! something to grab onto. That split mirrors how the real pipeline feeds
//! the two consumers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::nn::Tensor2;
use crate::preprocess::{zscore_normalize, Segment};
use crate::{Error, Result};

/// One class's signal shape: a tone at `frequency` cycles per segment with
/// the given amplitude, riding on a DC offset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassArchetype {
    pub frequency: f64,
    pub amplitude: f64,
    pub offset: f64,
}

/// Recipe for a labeled synthetic segment set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub segments_per_class: usize,
    pub channels: usize,
    pub segment_len: usize,
    /// One archetype per class, frequencies pairwise at least half a cycle
    /// apart so the classes stay distinguishable by construction.
    pub archetypes: Vec<ClassArchetype>,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Default recipe for `n` classes: frequencies 1.5, 3.5, 5.5, ... cycles
    /// per segment and offsets spaced 1.5 units apart, against noise 0.1.
    pub fn classes(n: usize) -> Self {
        let archetypes = (0..n)
            .map(|c| ClassArchetype {
                frequency: 1.5 + 2.0 * c as f64,
                amplitude: 1.0,
                offset: 1.5 * c as f64,
            })
            .collect();
        SyntheticSpec {
            segments_per_class: 200,
            channels: 7,
            segment_len: 32,
            archetypes,
            noise: 0.1,
            seed: 42,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.archetypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::Config("synthetic spec has no classes".into()));
        }
        if self.segments_per_class == 0 {
            return Err(Error::Config("segments_per_class must be positive".into()));
        }
        if self.channels == 0 || self.segment_len < 2 {
            return Err(Error::Config(
                "synthetic segments need at least one channel and two samples".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} is not usable", self.noise)));
        }
        for (c, a) in self.archetypes.iter().enumerate() {
            if !(a.frequency > 0.0 && a.amplitude > 0.0) || !a.offset.is_finite() {
                return Err(Error::Config(format!("class {c} archetype is degenerate")));
            }
        }
        for i in 0..self.archetypes.len() {
            for j in i + 1..self.archetypes.len() {
                let gap = (self.archetypes[i].frequency - self.archetypes[j].frequency).abs();
                if gap < 0.5 {
                    return Err(Error::Config(format!(
                        "classes {i} and {j} share a frequency band (gap {gap:.2} cycles)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standard normal draw via the Box-Muller transform.
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates the labeled segment set described by `spec`. Classes are
/// interleaved (labels cycle 0, 1, ..., n-1) and the draw order is fixed,
/// so a seed always produces the same segments.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n_classes = spec.n_classes();
    let total = n_classes * spec.segments_per_class;
    let len = spec.segment_len;
    let channels = spec.channels;
    let mut segments = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % n_classes;
        let arche = &spec.archetypes[label];
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let mut raw = Tensor2::zeros(len, channels);
        for t in 0..len {
            let angle = 2.0 * std::f64::consts::PI * arche.frequency * t as f64 / len as f64 + phase;
            for c in 0..channels {
                // Per-channel phase stagger keeps the channels from being
                // verbatim copies of each other.
                let tone = arche.amplitude * (angle + 0.7 * c as f64).sin();
                *raw.at_mut(t, c) = arche.offset + tone + spec.noise * gaussian(&mut rng);
            }
        }
        let features = segment_features(&raw);
        let (data, flags) = zscore_normalize(&raw);
        segments.push(Segment {
            data,
            features,
            label: Some(label),
            span: (i * len, (i + 1) * len),
            flags,
        });
    }
    Ok(segments)
}

/// Pre-normalization statistics, mirroring the shape of the real dataset
/// feature sets: two channel means plus one channel's extremes.
fn segment_features(raw: &Tensor2) -> Vec<f64> {
    let last = raw.channels() - 1;
    let ch = |want: usize| want.min(last);
    let column = |c: usize| (0..raw.len()).map(move |t| raw.at(t, c));
    let mean = |c: usize| column(c).sum::<f64>() / raw.len() as f64;
    vec![
        mean(ch(0)),
        mean(ch(1)),
        column(ch(2)).fold(f64::INFINITY, f64::min),
        column(ch(2)).fold(f64::NEG_INFINITY, f64::max),
    ]
}
