//! Raw multichannel sensor streams to normalized fixed-length segments with
//! statistical features.
//!
//! The pipeline, in order: resample all channels onto the fastest channel's
//! timeline, smooth with a causal moving average, cut the stream into
//! variable- or fixed-length windows, extract per-segment statistics at full
//! resolution, downsample each window to the model's input length, and
//! z-score each channel within the segment. Features are deliberately taken
//! before downsampling (minima and maxima are more faithful on the
//! full-resolution signal) and after filtering, so the router sees the same
//! smoothed signal the network does.
//!
//! Everything here is a pure function of its inputs; running the pipeline
//! twice on the same stream produces bit-identical segments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::format::{open_verified, push_f64s, seal, take_f64s};
use crate::nn::Tensor2;
use crate::{Error, Result};

/// One channel's identity and acquisition rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub sampling_rate: f64,
}

impl ChannelSpec {
    pub fn new(name: &str, sampling_rate: f64) -> Self {
        ChannelSpec {
            name: name.to_string(),
            unit: String::new(),
            sampling_rate,
        }
    }
}

/// A labeled multichannel recording. Channels may arrive at different rates
/// (and therefore different lengths) until [`align_rates`] puts them on one
/// timeline; the segmentation operations require an aligned stream. Labels,
/// when present, follow the fastest channel's timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub channels: Vec<ChannelSpec>,
    /// Per-channel sample series, indexed `[channel][sample]`.
    pub samples: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl SensorStream {
    pub fn new(channels: Vec<ChannelSpec>, samples: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if channels.len() != samples.len() {
            return Err(Error::Data(format!(
                "{} channel descriptors for {} sample series",
                channels.len(),
                samples.len()
            )));
        }
        if channels.is_empty() {
            return Err(Error::Data("stream has no channels".into()));
        }
        let stream = SensorStream { channels, samples, labels };
        if let Some(labels) = &stream.labels {
            let expected = stream.timeline_len();
            if labels.len() != expected {
                return Err(Error::Data(format!(
                    "{} labels for a timeline of {expected} samples",
                    labels.len()
                )));
            }
        }
        Ok(stream)
    }

    /// Length of the longest channel: the reference timeline.
    pub fn timeline_len(&self) -> usize {
        self.samples.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// True when every channel has the same length.
    pub fn is_aligned(&self) -> bool {
        self.samples.iter().all(|s| s.len() == self.timeline_len())
    }

    /// Column index of a named channel.
    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Data(format!("stream has no channel named {name:?}")))
    }

    /// Reads a stream from CSV: a header row naming the columns, then one
    /// row per timeline sample. Every channel in `specs` must appear; a
    /// `label` column is picked up when present. Cells may be empty for
    /// channels sampled slower than the timeline. Parse failures name the
    /// offending line.
    pub fn from_csv(path: &Path, specs: &[ChannelSpec]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
            .clone();
        let mut columns = Vec::with_capacity(specs.len());
        for spec in specs {
            let idx = headers
                .iter()
                .position(|h| h.trim() == spec.name)
                .ok_or_else(|| Error::Data(format!("missing channel column {:?}", spec.name)))?;
            columns.push(idx);
        }
        let label_col = headers.iter().position(|h| h.trim() == "label");

        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
        let mut labels: Vec<usize> = Vec::new();
        for (row_idx, record) in reader.records().enumerate() {
            let line = row_idx + 2; // header is line 1
            let record = record.map_err(|e| Error::Data(format!("malformed CSV row at line {line}: {e}")))?;
            for (series, &col) in samples.iter_mut().zip(&columns) {
                let cell = record.get(col).unwrap_or("").trim();
                if cell.is_empty() {
                    continue;
                }
                let value: f64 = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("bad number {cell:?} at line {line}")))?;
                series.push(value);
            }
            if let Some(col) = label_col {
                let cell = record.get(col).unwrap_or("").trim();
                let value: usize = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("bad label {cell:?} at line {line}")))?;
                labels.push(value);
            }
        }
        SensorStream::new(
            specs.to_vec(),
            samples,
            if label_col.is_some() { Some(labels) } else { None },
        )
    }
}

/// Which statistic a feature takes over a segment's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Min,
    Max,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Min => "min",
            Statistic::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "min" => Ok(Statistic::Min),
            "max" => Ok(Statistic::Max),
            other => Err(Error::Config(format!("unknown statistic {other:?}"))),
        }
    }

    fn apply(self, values: &[f64]) -> f64 {
        match self {
            Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Statistic::Min => values.iter().cloned().fold(f64::INFINITY, f64::min),
            Statistic::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One feature: a statistic over one named channel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Feature {
    pub statistic: Statistic,
    pub channel: String,
}

impl Feature {
    pub fn new(statistic: Statistic, channel: &str) -> Self {
        Feature {
            statistic,
            channel: channel.to_string(),
        }
    }

    /// Parses `"mean:accX"` form.
    pub fn parse(s: &str) -> Result<Self> {
        let (stat, channel) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("feature {s:?} is not statistic:channel")))?;
        Ok(Feature::new(Statistic::parse(stat)?, channel))
    }
}

impl std::fmt::Display for Feature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.statistic.name(), self.channel)
    }
}

/// How a stream is cut into segments.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Segmentation {
    /// Fixed windows of `window_len` samples advancing by
    /// `round(window_len * (1 - overlap))`.
    SlidingWindow { window_len: usize, overlap: f64 },
    /// Variable windows bounded where the named channel's five-point
    /// derivative crosses `threshold` (computed on the z-scored channel).
    /// Lengths are in seconds, converted at the aligned sampling rate.
    BoundaryDetect {
        channel: String,
        threshold: f64,
        min_len_s: f64,
        max_len_s: f64,
    },
}

/// A dataset's whole preprocessing recipe.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub channels: Vec<ChannelSpec>,
    pub filter_window: usize,
    pub segmentation: Segmentation,
    /// Model input length each segment is resampled to.
    pub target_len: usize,
    pub features: Vec<Feature>,
}

impl DatasetProfile {
    /// Knee-and-shoe IMU recipe: seven 30 Hz channels, fixed 100-sample
    /// windows with 70% overlap, four features.
    pub fn opportunity() -> Self {
        let names = ["accX", "accY", "accZ", "AngVelBodyFrameX", "AngVelBodyFrameY", "AngVelBodyFrameZ", "Compass"];
        DatasetProfile {
            name: "opportunity".into(),
            channels: names.iter().map(|n| ChannelSpec::new(n, 30.0)).collect(),
            filter_window: 8,
            segmentation: Segmentation::SlidingWindow {
                window_len: 100,
                overlap: 0.70,
            },
            target_len: 32,
            features: vec![
                Feature::new(Statistic::Mean, "accX"),
                Feature::new(Statistic::Mean, "accZ"),
                Feature::new(Statistic::Min, "AngVelBodyFrameZ"),
                Feature::new(Statistic::Max, "AngVelBodyFrameZ"),
            ],
        }
    }

    /// Ankle IMU plus knee stretch sensor: six 250 Hz channels and one
    /// 25 Hz channel, boundary-detected windows from the stretch signal,
    /// six features.
    pub fn whar() -> Self {
        let mut channels: Vec<ChannelSpec> = ["Ax", "Ay", "Az", "Gx", "Gy", "Gz"]
            .iter()
            .map(|n| ChannelSpec::new(n, 250.0))
            .collect();
        channels.push(ChannelSpec::new("Stretch", 25.0));
        DatasetProfile {
            name: "whar".into(),
            channels,
            filter_window: 8,
            segmentation: Segmentation::BoundaryDetect {
                channel: "Stretch".into(),
                threshold: 0.05,
                min_len_s: 0.5,
                max_len_s: 4.0,
            },
            target_len: 32,
            features: vec![
                Feature::new(Statistic::Mean, "Ax"),
                Feature::new(Statistic::Mean, "Az"),
                Feature::new(Statistic::Min, "Gz"),
                Feature::new(Statistic::Max, "Gz"),
                Feature::new(Statistic::Min, "Stretch"),
                Feature::new(Statistic::Max, "Stretch"),
            ],
        }
    }

    /// Profile by name.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "opportunity" => Ok(Self::opportunity()),
            "whar" => Ok(Self::whar()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected opportunity or whar"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("profile has no channels".into()));
        }
        if self.filter_window == 0 {
            return Err(Error::Config("filter_window must be at least 1".into()));
        }
        if self.target_len < 2 {
            return Err(Error::Config("target_len must be at least 2".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Config("profile declares no features".into()));
        }
        for f in &self.features {
            if !self.channels.iter().any(|c| c.name == f.channel) {
                return Err(Error::Config(format!("feature {f} names a channel the profile lacks")));
            }
        }
        match &self.segmentation {
            Segmentation::SlidingWindow { window_len, overlap } => {
                if *window_len == 0 {
                    return Err(Error::Config("window_len must be positive".into()));
                }
                if !(0.0..1.0).contains(overlap) {
                    return Err(Error::Config(format!("overlap {overlap} must be in [0, 1)")));
                }
            }
            Segmentation::BoundaryDetect {
                channel,
                threshold,
                min_len_s,
                max_len_s,
            } => {
                if !self.channels.iter().any(|c| &c.name == channel) {
                    return Err(Error::Config(format!("boundary channel {channel:?} is not in the profile")));
                }
                if !(threshold > &0.0) {
                    return Err(Error::Config("boundary threshold must be positive".into()));
                }
                if !(min_len_s > &0.0 && max_len_s >= min_len_s) {
                    return Err(Error::Config("need 0 < min_len_s <= max_len_s".into()));
                }
            }
        }
        Ok(())
    }
}

/// A variable-length, full-resolution window cut from a stream, before
/// downsampling and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    /// `len x channels`, on the aligned filtered timeline.
    pub data: Tensor2,
    pub label: Option<usize>,
    /// Half-open `[start, end)` sample range on the aligned timeline.
    pub span: (usize, usize),
}

/// Set on a segment when some channel was constant within the window and
/// its z-scores were defined as zero instead of computed.
pub const FLAG_CONSTANT_CHANNEL: u32 = 1;

/// A model-ready segment: normalized fixed-length data plus the statistical
/// features the exit router reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `target_len x channels`, z-scored per channel.
    pub data: Tensor2,
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub span: (usize, usize),
    pub flags: u32,
}

impl Segment {
    pub fn had_constant_channel(&self) -> bool {
        self.flags & FLAG_CONSTANT_CHANNEL != 0
    }
}

/// Causal moving average: sample `i` becomes the mean of the last
/// `min(window, i+1)` samples of its channel. Output length equals input
/// length; the shrinking warm-up keeps the filter streamable.
pub fn moving_average(stream: &SensorStream, window: usize) -> Result<SensorStream> {
    if window == 0 {
        return Err(Error::Config("moving average window must be at least 1".into()));
    }
    if stream.samples.iter().all(Vec::is_empty) {
        return Err(Error::Data("cannot filter an empty stream".into()));
    }
    let samples = stream
        .samples
        .iter()
        .map(|series| {
            let mut out = Vec::with_capacity(series.len());
            let mut acc = 0.0;
            for i in 0..series.len() {
                acc += series[i];
                if i >= window {
                    acc -= series[i - window];
                }
                out.push(acc / window.min(i + 1) as f64);
            }
            out
        })
        .collect();
    Ok(SensorStream {
        channels: stream.channels.clone(),
        samples,
        labels: stream.labels.clone(),
    })
}

/// Resamples every channel onto the fastest channel's timeline by linear
/// interpolation, so the whole stream shares one length and rate.
pub fn align_rates(stream: &SensorStream) -> Result<SensorStream> {
    for c in &stream.channels {
        if !(c.sampling_rate > 0.0) {
            return Err(Error::Data(format!("channel {:?} has non-positive sampling rate", c.name)));
        }
    }
    let fastest = stream
        .channels
        .iter()
        .map(|c| c.sampling_rate)
        .fold(0.0, f64::max);
    let target_len = stream
        .channels
        .iter()
        .zip(&stream.samples)
        .filter(|(c, _)| c.sampling_rate == fastest)
        .map(|(_, s)| s.len())
        .max()
        .unwrap_or(0);
    if target_len == 0 {
        return Err(Error::Data("stream has no samples on the fastest channel".into()));
    }

    let mut samples = Vec::with_capacity(stream.samples.len());
    for (spec, series) in stream.channels.iter().zip(&stream.samples) {
        if spec.sampling_rate == fastest && series.len() == target_len {
            samples.push(series.clone());
            continue;
        }
        if series.is_empty() {
            return Err(Error::Data(format!("channel {:?} is empty", spec.name)));
        }
        let ratio = spec.sampling_rate / fastest;
        let mut out = Vec::with_capacity(target_len);
        for k in 0..target_len {
            // Position of fast-timeline sample k on this channel's own
            // timeline, clamped to the recorded range.
            let pos = (k as f64 * ratio).min((series.len() - 1) as f64);
            out.push(interpolate(series, pos));
        }
        samples.push(out);
    }
    let channels = stream
        .channels
        .iter()
        .map(|c| ChannelSpec {
            name: c.name.clone(),
            unit: c.unit.clone(),
            sampling_rate: fastest,
        })
        .collect();
    SensorStream::new(channels, samples, stream.labels.clone())
}

fn interpolate(series: &[f64], pos: f64) -> f64 {
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(series.len() - 1);
    let frac = pos - lo as f64;
    series[lo] * (1.0 - frac) + series[hi] * frac
}

/// Majority label over a window; ties go to the label seen earliest in the
/// window.
fn majority_label(labels: &[usize]) -> Option<usize> {
    if labels.is_empty() {
        return None;
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let entry = tally.entry(l).or_insert((0, i));
        entry.0 += 1;
    }
    tally
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(label, _)| label)
}

fn window_to_raw(stream: &SensorStream, start: usize, end: usize) -> RawSegment {
    let channels = stream.samples.len();
    let mut data = Tensor2::zeros(end - start, channels);
    for (c, series) in stream.samples.iter().enumerate() {
        for (t, i) in (start..end).enumerate() {
            *data.at_mut(t, c) = series[i];
        }
    }
    let label = stream
        .labels
        .as_ref()
        .and_then(|labels| majority_label(&labels[start..end]));
    RawSegment {
        data,
        label,
        span: (start, end),
    }
}

/// Cuts an aligned stream into fixed windows of `window_len` advancing by
/// `round(window_len * (1 - overlap))` samples. A stream shorter than one
/// window yields no segments (with a log warning), not an error.
pub fn sliding_window_segment(stream: &SensorStream, window_len: usize, overlap: f64) -> Result<Vec<RawSegment>> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} must be in [0, 1)")));
    }
    if !stream.is_aligned() {
        return Err(Error::Data("stream must be rate-aligned before segmentation".into()));
    }
    let len = stream.timeline_len();
    if len < window_len {
        log::warn!("stream of {len} samples is shorter than one {window_len}-sample window; no segments");
        return Ok(Vec::new());
    }
    let stride = ((window_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut segments = Vec::new();
    let mut start = 0;
    while start + window_len <= len {
        segments.push(window_to_raw(stream, start, start + window_len));
        start += stride;
    }
    Ok(segments)
}

/// Five-point central derivative `(-s[i+2] + 8 s[i+1] - 8 s[i-1] + s[i-2]) / 12`,
/// exact for polynomials up to degree four. The four edge samples, where the
/// stencil does not fit, are reported as zero.
pub fn five_point_derivative(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let mut d = vec![0.0; n];
    if n < 5 {
        return d;
    }
    for i in 2..n - 2 {
        d[i] = (-series[i + 2] + 8.0 * series[i + 1] - 8.0 * series[i - 1] + series[i - 2]) / 12.0;
    }
    d
}

/// Cuts an aligned stream at activity transitions detected on one channel.
///
/// The channel is z-scored over the whole stream and differentiated with the
/// five-point stencil. A boundary opens where `|d|` rises to `threshold`
/// from below, and closes at the start of the first quiet run of `min_len`
/// samples. Consecutive boundaries delimit segments covering the entire
/// stream; a crossing-free stream is one whole-stream segment. Spans
/// shorter than `min_len` are merged into their successor and spans longer
/// than `max_len` are split into near-equal parts no longer than `max_len`.
pub fn dynamic_segment(
    stream: &SensorStream,
    boundary_channel: &str,
    threshold: f64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<RawSegment>> {
    if !stream.is_aligned() {
        return Err(Error::Data("stream must be rate-aligned before segmentation".into()));
    }
    if min_len < 5 {
        return Err(Error::Config("min_len must be at least the 5-sample stencil".into()));
    }
    if max_len < min_len {
        return Err(Error::Config("max_len must be at least min_len".into()));
    }
    let idx = stream.channel_index(boundary_channel)?;
    let series = &stream.samples[idx];
    let n = series.len();
    if n == 0 {
        return Err(Error::Data("cannot segment an empty stream".into()));
    }

    // Scale-free thresholding: z-score the boundary channel first.
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scaled: Vec<f64> = if var.sqrt() < 1e-12 {
        vec![0.0; n]
    } else {
        let inv = 1.0 / var.sqrt();
        series.iter().map(|v| (v - mean) * inv).collect()
    };
    let deriv = five_point_derivative(&scaled);

    let mut boundaries = Vec::new();
    let mut active = false;
    let mut quiet_run = 0usize;
    for (i, d) in deriv.iter().enumerate() {
        let loud = d.abs() >= threshold;
        if !active {
            if loud {
                boundaries.push(i);
                active = true;
                quiet_run = 0;
            }
        } else if loud {
            quiet_run = 0;
        } else {
            quiet_run += 1;
            if quiet_run == min_len {
                boundaries.push(i + 1 - min_len);
                active = false;
                quiet_run = 0;
            }
        }
    }

    // Spans between consecutive boundaries, covering the whole stream.
    let mut cuts = Vec::with_capacity(boundaries.len() + 2);
    cuts.push(0);
    for b in boundaries {
        if b > *cuts.last().expect("cuts starts with 0") && b < n {
            cuts.push(b);
        }
    }
    cuts.push(n);

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i + 1 < cuts.len() {
        let start = cuts[i];
        let mut end = cuts[i + 1];
        // Too-short spans swallow their successors.
        while end - start < min_len && i + 2 < cuts.len() {
            i += 1;
            end = cuts[i + 1];
        }
        if end - start < min_len {
            // Tail stub: give it to the previous span if one exists.
            if let Some(last) = spans.last_mut() {
                last.1 = end;
            } else {
                spans.push((start, end));
            }
        } else {
            spans.push((start, end));
        }
        i += 1;
    }

    let mut segments = Vec::new();
    for (start, end) in spans {
        let len = end - start;
        let parts = len.div_ceil(max_len);
        let base = len / parts;
        let extra = len % parts;
        let mut s = start;
        for p in 0..parts {
            let step = base + usize::from(p < extra);
            segments.push(window_to_raw(stream, s, s + step));
            s += step;
        }
        debug_assert_eq!(s, end);
    }
    Ok(segments)
}

/// Linearly resamples each channel to `target` samples at equally spaced
/// positions over `[0, len-1]`, endpoints preserved.
pub fn downsample(data: &Tensor2, target: usize) -> Result<Tensor2> {
    let len = data.len();
    if len < 2 {
        return Err(Error::Data(format!("cannot resample a {len}-sample segment")));
    }
    if target < 2 {
        return Err(Error::Config("resample target must be at least 2".into()));
    }
    if len == target {
        return Ok(data.clone());
    }
    let channels = data.channels();
    let mut out = Tensor2::zeros(target, channels);
    let step = (len - 1) as f64 / (target - 1) as f64;
    for c in 0..channels {
        let series: Vec<f64> = (0..len).map(|t| data.at(t, c)).collect();
        for k in 0..target {
            *out.at_mut(k, c) = interpolate(&series, (k as f64 * step).min((len - 1) as f64));
        }
    }
    Ok(out)
}

/// Computes the profile's feature vector from a full-resolution segment.
pub fn extract_features(raw: &RawSegment, channels: &[ChannelSpec], features: &[Feature]) -> Result<Vec<f64>> {
    if raw.data.is_empty() {
        return Err(Error::Data("cannot extract features from an empty segment".into()));
    }
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let c = channels
            .iter()
            .position(|spec| spec.name == f.channel)
            .ok_or_else(|| Error::Data(format!("segment has no channel named {:?}", f.channel)))?;
        let series: Vec<f64> = (0..raw.data.len()).map(|t| raw.data.at(t, c)).collect();
        out.push(f.statistic.apply(&series));
    }
    Ok(out)
}

/// Z-scores each channel over the segment with the population standard
/// deviation. A channel with deviation below `1e-12` becomes all zeros and
/// raises [`FLAG_CONSTANT_CHANNEL`] in the returned flags.
pub fn zscore_normalize(data: &Tensor2) -> (Tensor2, u32) {
    let (len, channels) = data.shape();
    let mut out = Tensor2::zeros(len, channels);
    let mut flags = 0;
    let n = len as f64;
    for c in 0..channels {
        let mean = (0..len).map(|t| data.at(t, c)).sum::<f64>() / n;
        let var = (0..len).map(|t| (data.at(t, c) - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            flags |= FLAG_CONSTANT_CHANNEL;
            continue; // channel stays zero
        }
        for t in 0..len {
            *out.at_mut(t, c) = (data.at(t, c) - mean) / std;
        }
    }
    (out, flags)
}

/// Runs the whole pipeline for one stream under a profile: rate alignment,
/// moving average, segmentation, feature extraction, downsampling, and
/// per-segment normalization.
pub fn process(stream: &SensorStream, profile: &DatasetProfile) -> Result<Vec<Segment>> {
    profile.validate()?;
    let aligned = align_rates(stream)?;
    let filtered = moving_average(&aligned, profile.filter_window)?;
    let rate = filtered.channels[0].sampling_rate;
    let raws = match &profile.segmentation {
        Segmentation::SlidingWindow { window_len, overlap } => {
            sliding_window_segment(&filtered, *window_len, *overlap)?
        }
        Segmentation::BoundaryDetect {
            channel,
            threshold,
            min_len_s,
            max_len_s,
        } => {
            let min_len = ((min_len_s * rate).round() as usize).max(5);
            let max_len = ((max_len_s * rate).round() as usize).max(min_len);
            dynamic_segment(&filtered, channel, *threshold, min_len, max_len)?
        }
    };
    raws.iter()
        .map(|raw| {
            let features = extract_features(raw, &filtered.channels, &profile.features)?;
            let resampled = downsample(&raw.data, profile.target_len)?;
            let (data, flags) = zscore_normalize(&resampled);
            Ok(Segment {
                data,
                features,
                label: raw.label,
                span: raw.span,
                flags,
            })
        })
        .collect()
}

const SEGMENT_MAGIC: &str = "MXS1\n";

/// Writes segments to the binary segment-set format: a text header (count,
/// channels, feature dimension, segment length), then per segment its span,
/// label, flags, double-precision features, and single-precision data block,
/// then the file checksum.
pub fn save_segments(path: &Path, segments: &[Segment]) -> Result<()> {
    std::fs::write(path, segments_to_bytes(segments)?).map_err(Error::from)
}

/// Reads a segment-set file back.
pub fn load_segments(path: &Path) -> Result<Vec<Segment>> {
    segments_from_bytes(&std::fs::read(path)?)
}

/// In-memory form of [`save_segments`].
pub fn segments_to_bytes(segments: &[Segment]) -> Result<Vec<u8>> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty segment set".into()))?;
    let (target_len, channels) = first.data.shape();
    let feature_dim = first.features.len();
    for (i, s) in segments.iter().enumerate() {
        if s.data.shape() != (target_len, channels) || s.features.len() != feature_dim {
            return Err(Error::Data(format!(
                "segment {i} has shape {:?}/{} features, expected {:?}/{}",
                s.data.shape(),
                s.features.len(),
                (target_len, channels),
                feature_dim
            )));
        }
    }
    let header = vec![
        ("count".to_string(), segments.len().to_string()),
        ("channels".to_string(), channels.to_string()),
        ("feature_dim".to_string(), feature_dim.to_string()),
        ("segment_len".to_string(), target_len.to_string()),
    ];
    let mut payload = Vec::new();
    for s in segments {
        payload.extend_from_slice(&(s.span.0 as u64).to_le_bytes());
        payload.extend_from_slice(&(s.span.1 as u64).to_le_bytes());
        let label: i32 = s.label.map_or(-1, |l| l as i32);
        payload.extend_from_slice(&label.to_le_bytes());
        payload.extend_from_slice(&s.flags.to_le_bytes());
        push_f64s(&mut payload, &s.features);
        for v in s.data.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(seal(SEGMENT_MAGIC, &header, &payload))
}

/// In-memory form of [`load_segments`].
pub fn segments_from_bytes(bytes: &[u8]) -> Result<Vec<Segment>> {
    let file = open_verified(bytes, SEGMENT_MAGIC)?;
    let count: usize = file.header.parse("count")?;
    let channels: usize = file.header.parse("channels")?;
    let feature_dim: usize = file.header.parse("feature_dim")?;
    let segment_len: usize = file.header.parse("segment_len")?;

    let mut cursor = file.payload.as_slice();
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let start = take_u64(&mut cursor)?;
        let end = take_u64(&mut cursor)?;
        let label_raw = take_i32(&mut cursor)?;
        let flags = take_u32(&mut cursor)?;
        let features = take_f64s(&mut cursor, feature_dim)?;
        let mut data = Tensor2::zeros(segment_len, channels);
        for t in 0..segment_len {
            for c in 0..channels {
                *data.at_mut(t, c) = take_f32(&mut cursor)? as f64;
            }
        }
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        segments.push(Segment {
            data,
            features,
            label,
            span: (start as usize, end as usize),
            flags,
        });
    }
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} unexpected trailing payload bytes", cursor.len())));
    }
    Ok(segments)
}

fn take_bytes<'a>(cursor: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(Error::Format(format!(
            "payload ended early: needed {n} more bytes, found {}",
            cursor.len()
        )));
    }
    let (head, rest) = cursor.split_at(n);
    *cursor = rest;
    Ok(head)
}

fn take_u64(cursor: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take_bytes(cursor, 8)?.try_into().expect("8 bytes")))
}

fn take_i32(cursor: &mut &[u8]) -> Result<i32> {
    Ok(i32::from_le_bytes(take_bytes(cursor, 4)?.try_into().expect("4 bytes")))
}

fn take_u32(cursor: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take_bytes(cursor, 4)?.try_into().expect("4 bytes")))
}

fn take_f32(cursor: &mut &[u8]) -> Result<f32> {
    Ok(f32::from_le_bytes(take_bytes(cursor, 4)?.try_into().expect("4 bytes")))
}
