//! Routed inference and its price: the adaptive path that lets a decision
//! tree pick an exit per segment, the confidence-threshold alternative, and
//! a fixed-point cost model for deciding whether routing pays for itself.
//!
//! Money math is done in hundredths (microjoules and milliseconds to two
//! decimal places, operation counts exactly), so every ledger cell is
//! reproducible to the digit instead of drifting with float rounding. The
//! ledger deliberately prices only the exit paths; the router's own cost
//! shows up in the feasibility inequality and the per-segment energy
//! figures, which is also how the shipped calibration tables were published.

use crate::metrics::{compute_metrics, ConfusionMatrix, MetricSet};
use crate::model::{argmax, ExitPoint, MultiOutputCnn};
use crate::nn::{Layer, Tensor2};
use crate::obp::ExitDecisionTree;
use crate::preprocess::Segment;
use crate::{Error, Result};

/// A decimal amount held in hundredths, so two-decimal cost arithmetic is
/// exact: 29.86 is the integer 2986.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct Centi(i64);

impl Centi {
    pub const ZERO: Centi = Centi(0);

    pub fn from_hundredths(hundredths: i64) -> Self {
        Centi(hundredths)
    }

    /// Nearest-hundredth conversion for calibration inputs like `29.86`.
    pub fn from_f64(value: f64) -> Self {
        Centi((value * 100.0).round() as i64)
    }

    pub fn hundredths(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn times(self, count: u64) -> Centi {
        Centi(self.0 * count as i64)
    }

    /// Division with half-up rounding on the hundredths digit, matching how
    /// published per-segment averages are quoted.
    pub fn div_round(self, by: u64) -> Centi {
        let d = by as i128;
        assert!(d > 0, "division by zero");
        let n = self.0 as i128;
        Centi((2 * n + d).div_euclid(2 * d) as i64)
    }

    /// Plain two-decimal rendering, e.g. `434.29`.
    pub fn to_plain(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let magnitude = self.0.unsigned_abs();
        format!("{sign}{}.{:02}", magnitude / 100, magnitude % 100)
    }

    /// Two-decimal rendering with thousands separators, e.g. `2,316,627.60`.
    pub fn to_grouped(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let magnitude = self.0.unsigned_abs();
        let mut whole = (magnitude / 100).to_string();
        let mut grouped = String::new();
        while whole.len() > 3 {
            let tail = whole.split_off(whole.len() - 3);
            grouped = format!(",{tail}{grouped}");
        }
        format!("{sign}{whole}{grouped}.{:02}", magnitude % 100)
    }
}

impl std::fmt::Display for Centi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_plain())
    }
}

impl std::ops::Add for Centi {
    type Output = Centi;
    fn add(self, rhs: Centi) -> Centi {
        Centi(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Centi {
    type Output = Centi;
    fn sub(self, rhs: Centi) -> Centi {
        Centi(self.0 - rhs.0)
    }
}

impl serde::Serialize for Centi {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> serde::Deserialize<'de> for Centi {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(Centi::from_f64(f64::deserialize(deserializer)?))
    }
}

/// Per-segment cost of each inference stage on a concrete device: the
/// router (feature read + tree walk), the early-exit path, and the full
/// baseline path. Times in milliseconds, energies in microjoules, work in
/// operation counts.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostProfile {
    pub t_pred: Centi,
    pub t_early: Centi,
    pub t_base: Centi,
    pub e_pred: Centi,
    pub e_early: Centi,
    pub e_base: Centi,
    /// Router operation count; the shipped calibrations price the router in
    /// time and energy only, so this defaults to zero.
    pub f_pred: u64,
    pub f_early: u64,
    pub f_base: u64,
}

impl CostProfile {
    /// Calibration measured on a 48 MHz Cortex-M3 class board for the
    /// stretch-sensor dataset.
    pub fn whar() -> Self {
        CostProfile {
            t_pred: Centi::from_hundredths(196),
            t_early: Centi::from_hundredths(2636),
            t_base: Centi::from_hundredths(3207),
            e_pred: Centi::from_hundredths(2986),
            e_early: Centi::from_hundredths(40173),
            e_base: Centi::from_hundredths(48874),
            f_pred: 0,
            f_early: 5779,
            f_base: 7575,
        }
    }

    /// Calibration for the knee-and-shoe dataset on the same board.
    pub fn opportunity() -> Self {
        CostProfile {
            t_pred: Centi::from_hundredths(161),
            t_early: Centi::from_hundredths(2457),
            t_base: Centi::from_hundredths(3025),
            e_pred: Centi::from_hundredths(2456),
            e_early: Centi::from_hundredths(37469),
            e_base: Centi::from_hundredths(46041),
            f_pred: 0,
            f_early: 5779,
            f_base: 7575,
        }
    }

    /// All-zero profile; every ledger total becomes zero.
    pub fn zeroed() -> Self {
        CostProfile {
            t_pred: Centi::ZERO,
            t_early: Centi::ZERO,
            t_base: Centi::ZERO,
            e_pred: Centi::ZERO,
            e_early: Centi::ZERO,
            e_base: Centi::ZERO,
            f_pred: 0,
            f_early: 0,
            f_base: 0,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "whar" => Ok(Self::whar()),
            "opportunity" => Ok(Self::opportunity()),
            other => Err(Error::Config(format!(
                "unknown cost profile {other:?}; expected opportunity or whar"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_pred", self.t_pred),
            ("t_early", self.t_early),
            ("t_base", self.t_base),
            ("e_pred", self.e_pred),
            ("e_early", self.e_early),
            ("e_base", self.e_base),
        ] {
            if v < Centi::ZERO {
                return Err(Error::Config(format!("cost profile entry {name} is negative")));
            }
        }
        if self.e_base < self.e_early || self.f_base < self.f_early || self.t_base < self.t_early {
            return Err(Error::Config(
                "baseline path must cost at least the early path it extends".into(),
            ));
        }
        Ok(())
    }
}

/// Builds a profile from measured per-segment costs, rejecting negative
/// entries. Times are milliseconds, energies microjoules.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_profile(
    t_pred: f64,
    t_early: f64,
    t_base: f64,
    e_pred: f64,
    e_early: f64,
    e_base: f64,
    f_pred: u64,
    f_early: u64,
    f_base: u64,
) -> Result<CostProfile> {
    let profile = CostProfile {
        t_pred: Centi::from_f64(t_pred),
        t_early: Centi::from_f64(t_early),
        t_base: Centi::from_f64(t_base),
        e_pred: Centi::from_f64(e_pred),
        e_early: Centi::from_f64(e_early),
        e_base: Centi::from_f64(e_base),
        f_pred,
        f_early,
        f_base,
    };
    profile.validate()?;
    Ok(profile)
}

/// One routed segment: which exit ran, what it said, and the probability
/// vector it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub exit: ExitPoint,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Per-segment decisions plus the routed counts the cost model needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingOutcome {
    pub decisions: Vec<RoutingDecision>,
}

impl RoutingOutcome {
    pub fn n(&self) -> u64 {
        self.decisions.len() as u64
    }

    pub fn n_early(&self) -> u64 {
        self.decisions.iter().filter(|d| d.exit == ExitPoint::EarlyExit).count() as u64
    }

    pub fn n_base(&self) -> u64 {
        self.n() - self.n_early()
    }
}

fn run_section(layers: &[Layer], mut x: Tensor2) -> Result<Tensor2> {
    for layer in layers {
        x = layer.forward(&x)?;
    }
    Ok(x)
}

/// Tree-routed inference: the router reads the segment's statistical
/// features and commits to one exit before any network work runs; the
/// shared front is then executed exactly once on the chosen path.
pub fn adaptive_infer(model: &MultiOutputCnn, tree: &ExitDecisionTree, segment: &Segment) -> Result<RoutingDecision> {
    let exit = tree.predict_exit(&segment.features)?;
    let probabilities = model.forward(&segment.data, exit)?;
    Ok(RoutingDecision {
        exit,
        predicted: argmax(&probabilities),
        probabilities,
    })
}

/// Confidence-gated inference: run the early head, and only continue into
/// the deeper stage when its best probability falls short of `threshold`.
pub fn cdln_infer(model: &MultiOutputCnn, segment: &Segment, threshold: f64) -> Result<RoutingDecision> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("confidence threshold {threshold} must be in (0, 1]")));
    }
    let shared = model.shared_activations(&segment.data)?;
    let early = run_section(model.section(crate::model::Section::Head1), shared.clone())?;
    let early = early.into_data();
    let best = early.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best >= threshold {
        return Ok(RoutingDecision {
            exit: ExitPoint::EarlyExit,
            predicted: argmax(&early),
            probabilities: early,
        });
    }
    let deep = run_section(model.section(crate::model::Section::Stage2), shared)?;
    let base = run_section(model.section(crate::model::Section::Head2), deep)?.into_data();
    Ok(RoutingDecision {
        exit: ExitPoint::Baseline,
        predicted: argmax(&base),
        probabilities: base,
    })
}

/// Which inference strategy to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Every segment classified at the early exit.
    EarlyOnly,
    /// Every segment classified at the baseline exit.
    BaselineOnly,
    /// Confidence-gated at the given threshold.
    Cdln(f64),
    /// Tree-routed.
    Adaptive,
}

impl Variant {
    /// Parses `early`, `baseline`, `adaptive`, or `cdln:<threshold>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Variant::EarlyOnly),
            "baseline" => Ok(Variant::BaselineOnly),
            "adaptive" => Ok(Variant::Adaptive),
            other => match other.strip_prefix("cdln:") {
                Some(th) => {
                    let threshold: f64 = th
                        .parse()
                        .map_err(|_| Error::Config(format!("bad confidence threshold {th:?}")))?;
                    Ok(Variant::Cdln(threshold))
                }
                None => Err(Error::Config(format!(
                    "unknown variant {s:?}; expected early, baseline, adaptive, or cdln:<threshold>"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::EarlyOnly => f.write_str("early"),
            Variant::BaselineOnly => f.write_str("baseline"),
            Variant::Cdln(th) => write!(f, "cdln:{th}"),
            Variant::Adaptive => f.write_str("adaptive"),
        }
    }
}

/// Full-dataset evaluation of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub variant: Variant,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub routing: RoutingOutcome,
}

/// Runs a strategy over labeled segments, returning its confusion matrix,
/// metric set, and per-segment routing. `Adaptive` needs the tree; the
/// other variants ignore it.
pub fn evaluate_variant(
    model: &MultiOutputCnn,
    segments: &[Segment],
    variant: Variant,
    tree: Option<&ExitDecisionTree>,
) -> Result<VariantReport> {
    if segments.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty segment set".into()));
    }
    let mut confusion = ConfusionMatrix::new(model.num_classes());
    let mut routing = RoutingOutcome::default();
    for (i, segment) in segments.iter().enumerate() {
        let label = segment
            .label
            .ok_or_else(|| Error::Data(format!("segment {i} is unlabeled; evaluation needs ground truth")))?;
        let decision = match variant {
            Variant::EarlyOnly => {
                let probabilities = model.forward(&segment.data, ExitPoint::EarlyExit)?;
                RoutingDecision {
                    exit: ExitPoint::EarlyExit,
                    predicted: argmax(&probabilities),
                    probabilities,
                }
            }
            Variant::BaselineOnly => {
                let probabilities = model.forward(&segment.data, ExitPoint::Baseline)?;
                RoutingDecision {
                    exit: ExitPoint::Baseline,
                    predicted: argmax(&probabilities),
                    probabilities,
                }
            }
            Variant::Cdln(threshold) => cdln_infer(model, segment, threshold)?,
            Variant::Adaptive => {
                let tree = tree.ok_or_else(|| {
                    Error::Config("adaptive evaluation needs a trained routing tree".into())
                })?;
                adaptive_infer(model, tree, segment)?
            }
        };
        confusion.record(label, decision.predicted)?;
        routing.decisions.push(decision);
    }
    let metrics = compute_metrics(&confusion)?;
    Ok(VariantReport {
        variant,
        confusion,
        metrics,
        routing,
    })
}

/// The energy-feasibility test for routed inference over `n` segments:
/// routing pays only when `n * e_pred + n_early * e_early + n_base * e_base`
/// stays strictly below the all-baseline bill `n * e_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Routed bill including the router's own energy.
    pub adaptive_total: Centi,
    /// All-baseline bill.
    pub baseline_total: Centi,
}

pub fn energy_feasible(profile: &CostProfile, n: u64, n_early: u64, n_base: u64) -> Result<Feasibility> {
    if n_early + n_base != n {
        return Err(Error::Data(format!(
            "routed counts {n_early} + {n_base} do not add up to {n} segments"
        )));
    }
    let adaptive_total = profile.e_pred.times(n) + profile.e_early.times(n_early) + profile.e_base.times(n_base);
    let baseline_total = profile.e_base.times(n);
    Ok(Feasibility {
        feasible: adaptive_total < baseline_total,
        adaptive_total,
        baseline_total,
    })
}

/// Mean routed energy per segment, router included, rounded to the
/// hundredth of a microjoule.
pub fn adaptive_energy_per_segment(profile: &CostProfile, n: u64, n_early: u64, n_base: u64) -> Result<Centi> {
    if n == 0 {
        return Err(Error::Data("no segments to average over".into()));
    }
    if n_early + n_base != n {
        return Err(Error::Data(format!(
            "routed counts {n_early} + {n_base} do not add up to {n} segments"
        )));
    }
    let total = profile.e_pred.times(n) + profile.e_early.times(n_early) + profile.e_base.times(n_base);
    Ok(total.div_round(n))
}

/// One ledger row: a block of segments and its total bill.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub label: String,
    pub segments: u64,
    /// Share of all segments, as a two-decimal percentage.
    pub segment_percent: Centi,
    /// Share of this block's segments classified correctly, when known.
    pub correct_percent: Option<Centi>,
    pub flops: Centi,
    pub time_ms: Centi,
    pub energy_uj: Centi,
}

/// The architecture-cost comparison: what the baseline would spend on every
/// segment, what the routed exits actually spend, and the difference. Router
/// overhead is intentionally not billed here (see [`energy_feasible`] and
/// [`adaptive_energy_per_segment`] for figures that include it).
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub n: u64,
    pub rows: Vec<LedgerRow>,
}

/// Row labels, in order.
pub const LEDGER_ROWS: [&str; 6] = [
    "baseline",
    "adaptive/early",
    "adaptive/baseline",
    "adaptive/total",
    "saving/total",
    "saving/per-segment",
];

/// Per-block correctness counts for the optional ledger column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectCounts {
    /// Correct under all-baseline inference, over all segments.
    pub baseline_all: u64,
    /// Correct among the segments routed to the early exit.
    pub routed_early: u64,
    /// Correct among the segments routed to the baseline exit.
    pub routed_base: u64,
}

fn percent(part: u64, whole: u64) -> Centi {
    if whole == 0 {
        return Centi::ZERO;
    }
    Centi::from_hundredths(10000).times(part).div_round(whole)
}

/// Builds the cost ledger for a routing of `n_early + n_base` segments.
pub fn build_ledger(
    profile: &CostProfile,
    n_early: u64,
    n_base: u64,
    correctness: Option<CorrectCounts>,
) -> Ledger {
    let n = n_early + n_base;
    let flops = |count: u64, per: u64| Centi::from_hundredths((count * per) as i64 * 100);
    let block = |label: &str, count: u64, f: u64, t: Centi, e: Centi, correct: Option<u64>| LedgerRow {
        label: label.to_string(),
        segments: count,
        segment_percent: percent(count, n),
        correct_percent: correct.map(|c| percent(c, count)),
        flops: flops(count, f),
        time_ms: t.times(count),
        energy_uj: e.times(count),
    };

    let baseline = block(
        LEDGER_ROWS[0],
        n,
        profile.f_base,
        profile.t_base,
        profile.e_base,
        correctness.map(|c| c.baseline_all),
    );
    let early = block(
        LEDGER_ROWS[1],
        n_early,
        profile.f_early,
        profile.t_early,
        profile.e_early,
        correctness.map(|c| c.routed_early),
    );
    let deep = block(
        LEDGER_ROWS[2],
        n_base,
        profile.f_base,
        profile.t_base,
        profile.e_base,
        correctness.map(|c| c.routed_base),
    );
    let adaptive = LedgerRow {
        label: LEDGER_ROWS[3].to_string(),
        segments: n,
        segment_percent: percent(n, n),
        correct_percent: correctness.map(|c| percent(c.routed_early + c.routed_base, n)),
        flops: early.flops + deep.flops,
        time_ms: early.time_ms + deep.time_ms,
        energy_uj: early.energy_uj + deep.energy_uj,
    };
    let saving = LedgerRow {
        label: LEDGER_ROWS[4].to_string(),
        segments: n,
        segment_percent: Centi::ZERO,
        correct_percent: None,
        flops: baseline.flops - adaptive.flops,
        time_ms: baseline.time_ms - adaptive.time_ms,
        energy_uj: baseline.energy_uj - adaptive.energy_uj,
    };
    let per_segment = if n == 0 {
        LedgerRow {
            label: LEDGER_ROWS[5].to_string(),
            segments: 0,
            segment_percent: Centi::ZERO,
            correct_percent: None,
            flops: Centi::ZERO,
            time_ms: Centi::ZERO,
            energy_uj: Centi::ZERO,
        }
    } else {
        LedgerRow {
            label: LEDGER_ROWS[5].to_string(),
            segments: n,
            segment_percent: Centi::ZERO,
            correct_percent: None,
            flops: saving.flops.div_round(n),
            time_ms: saving.time_ms.div_round(n),
            energy_uj: saving.energy_uj.div_round(n),
        }
    };
    Ledger {
        n,
        rows: vec![baseline, early, deep, adaptive, saving, per_segment],
    }
}

impl Ledger {
    pub fn row(&self, label: &str) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Machine-readable rendering, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,segments,segment_percent,correct_percent,flops,time_ms,energy_uj\n");
        for r in &self.rows {
            let correct = r.correct_percent.map(|c| c.to_plain()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.segments,
                r.segment_percent.to_plain(),
                correct,
                r.flops.to_plain(),
                r.time_ms.to_plain(),
                r.energy_uj.to_plain()
            ));
        }
        out
    }

    /// Aligned, thousands-separated text table.
    pub fn to_text(&self) -> String {
        let headers = ["block", "segments", "segment %", "correct %", "flops", "time (ms)", "energy (uJ)"];
        let mut table: Vec<[String; 7]> = vec![headers.map(String::from)];
        for r in &self.rows {
            table.push([
                r.label.clone(),
                r.segments.to_string(),
                r.segment_percent.to_plain(),
                r.correct_percent.map(|c| c.to_plain()).unwrap_or_else(|| "-".into()),
                r.flops.to_grouped(),
                r.time_ms.to_grouped(),
                r.energy_uj.to_grouped(),
            ]);
        }
        let widths: Vec<usize> = (0..7)
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            for (c, cell) in row.iter().enumerate() {
                if c == 0 {
                    out.push_str(&format!("{:<width$}", cell, width = widths[0]));
                } else {
                    out.push_str(&format!("  {:>width$}", cell, width = widths[c]));
                }
            }
            out.push('\n');
        }
        out
    }
}
