//! One function per subcommand. Every command reads its inputs from the
//! resolved context, writes artifacts and a CSV/text report pair into the
//! output directory, and prints the text report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use microexit::engine::{
    adaptive_energy_per_segment, build_ledger, energy_feasible, evaluate_variant, CorrectCounts,
    CostProfile, Variant,
};
use microexit::model::{argmax, ExitPoint, ModelConfig, MultiOutputCnn};
use microexit::obp::{exit_index, label_exits, obp_confusion, train_tree, ExitDecisionTree};
use microexit::preprocess::{
    load_segments, process, save_segments, ChannelSpec, DatasetProfile, Segment, SensorStream,
};
use microexit::trainer::{stratified_kfold, train, Split};
use microexit::{Error, Result};

use crate::config::PipelineConfig;
use crate::report::{emit, percent, Provenance};

pub struct Ctx {
    pub config: PipelineConfig,
    /// Raw bytes of the config file, hashed into every report header.
    pub config_bytes: Vec<u8>,
    pub seed: u64,
    pub out: PathBuf,
    /// The `--profile` flag, overriding the config's profile names.
    pub profile_flag: Option<String>,
}

impl Ctx {
    fn segments_path(&self) -> PathBuf {
        self.out.join("segments.mxs")
    }

    fn model_path(&self) -> PathBuf {
        self.out.join("model.mxw")
    }

    fn tree_path(&self) -> PathBuf {
        self.out.join("tree.mxt")
    }

    fn provenance(&self, command: &str) -> Provenance {
        Provenance::new(command, &self.config_bytes, self.seed)
    }

    fn dataset_profile(&self) -> Result<DatasetProfile> {
        let name = self
            .profile_flag
            .as_deref()
            .or(self.config.preprocess.profile.as_deref())
            .ok_or_else(|| {
                Error::Config("no dataset profile; pass --profile or set preprocess.profile".into())
            })?;
        DatasetProfile::named(name)
    }

    fn cost_profile(&self) -> Result<CostProfile> {
        if let Some(calibration) = &self.config.cost.calibration {
            return Ok(calibration.clone());
        }
        let name = self
            .profile_flag
            .as_deref()
            .or(self.config.cost.profile.as_deref())
            .ok_or_else(|| {
                Error::Config(
                    "no cost profile; pass --profile, set cost.profile, or give [cost.calibration]".into(),
                )
            })?;
        CostProfile::named(name)
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "missing {what} at {}; {hint} first",
            path.display()
        )))
    }
}

fn load_segment_artifact(ctx: &Ctx) -> Result<Vec<Segment>> {
    require(
        &ctx.segments_path(),
        "segment file",
        "run `microexit synth` or `microexit preprocess`",
    )?;
    load_segments(&ctx.segments_path())
}

fn load_model_artifact(ctx: &Ctx) -> Result<MultiOutputCnn> {
    require(&ctx.model_path(), "weight archive", "run `microexit train`")?;
    MultiOutputCnn::load(&ctx.model_path())
}

fn load_tree_artifact(ctx: &Ctx) -> Result<ExitDecisionTree> {
    require(&ctx.tree_path(), "exit tree", "run `microexit train-obp`")?;
    ExitDecisionTree::load(&ctx.tree_path())
}

/// Class labels of every segment; unlabeled data cannot be split or scored.
fn labels_of(segments: &[Segment]) -> Result<Vec<usize>> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .ok_or_else(|| Error::Data(format!("segment {i} is unlabeled")))
        })
        .collect()
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

fn fold_split(ctx: &Ctx, labels: &[usize]) -> Result<Split> {
    let section = &ctx.config.train;
    if section.fold >= section.folds {
        return Err(Error::Config(format!(
            "train.fold {} out of range for {} folds",
            section.fold, section.folds
        )));
    }
    let folds = stratified_kfold(labels, section.folds, section.val_fraction, ctx.seed)?;
    Ok(folds.into_iter().nth(section.fold).unwrap())
}

/// The segments a report scores: the held-out fold, or everything.
fn scoped(ctx: &Ctx, segments: &[Segment]) -> Result<Vec<Segment>> {
    match ctx.config.evaluate.scope.as_str() {
        "all" => Ok(segments.to_vec()),
        _ => {
            let labels = labels_of(segments)?;
            let split = fold_split(ctx, &labels)?;
            Ok(split.test.iter().map(|&i| segments[i].clone()).collect())
        }
    }
}

fn class_histogram(segments: &[Segment]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in segments {
        if let Some(label) = s.label {
            *counts.entry(label).or_insert(0) += 1;
        }
    }
    counts
}

fn segment_summary_rows(segments: &[Segment]) -> Vec<Vec<String>> {
    let mut rows = vec![vec!["class".to_string(), "segments".to_string()]];
    for (class, count) in class_histogram(segments) {
        rows.push(vec![class.to_string(), count.to_string()]);
    }
    let unlabeled = segments.iter().filter(|s| s.label.is_none()).count();
    if unlabeled > 0 {
        rows.push(vec!["unlabeled".into(), unlabeled.to_string()]);
    }
    rows.push(vec!["total".into(), segments.len().to_string()]);
    rows
}

// ----------------------------------------------------------------- synth

pub fn synth(ctx: &Ctx) -> Result<()> {
    let spec = ctx.config.synth.to_spec(ctx.seed);
    let segments = microexit::synth::generate(&spec)?;
    save_segments(&ctx.segments_path(), &segments)?;
    log::info!("wrote {}", ctx.segments_path().display());

    let mut provenance = ctx.provenance("synth");
    provenance.artifact(&ctx.segments_path())?;
    let rows = segment_summary_rows(&segments);
    let notes = vec![format!(
        "{} classes, noise {}, {} samples x {} channels per segment",
        spec.n_classes(),
        spec.noise,
        spec.segment_len,
        spec.channels
    )];
    let text = emit(&ctx.out, "synth", &provenance, &rows, &notes)?;
    print!("{text}");
    Ok(())
}

// ------------------------------------------------------------ preprocess

pub fn preprocess(ctx: &Ctx) -> Result<()> {
    let profile = ctx.dataset_profile()?;
    let input = ctx
        .config
        .preprocess
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("no input CSV; set preprocess.input".into()))?;

    // Vendor headers are matched through the rename map, then the canonical
    // channel names are restored so the profile's features resolve.
    let mapping = &ctx.config.preprocess.columns;
    let csv_specs: Vec<ChannelSpec> = profile
        .channels
        .iter()
        .map(|c| ChannelSpec {
            name: mapping.get(&c.name).cloned().unwrap_or_else(|| c.name.clone()),
            ..c.clone()
        })
        .collect();
    let mut stream = SensorStream::from_csv(input, &csv_specs)?;
    stream.channels = profile.channels.clone();

    let segments = process(&stream, &profile)?;
    save_segments(&ctx.segments_path(), &segments)?;
    log::info!("wrote {}", ctx.segments_path().display());

    let mut provenance = ctx.provenance("preprocess");
    provenance.artifact(input)?;
    provenance.artifact(&ctx.segments_path())?;
    let rows = segment_summary_rows(&segments);
    let flagged = segments.iter().filter(|s| s.had_constant_channel()).count();
    let notes = vec![format!(
        "profile {}, {} raw samples in, {} segments out, {} with a constant channel",
        profile.name,
        stream.timeline_len(),
        segments.len(),
        flagged
    )];
    let text = emit(&ctx.out, "preprocess", &provenance, &rows, &notes)?;
    print!("{text}");
    Ok(())
}

// ----------------------------------------------------------------- train

pub fn train_command(ctx: &Ctx) -> Result<()> {
    let segments = load_segment_artifact(ctx)?;
    let labels = labels_of(&segments)?;
    let split = fold_split(ctx, &labels)?;
    let config = ctx.config.train.to_config(ctx.seed);

    let model_config = ModelConfig {
        input_length: segments[0].data.len(),
        input_channels: segments[0].data.channels(),
        ..ModelConfig::with_classes(class_count(&labels))
    };
    let mut model = MultiOutputCnn::build(&model_config, ctx.seed)?;
    let report = train(&mut model, &segments, &split.train, &split.val, &config)?;
    model.save(&ctx.model_path())?;
    log::info!("wrote {}", ctx.model_path().display());

    let mut provenance = ctx.provenance("train");
    provenance.artifact(&ctx.segments_path())?;
    provenance.artifact(&ctx.model_path())?;

    // The per-epoch log is its own CSV artifact next to the summary.
    let log_path = ctx.out.join("train_log.csv");
    std::fs::write(&log_path, provenance.header() + &report.to_csv())
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", log_path.display())))?;
    log::info!("wrote {}", log_path.display());

    let test_segments: Vec<Segment> = split.test.iter().map(|&i| segments[i].clone()).collect();
    let early = evaluate_variant(&model, &test_segments, Variant::EarlyOnly, None)?;
    let base = evaluate_variant(&model, &test_segments, Variant::BaselineOnly, None)?;

    let mut rows = vec![vec!["metric".to_string(), "value".to_string()]];
    rows.push(vec!["epochs".into(), report.epochs.len().to_string()]);
    rows.push(vec![
        "best_epoch".into(),
        report.best_epoch.map_or("final".into(), |e| e.to_string()),
    ]);
    rows.push(vec!["train_segments".into(), split.train.len().to_string()]);
    rows.push(vec!["val_segments".into(), split.val.len().to_string()]);
    rows.push(vec!["test_segments".into(), split.test.len().to_string()]);
    rows.push(vec!["test_accuracy_early".into(), percent(early.metrics.accuracy)]);
    rows.push(vec!["test_accuracy_baseline".into(), percent(base.metrics.accuracy)]);
    rows.push(vec!["test_weighted_f1_early".into(), percent(early.metrics.weighted_f1)]);
    rows.push(vec!["test_weighted_f1_baseline".into(), percent(base.metrics.weighted_f1)]);
    let text = emit(&ctx.out, "train", &provenance, &rows, &[])?;
    print!("{text}");
    Ok(())
}

// ------------------------------------------------------------- train-obp

/// Routing supervision for a set of segments: features plus the exit each
/// segment should take, derived from what the two heads actually predict.
fn routing_labels(model: &MultiOutputCnn, segments: &[Segment]) -> Result<(Vec<Vec<f64>>, Vec<ExitPoint>)> {
    let mut early_preds = Vec::with_capacity(segments.len());
    let mut base_preds = Vec::with_capacity(segments.len());
    let mut truth = Vec::with_capacity(segments.len());
    let mut features = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::Data(format!("segment {i} is unlabeled")))?;
        let (early, base) = model.forward_both(&s.data)?;
        early_preds.push(argmax(&early));
        base_preds.push(argmax(&base));
        truth.push(label);
        features.push(s.features.clone());
    }
    let exits = label_exits(&early_preds, &base_preds, &truth)?;
    Ok((features, exits))
}

pub fn train_obp(ctx: &Ctx) -> Result<()> {
    let model = load_model_artifact(ctx)?;
    let segments = load_segment_artifact(ctx)?;
    let labels = labels_of(&segments)?;
    let split = fold_split(ctx, &labels)?;
    let params = ctx.config.obp.to_params(ctx.seed);

    let pick = |ids: &[usize]| -> Vec<Segment> { ids.iter().map(|&i| segments[i].clone()).collect() };
    let fit_segments = pick(&split.train);
    let (features, exits) = routing_labels(&model, &fit_segments)?;
    let tree = train_tree(&features, &exits, &params)?;
    tree.save(&ctx.tree_path())?;
    log::info!("wrote {}", ctx.tree_path().display());

    let mut provenance = ctx.provenance("train-obp");
    provenance.artifact(&ctx.segments_path())?;
    provenance.artifact(&ctx.model_path())?;
    provenance.artifact(&ctx.tree_path())?;

    let mut rows = vec![vec![
        "split".to_string(),
        "segments".to_string(),
        "oracle_early".to_string(),
        "oracle_baseline".to_string(),
        "tree_accuracy".to_string(),
    ]];
    for (name, ids) in [("fit", &split.train), ("validation", &split.val), ("test", &split.test)] {
        if ids.is_empty() {
            continue;
        }
        let subset = pick(ids);
        let (features, exits) = routing_labels(&model, &subset)?;
        let (_, metrics) = obp_confusion(&tree, &features, &exits)?;
        let early = exits.iter().filter(|&&e| exit_index(e) == 0).count();
        rows.push(vec![
            name.to_string(),
            subset.len().to_string(),
            early.to_string(),
            (subset.len() - early).to_string(),
            percent(metrics.accuracy),
        ]);
    }
    let notes = vec![format!(
        "tree: {} nodes, depth {}, {} weighting",
        tree.node_count(),
        tree.depth(),
        params.class_weighting.name()
    )];
    let text = emit(&ctx.out, "train_obp", &provenance, &rows, &notes)?;
    print!("{text}");
    Ok(())
}

// -------------------------------------------------------------- evaluate

fn variant_row(label: &str, report: &microexit::engine::VariantReport) -> Vec<String> {
    vec![
        label.to_string(),
        report.routing.n().to_string(),
        report.routing.n_early().to_string(),
        report.routing.n_base().to_string(),
        percent(report.metrics.accuracy),
        percent(report.metrics.weighted_f1),
    ]
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let model = load_model_artifact(ctx)?;
    let segments = load_segment_artifact(ctx)?;
    let scope = scoped(ctx, &segments)?;

    let mut provenance = ctx.provenance("evaluate");
    provenance.artifact(&ctx.segments_path())?;
    provenance.artifact(&ctx.model_path())?;

    let mut rows = vec![vec![
        "variant".to_string(),
        "segments".to_string(),
        "exit_early".to_string(),
        "exit_baseline".to_string(),
        "accuracy".to_string(),
        "weighted_f1".to_string(),
    ]];
    let early = evaluate_variant(&model, &scope, Variant::EarlyOnly, None)?;
    rows.push(variant_row("early", &early));
    let base = evaluate_variant(&model, &scope, Variant::BaselineOnly, None)?;
    rows.push(variant_row("baseline", &base));

    let mut notes = vec![format!("scope: {} ({} segments)", ctx.config.evaluate.scope, scope.len())];
    if ctx.tree_path().is_file() {
        let tree = load_tree_artifact(ctx)?;
        provenance.artifact(&ctx.tree_path())?;
        let adaptive = evaluate_variant(&model, &scope, Variant::Adaptive, Some(&tree))?;
        rows.push(variant_row("adaptive", &adaptive));
    } else {
        notes.push("no exit tree; run `microexit train-obp` for the adaptive row".into());
    }

    let text = emit(&ctx.out, "evaluate", &provenance, &rows, &notes)?;
    print!("{text}");
    Ok(())
}

// ------------------------------------------------------------------ cost

pub fn cost(ctx: &Ctx) -> Result<()> {
    let profile = ctx.cost_profile()?;
    let mut provenance = ctx.provenance("cost");

    // Routing counts: explicit from the config, or measured by routing the
    // segment artifact through the model and tree.
    let (n_early, n_base, correctness) = match (ctx.config.cost.n_early, ctx.config.cost.n_base) {
        (Some(n_early), Some(n_base)) => (n_early, n_base, None),
        _ => {
            let model = load_model_artifact(ctx)?;
            let tree = load_tree_artifact(ctx)?;
            let segments = load_segment_artifact(ctx)?;
            let scope = scoped(ctx, &segments)?;
            provenance.artifact(&ctx.segments_path())?;
            provenance.artifact(&ctx.model_path())?;
            provenance.artifact(&ctx.tree_path())?;

            let adaptive = evaluate_variant(&model, &scope, Variant::Adaptive, Some(&tree))?;
            let base = evaluate_variant(&model, &scope, Variant::BaselineOnly, None)?;
            let mut routed_early = 0;
            let mut routed_base = 0;
            for (segment, decision) in scope.iter().zip(&adaptive.routing.decisions) {
                let hit = segment.label == Some(decision.predicted);
                match decision.exit {
                    ExitPoint::EarlyExit => routed_early += hit as u64,
                    ExitPoint::Baseline => routed_base += hit as u64,
                }
            }
            let baseline_all = scope
                .iter()
                .zip(&base.routing.decisions)
                .filter(|(segment, decision)| segment.label == Some(decision.predicted))
                .count() as u64;
            let correctness = CorrectCounts {
                baseline_all,
                routed_early,
                routed_base,
            };
            (adaptive.routing.n_early(), adaptive.routing.n_base(), Some(correctness))
        }
    };

    let n = n_early + n_base;
    let ledger = build_ledger(&profile, n_early, n_base, correctness);
    let feasibility = energy_feasible(&profile, n, n_early, n_base)?;
    let mut notes = vec![format!(
        "energy feasible: {} (adaptive {} uJ vs baseline {} uJ, router included)",
        if feasibility.feasible { "yes" } else { "no" },
        feasibility.adaptive_total.to_grouped(),
        feasibility.baseline_total.to_grouped(),
    )];
    if n > 0 {
        notes.push(format!(
            "adaptive energy per segment, router included: {} uJ",
            adaptive_energy_per_segment(&profile, n, n_early, n_base)?.to_plain()
        ));
    }

    // The ledger renders itself; prepend provenance to both forms.
    let csv_path = ctx.out.join("cost.csv");
    std::fs::write(&csv_path, provenance.header() + &ledger.to_csv())
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", csv_path.display())))?;
    log::info!("wrote {}", csv_path.display());

    let mut text = provenance.header();
    text.push_str(&ledger.to_text());
    for note in &notes {
        text.push_str(note);
        text.push('\n');
    }
    let text_path = ctx.out.join("cost.txt");
    std::fs::write(&text_path, &text)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", text_path.display())))?;
    log::info!("wrote {}", text_path.display());

    print!("{text}");
    Ok(())
}

// ------------------------------------------------------------ cdln-sweep

pub fn cdln_sweep(ctx: &Ctx) -> Result<()> {
    let model = load_model_artifact(ctx)?;
    let segments = load_segment_artifact(ctx)?;
    let scope = scoped(ctx, &segments)?;

    let mut provenance = ctx.provenance("cdln-sweep");
    provenance.artifact(&ctx.segments_path())?;
    provenance.artifact(&ctx.model_path())?;

    let mut rows = vec![vec![
        "threshold".to_string(),
        "segments".to_string(),
        "exit_early".to_string(),
        "exit_baseline".to_string(),
        "accuracy".to_string(),
        "weighted_f1".to_string(),
    ]];
    for &threshold in &ctx.config.cdln.thresholds {
        let report = evaluate_variant(&model, &scope, Variant::Cdln(threshold), None)?;
        let mut row = variant_row(&format!("{threshold}"), &report);
        row[0] = format!("{threshold:.2}");
        rows.push(row);
    }
    let notes = vec![format!("scope: {} ({} segments)", ctx.config.evaluate.scope, scope.len())];
    let text = emit(&ctx.out, "cdln_sweep", &provenance, &rows, &notes)?;
    print!("{text}");
    Ok(())
}
