//! Joint training of both network heads with Adam, plus the data-split
//! protocols used to evaluate them.
//!
//! Both heads are trained at once: each batch's loss is a weighted sum of the
//! cross-entropies at the early exit and at the baseline exit, so the shared
//! front of the network receives gradient from both classifiers. The loop is
//! single-threaded and fully seeded; a (seed, data, config) triple always
//! reproduces the same final weights bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::metrics::{compute_metrics, ConfusionMatrix};
use crate::model::{MultiOutputCnn, Precision};
use crate::nn::{Cache, Layer, Tensor2};
use crate::preprocess::Segment;
use crate::{Error, Result};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Loss weight on the early-exit head.
    pub w_early: f64,
    /// Loss weight on the baseline head.
    pub w_base: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.007,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            w_early: 1.0,
            w_base: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if self.w_early < 0.0 || self.w_base < 0.0 || self.w_early + self.w_base <= 0.0 {
            return Err(Error::Config("head loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }
}

/// One fold's index sets. All three are disjoint index lists into the same
/// segment slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold plan: per fold, one of k per-class chunks is the test
/// set and `val_fraction` of the remainder (again per class) is validation.
/// Class proportions in every set track the dataset's within one segment.
pub fn stratified_kfold(labels: &[usize], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Config("k-fold needs k >= 2".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must be in [0, 1)")));
    }
    if labels.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (class, ids) in &by_class {
        if ids.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} segments, fewer than the {k} folds",
                ids.len()
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let shuffled: Vec<(usize, Vec<usize>)> = by_class
        .into_iter()
        .map(|(class, mut ids)| {
            ids.shuffle(&mut rng);
            (class, ids)
        })
        .collect();

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (_, ids) in &shuffled {
            let n = ids.len();
            let chunk = |i: usize| {
                let start = i * (n / k) + i.min(n % k);
                let len = n / k + usize::from(i < n % k);
                &ids[start..start + len]
            };
            split.test.extend_from_slice(chunk(fold));
            // Remaining chunks in rotation order after the test chunk, so
            // the validation slice moves with the fold.
            let mut rest: Vec<usize> = Vec::with_capacity(n - chunk(fold).len());
            for i in (fold + 1..k).chain(0..fold) {
                rest.extend_from_slice(chunk(i));
            }
            let n_val = ((rest.len() as f64) * val_fraction).round() as usize;
            split.val.extend_from_slice(&rest[..n_val]);
            split.train.extend_from_slice(&rest[n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        folds.push(split);
    }
    Ok(folds)
}

/// Cross-entropy of the true class under a probability vector, floored at
/// `1e-12` so a confidently wrong prediction yields a large finite loss.
pub fn scce_loss(probabilities: &[f64], label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    Ok(-probabilities[label].max(1e-12).ln())
}

/// Gradient of [`scce_loss`] with respect to the logits feeding the final
/// softmax: `p - onehot(label)`. Fusing the two keeps the backward pass
/// numerically stable for saturated probabilities.
pub fn scce_logit_gradient(probabilities: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probabilities.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    let mut g = probabilities.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

/// Per-parameter Adam accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], config: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let m_corr = 1.0 - config.beta1.powi(t);
        let v_corr = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = config.beta1 * self.m[i] + (1.0 - config.beta1) * grads[i];
            self.v[i] = config.beta2 * self.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
        Ok(())
    }
}

/// One epoch's summary row in the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc_early: f64,
    pub val_acc_base: f64,
    pub val_wf1_base: f64,
}

/// The full training log plus which epoch's weights were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot the model was restored to, when validation data
    /// was available.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// Renders the log as CSV, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc_early,val_acc_base,val_wf1_base\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc_early, r.val_acc_base, r.val_wf1_base
            ));
        }
        out
    }
}

fn forward_chain_batch(layers: &mut [Layer], inputs: Vec<Tensor2>) -> Result<(Vec<Tensor2>, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = inputs;
    for layer in layers.iter_mut() {
        let (out, cache) = layer.forward_batch(&x)?;
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

/// Backward through a head whose final layer is the softmax the loss was
/// fused with: the walk starts at the layer before it.
fn backward_chain_batch(
    layers: &[Layer],
    caches: &[Cache],
    logit_grads: Vec<Tensor2>,
    skip_last: bool,
    grads_out: &mut Vec<Vec<f64>>,
) -> Result<Vec<Tensor2>> {
    let top = if skip_last { layers.len() - 1 } else { layers.len() };
    let mut per_layer = vec![Vec::new(); layers.len()];
    let mut upstream = logit_grads;
    for i in (0..top).rev() {
        let (down, grads) = layers[i].backward_batch(&caches[i], &upstream)?;
        per_layer[i] = grads;
        upstream = down;
    }
    grads_out.extend(per_layer);
    Ok(upstream)
}

/// Loss and flat parameter gradient of the joint objective on one batch, in
/// [`collect_params`](MultiOutputCnn::collect_params) order. Batchnorm runs
/// in train mode (batch statistics; running estimates updated as a side
/// effect), and the loss is averaged over the batch.
///
/// Exposed so callers can audit the backward pass (e.g. against finite
/// differences) or drive their own optimizer loop.
pub fn joint_gradients(
    model: &mut MultiOutputCnn,
    batch: &[Tensor2],
    labels: &[usize],
    w_early: f64,
    w_base: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Data(format!(
            "batch of {} inputs with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let scale = 1.0 / batch.len() as f64;

    let (mid, stage1_caches) = forward_chain_batch(&mut model.stage1, batch.to_vec())?;
    let (p_early, head1_caches) = forward_chain_batch(&mut model.head1, mid.clone())?;
    let (deep, stage2_caches) = forward_chain_batch(&mut model.stage2, mid.clone())?;
    let (p_base, head2_caches) = forward_chain_batch(&mut model.head2, deep)?;

    let mut loss = 0.0;
    let mut early_logit_grads = Vec::with_capacity(batch.len());
    let mut base_logit_grads = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let pe = p_early[i].data();
        let pb = p_base[i].data();
        loss += scale * (w_early * scce_loss(pe, labels[i])? + w_base * scce_loss(pb, labels[i])?);
        let ge: Vec<f64> = scce_logit_gradient(pe, labels[i])?
            .into_iter()
            .map(|g| g * w_early * scale)
            .collect();
        let gb: Vec<f64> = scce_logit_gradient(pb, labels[i])?
            .into_iter()
            .map(|g| g * w_base * scale)
            .collect();
        early_logit_grads.push(Tensor2::from_vector(ge));
        base_logit_grads.push(Tensor2::from_vector(gb));
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("joint loss became {loss}")));
    }

    let mut head1_grads = Vec::new();
    let down_head1 = backward_chain_batch(&model.head1, &head1_caches, early_logit_grads, true, &mut head1_grads)?;
    let mut head2_grads = Vec::new();
    let down_head2 = backward_chain_batch(&model.head2, &head2_caches, base_logit_grads, true, &mut head2_grads)?;
    let mut stage2_grads = Vec::new();
    let down_stage2 = backward_chain_batch(&model.stage2, &stage2_caches, down_head2, false, &mut stage2_grads)?;

    // The shared front receives gradient from both heads.
    let mut combined = Vec::with_capacity(batch.len());
    for (a, b) in down_head1.iter().zip(&down_stage2) {
        let mut t = a.clone();
        for (x, y) in t.data_mut().iter_mut().zip(b.data()) {
            *x += *y;
        }
        combined.push(t);
    }
    let mut stage1_grads = Vec::new();
    backward_chain_batch(&model.stage1, &stage1_caches, combined, false, &mut stage1_grads)?;

    let mut flat = Vec::with_capacity(model.collect_params().len());
    for section in [stage1_grads, head1_grads, stage2_grads, head2_grads] {
        for layer in section {
            flat.extend(layer);
        }
    }
    Ok((loss, flat))
}

fn validate_ids(segments: &[Segment], ids: &[usize], n_classes: usize, role: &str) -> Result<()> {
    for &id in ids {
        let seg = segments
            .get(id)
            .ok_or_else(|| Error::Data(format!("{role} id {id} out of range for {} segments", segments.len())))?;
        match seg.label {
            None => return Err(Error::Data(format!("{role} segment {id} is unlabeled"))),
            Some(l) if l >= n_classes => {
                return Err(Error::Data(format!(
                    "{role} segment {id} has label {l}, model expects < {n_classes}"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn evaluate_split(
    model: &MultiOutputCnn,
    segments: &[Segment],
    ids: &[usize],
    w_early: f64,
    w_base: f64,
) -> Result<(f64, f64, f64, f64)> {
    let n_classes = model.num_classes();
    let mut loss = 0.0;
    let mut hits_early = 0usize;
    let mut hits_base = 0usize;
    let mut cm = ConfusionMatrix::new(n_classes);
    for &id in ids {
        let seg = &segments[id];
        let label = seg.label.expect("validated");
        let (pe, pb) = model.forward_both(&seg.data)?;
        loss += w_early * scce_loss(&pe, label)? + w_base * scce_loss(&pb, label)?;
        hits_early += usize::from(crate::model::argmax(&pe) == label);
        let base_pred = crate::model::argmax(&pb);
        hits_base += usize::from(base_pred == label);
        cm.record(label, base_pred)?;
    }
    let n = ids.len() as f64;
    let wf1 = compute_metrics(&cm)?.weighted_f1;
    Ok((loss / n, hits_early as f64 / n, hits_base as f64 / n, wf1))
}

/// Fits the model on the training ids and, when validation ids are given,
/// leaves it at the epoch with the best validation weighted F1 at the
/// baseline exit. Batches are reshuffled every epoch from one seeded stream.
pub fn train(
    model: &mut MultiOutputCnn,
    segments: &[Segment],
    train_ids: &[usize],
    val_ids: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n_classes = model.num_classes();
    if train_ids.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    validate_ids(segments, train_ids, n_classes, "train")?;
    validate_ids(segments, val_ids, n_classes, "validation")?;
    for class in 0..n_classes {
        if !train_ids.iter().any(|&id| segments[id].label == Some(class)) {
            return Err(Error::Data(format!("class {class} has no training segments")));
        }
    }

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
    };
    if config.epochs == 0 {
        return Ok(report);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut params = model.collect_params();
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = train_ids.to_vec();
    let mut best_wf1 = f64::NEG_INFINITY;
    let mut best_snapshot: Option<Vec<u8>> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Tensor2> = chunk.iter().map(|&id| segments[id].data.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&id| segments[id].label.expect("validated")).collect();
            let (loss, grads) = joint_gradients(model, &batch, &labels, config.w_early, config.w_base)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
            adam.apply(&mut params, &grads, config)?;
            model.assign_params(&params)?;
        }
        let train_loss = loss_sum / train_ids.len() as f64;

        let (val_loss, val_acc_early, val_acc_base, val_wf1_base) = if val_ids.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            evaluate_split(model, segments, val_ids, config.w_early, config.w_base)?
        };
        if !val_ids.is_empty() && val_wf1_base > best_wf1 {
            best_wf1 = val_wf1_base;
            best_snapshot = Some(model.to_archive_bytes(Precision::F64));
            report.best_epoch = Some(epoch);
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc_early,
            val_acc_base,
            val_wf1_base,
        });
    }

    if let Some(bytes) = best_snapshot {
        *model = MultiOutputCnn::from_archive_bytes(&bytes)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::{AvgPool1d, BatchNorm1d, Conv1d, Dense, Flatten, LeakyRelu, Softmax};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn scce_matches_hand_values() {
        assert_relative_eq!(scce_loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scce_loss(&[0.25; 4], 2).unwrap(), 4.0f64.ln(), epsilon = 1e-12);
        assert!(scce_loss(&[0.5, 0.5], 2).is_err());
        // The floor keeps an impossible label finite.
        assert!(scce_loss(&[1.0, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn fused_gradient_matches_finite_differences_through_softmax() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..5);
            let p = Softmax::forward_vec(&logits);
            let analytic = scce_logit_gradient(&p, label).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut hi = logits.clone();
                hi[i] += h;
                let mut lo = logits.clone();
                lo[i] -= h;
                let fd = (scce_loss(&Softmax::forward_vec(&hi), label).unwrap()
                    - scce_loss(&Softmax::forward_vec(&lo), label).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    ((fd - analytic[i]) / denom).abs() < 1e-4,
                    "logit {i}: fd {fd} vs {got}",
                    got = analytic[i]
                );
            }
        }
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient() {
        let config = TrainConfig::default();
        let mut state = AdamState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        state.apply(&mut params, &[0.0; 3], &config).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_roughly_the_learning_rate() {
        let config = TrainConfig {
            learning_rate: 0.01,
            eps: 1e-12,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(1);
        let mut params = vec![0.0];
        state.apply(&mut params, &[3.7], &config).unwrap();
        // Bias correction makes the first step lr * sign(g) for tiny eps.
        assert_relative_eq!(params[0], -0.01, epsilon = 1e-6);
    }

    #[test]
    fn adam_is_deterministic() {
        let config = TrainConfig::default();
        let run = || {
            let mut state = AdamState::new(4);
            let mut params = vec![0.1, 0.2, 0.3, 0.4];
            for step in 0..25 {
                let grads: Vec<f64> = (0..4).map(|i| ((step * 4 + i) as f64 * 0.13).sin()).collect();
                state.apply(&mut params, &grads, &config).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    fn tiny_model(seed: u64) -> MultiOutputCnn {
        // Same layer kinds as the full network, shrunk to an 8x2 input.
        let act = || Layer::LeakyRelu(LeakyRelu { alpha: 0.01 });
        let stage1 = vec![
            Layer::Conv1d(Conv1d::new(3, 2, 2, 3)),
            act(),
            Layer::AvgPool1d(AvgPool1d { kernel_size: 2, stride: 2 }),
            Layer::BatchNorm1d(BatchNorm1d::new(3, 1e-3, 0.01)),
        ];
        let head1 = vec![
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(3, 2)),
            Layer::Softmax(Softmax),
        ];
        let stage2 = vec![
            Layer::Conv1d(Conv1d::new(1, 1, 3, 2)),
            act(),
            Layer::BatchNorm1d(BatchNorm1d::new(2, 1e-3, 0.01)),
        ];
        let head2 = vec![
            Layer::Flatten(Flatten),
            Layer::Dense(Dense::new(2, 3)),
            act(),
            Layer::Dense(Dense::new(3, 2)),
            Layer::Softmax(Softmax),
        ];
        let mut model = MultiOutputCnn::from_parts((8, 2), stage1, head1, stage2, head2).unwrap();
        model.randomize(seed);
        model
    }

    fn random_batch(rng: &mut rand::rngs::StdRng, n: usize) -> (Vec<Tensor2>, Vec<usize>) {
        let batch = (0..n)
            .map(|_| {
                Tensor2::from_data(8, 2, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
        (batch, labels)
    }

    #[test]
    fn joint_gradient_matches_finite_differences_end_to_end() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mut model = tiny_model(31);
        let (batch, labels) = random_batch(&mut rng, 3);
        let (w_early, w_base) = (0.7, 1.3);

        let params = model.collect_params();
        let (_, analytic) = joint_gradients(&mut model, &batch, &labels, w_early, w_base).unwrap();
        assert_eq!(analytic.len(), params.len());

        let h = 1e-5;
        for i in 0..params.len() {
            let mut probe = params.clone();
            probe[i] += h;
            model.assign_params(&probe).unwrap();
            let (hi, _) = joint_gradients(&mut model, &batch, &labels, w_early, w_base).unwrap();
            probe[i] = params[i] - h;
            model.assign_params(&probe).unwrap();
            let (lo, _) = joint_gradients(&mut model, &batch, &labels, w_early, w_base).unwrap();
            model.assign_params(&params).unwrap();
            let fd = (hi - lo) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                ((fd - analytic[i]) / denom).abs() < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn both_heads_feed_the_shared_front() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let mut model = tiny_model(32);
        let (batch, labels) = random_batch(&mut rng, 4);

        // Trainable-slice offsets per layer, in collect_params order.
        let mut offsets = Vec::new();
        let mut at = 0;
        for layer in model.layers() {
            offsets.push((at, at + layer.trainable_count()));
            at += layer.trainable_count();
        }
        let head1_dense = (4, offsets[5]); // stage1 is 4 layers, head1 dense is index 5
        assert_eq!(model.layers().nth(5).unwrap().kind(), "dense");

        let (_, grads) = joint_gradients(&mut model, &batch, &labels, 0.0, 1.0).unwrap();
        let (_, (dense_lo, dense_hi)) = head1_dense;
        assert!(grads[dense_lo..dense_hi].iter().all(|g| *g == 0.0));
        let (conv_lo, conv_hi) = offsets[0];
        assert!(grads[conv_lo..conv_hi].iter().any(|g| *g != 0.0));

        // With the early head enabled its dense layer trains too.
        let (_, grads) = joint_gradients(&mut model, &batch, &labels, 1.0, 1.0).unwrap();
        assert!(grads[dense_lo..dense_hi].iter().any(|g| *g != 0.0));
    }

    fn separable_segments(n_per_class: usize) -> Vec<Segment> {
        // Two classes split by the sign of a channel offset; a touch of
        // deterministic ripple keeps batchnorm statistics non-degenerate.
        let mut segments = Vec::new();
        for class in 0..2 {
            for s in 0..n_per_class {
                let mut data = Tensor2::zeros(32, 7);
                for t in 0..32 {
                    for c in 0..7 {
                        let ripple = ((t * (c + 2) + s) as f64 * 0.37).sin() * 0.25;
                        let offset = if class == 0 { 0.8 } else { -0.8 };
                        *data.at_mut(t, c) = ripple + if c % 2 == 0 { offset } else { -offset };
                    }
                }
                segments.push(Segment {
                    data,
                    features: vec![0.0; 4],
                    label: Some(class),
                    span: (s * 32, s * 32 + 32),
                    flags: 0,
                });
            }
        }
        segments
    }

    #[test]
    fn zero_epochs_leaves_the_model_untouched() {
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(2), 9).unwrap();
        let before = model.collect_params();
        let segments = separable_segments(4);
        let ids: Vec<usize> = (0..segments.len()).collect();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &segments, &ids, &[], &config).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
        assert_eq!(model.collect_params(), before);
    }

    #[test]
    fn missing_class_is_rejected() {
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(2), 9).unwrap();
        let segments = separable_segments(4);
        // Only class-0 ids.
        let ids: Vec<usize> = (0..4).collect();
        let err = train(&mut model, &segments, &ids, &[], &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn unlabeled_segments_are_rejected() {
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(2), 9).unwrap();
        let mut segments = separable_segments(4);
        segments[3].label = None;
        let ids: Vec<usize> = (0..segments.len()).collect();
        let err = train(&mut model, &segments, &ids, &[], &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("unlabeled"), "{err}");
    }

    #[test]
    fn training_separates_an_easy_two_class_problem() {
        let segments = separable_segments(20);
        let ids: Vec<usize> = (0..segments.len()).collect();
        let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(2), 1).unwrap();
        let config = TrainConfig {
            epochs: 12,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &segments, &ids, &[], &config).unwrap();

        // Loss trends down: at most one increase over the first five epochs.
        let violations = report.epochs[..5]
            .windows(2)
            .filter(|w| w[1].train_loss > w[0].train_loss + 1e-9)
            .count();
        assert!(violations <= 1, "{:?}", report.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());

        let mut hits = 0;
        for s in &segments {
            if model.predict_class(&s.data, crate::model::ExitPoint::Baseline).unwrap() == s.label.unwrap() {
                hits += 1;
            }
        }
        assert!(hits as f64 / segments.len() as f64 >= 0.9, "{hits}/{}", segments.len());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let segments = separable_segments(8);
        let ids: Vec<usize> = (0..segments.len()).collect();
        let (val, train_ids) = ids.split_at(4);
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = MultiOutputCnn::build(&ModelConfig::with_classes(2), 123).unwrap();
            let report = train(&mut model, &segments, train_ids, val, &config).unwrap();
            (model.collect_params(), report)
        };
        let (params_a, report_a) = run();
        let (params_b, report_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(report_a, report_b);
        assert!(report_a.best_epoch.is_some());
    }

    #[test]
    fn kfold_splits_one_hundred_balanced_segments_20_16_64() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let folds = stratified_kfold(&labels, 5, 0.20, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for split in &folds {
            assert_eq!(split.test.len(), 20);
            assert_eq!(split.val.len(), 16);
            assert_eq!(split.train.len(), 64);
            // Per-class balance: five test segments of each class.
            for class in 0..4 {
                let n = split.test.iter().filter(|&&i| labels[i] == class).count();
                assert_eq!(n, 5);
                let nv = split.val.iter().filter(|&&i| labels[i] == class).count();
                assert_eq!(nv, 4);
            }
        }
    }

    #[test]
    fn kfold_test_sets_partition_the_data() {
        let labels: Vec<usize> = (0..83).map(|i| i % 3).collect();
        let folds = stratified_kfold(&labels, 5, 0.20, 99).unwrap();
        let mut seen = vec![0usize; labels.len()];
        for split in &folds {
            // Within a fold, the three sets are disjoint.
            let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
            all.sort_unstable();
            let before = all.len();
            all.dedup();
            assert_eq!(all.len(), before);
            assert_eq!(all.len(), labels.len());
            for &i in &split.test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn kfold_is_seed_deterministic_and_rejects_thin_classes() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        assert_eq!(
            stratified_kfold(&labels, 5, 0.2, 11).unwrap(),
            stratified_kfold(&labels, 5, 0.2, 11).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 5, 0.2, 11).unwrap(),
            stratified_kfold(&labels, 5, 0.2, 12).unwrap()
        );

        let thin = vec![0, 0, 0, 0, 0, 1, 1, 1];
        let err = stratified_kfold(&thin, 5, 0.2, 1).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }
}
