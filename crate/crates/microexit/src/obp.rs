//! The output-block predictor: a small CART decision tree that looks at a
//! segment's statistical features and picks which exit to run.
//!
//! Routing labels come from comparing both heads against the truth on a
//! held-out set. Whenever the early exit is already right, or both exits are
//! wrong anyway, the cheap path is the correct choice; only segments the
//! baseline alone gets right are worth the extra stage. Exit labels skew
//! heavily toward the early exit, so training weights classes by inverse
//! frequency by default; without that the tree tends to collapse to a single
//! always-early leaf.

use std::path::Path;

use crate::format::{open_verified, seal};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricSet};
use crate::model::ExitPoint;
use crate::{Error, Result};

/// Index convention for 2x2 routing confusion matrices: row/column 0 is the
/// early exit, 1 the baseline.
pub fn exit_index(exit: ExitPoint) -> usize {
    match exit {
        ExitPoint::EarlyExit => 0,
        ExitPoint::Baseline => 1,
    }
}

/// Derives the routing label for each segment from what the two heads
/// predicted. The baseline is worth running only where it alone is correct:
/// early-correct segments keep the cheap path, and segments both heads get
/// wrong also stay on the cheap path to avoid spending work on a lost cause.
pub fn label_exits(
    early_predictions: &[usize],
    baseline_predictions: &[usize],
    true_labels: &[usize],
) -> Result<Vec<ExitPoint>> {
    if early_predictions.len() != true_labels.len() || baseline_predictions.len() != true_labels.len() {
        return Err(Error::Data(format!(
            "prediction lists of {} / {} entries against {} labels",
            early_predictions.len(),
            baseline_predictions.len(),
            true_labels.len()
        )));
    }
    Ok(true_labels
        .iter()
        .zip(early_predictions.iter().zip(baseline_predictions))
        .map(|(&y, (&early, &base))| {
            if early != y && base == y {
                ExitPoint::Baseline
            } else {
                ExitPoint::EarlyExit
            }
        })
        .collect())
}

/// How training balances the two routing classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Weight each class by `N / (2 * count)`, so the skewed majority cannot
    /// drown out the rare baseline-only segments.
    InverseFrequency,
    Uniform,
}

impl ClassWeighting {
    pub fn name(self) -> &'static str {
        match self {
            ClassWeighting::InverseFrequency => "inverse_frequency",
            ClassWeighting::Uniform => "uniform",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse_frequency" => Ok(ClassWeighting::InverseFrequency),
            "uniform" => Ok(ClassWeighting::Uniform),
            other => Err(Error::Format(format!("unknown class weighting {other:?}"))),
        }
    }
}

/// Growth limits and weighting for tree training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub class_weighting: ClassWeighting,
    /// Recorded in the artifact for provenance; growth itself is
    /// deterministic, ties are broken by lowest feature then lowest
    /// threshold.
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_leaf: 5,
            class_weighting: ClassWeighting::InverseFrequency,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: ExitPoint,
        /// Raw training counts reaching this leaf, indexed by [`exit_index`].
        counts: [usize; 2],
    },
}

/// A trained routing tree. Nodes are stored in preorder with the root at
/// index 0; children always sit at higher indices than their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecisionTree {
    nodes: Vec<Node>,
    feature_dim: usize,
    params: TreeParams,
    /// Resolved per-class weights actually used, indexed by [`exit_index`].
    class_weights: [f64; 2],
}

/// Gini impurity of a weighted two-class count.
pub(crate) fn weighted_gini(counts: [usize; 2], weights: [f64; 2]) -> f64 {
    let w0 = counts[0] as f64 * weights[0];
    let w1 = counts[1] as f64 * weights[1];
    let total = w0 + w1;
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - (w0 / total).powi(2) - (w1 / total).powi(2)
}

struct Grower<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [ExitPoint],
    weights: [f64; 2],
    params: &'a TreeParams,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn counts(&self, rows: &[usize]) -> [usize; 2] {
        let mut c = [0usize; 2];
        for &r in rows {
            c[exit_index(self.labels[r])] += 1;
        }
        c
    }

    fn leaf(&mut self, counts: [usize; 2]) -> usize {
        // Weighted majority; a tie keeps the cheap path.
        let w_early = counts[0] as f64 * self.weights[0];
        let w_base = counts[1] as f64 * self.weights[1];
        let label = if w_base > w_early {
            ExitPoint::Baseline
        } else {
            ExitPoint::EarlyExit
        };
        self.nodes.push(Node::Leaf { label, counts });
        self.nodes.len() - 1
    }

    /// Best (feature, threshold) by Gini gain. Candidates are midpoints of
    /// consecutive distinct values; only strictly better gains replace the
    /// incumbent, so ties resolve to the lowest feature, then the lowest
    /// threshold.
    fn best_split(&self, rows: &[usize], parent_gini: f64) -> Option<(usize, f64)> {
        let dim = self.features[rows[0]].len();
        let parent_counts = self.counts(rows);
        let parent_weight = parent_counts[0] as f64 * self.weights[0] + parent_counts[1] as f64 * self.weights[1];
        let mut best: Option<(f64, usize, f64)> = None;
        for feature in 0..dim {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&a, &b| {
                self.features[a][feature]
                    .partial_cmp(&self.features[b][feature])
                    .expect("finite feature")
            });
            let mut left_counts = [0usize; 2];
            for (i, window) in order.windows(2).enumerate() {
                left_counts[exit_index(self.labels[window[0]])] += 1;
                let (a, b) = (self.features[window[0]][feature], self.features[window[1]][feature]);
                if a == b {
                    continue;
                }
                let n_left = i + 1;
                let n_right = rows.len() - n_left;
                if n_left < self.params.min_leaf || n_right < self.params.min_leaf {
                    continue;
                }
                let right_counts = [
                    parent_counts[0] - left_counts[0],
                    parent_counts[1] - left_counts[1],
                ];
                let w_left = left_counts[0] as f64 * self.weights[0] + left_counts[1] as f64 * self.weights[1];
                let w_right = parent_weight - w_left;
                let gain = parent_gini
                    - (w_left / parent_weight) * weighted_gini(left_counts, self.weights)
                    - (w_right / parent_weight) * weighted_gini(right_counts, self.weights);
                let threshold = 0.5 * (a + b);
                if gain > best.map_or(0.0, |(g, _, _)| g) {
                    best = Some((gain, feature, threshold));
                }
            }
        }
        best.filter(|(gain, _, _)| *gain > 1e-12).map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&rows);
        let gini = weighted_gini(counts, self.weights);
        if counts[0] == 0 || counts[1] == 0 || depth == self.params.max_depth || rows.len() < 2 * self.params.min_leaf
        {
            return self.leaf(counts);
        }
        let Some((feature, threshold)) = self.best_split(&rows, gini) else {
            return self.leaf(counts);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| self.features[r][feature] < threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        let Node::Split { left: l, right: r, .. } = &mut self.nodes[at] else {
            unreachable!("just pushed a split")
        };
        *l = left;
        *r = right;
        at
    }
}

/// Grows a routing tree with greedy CART on weighted Gini impurity.
pub fn train_tree(features: &[Vec<f64>], labels: &[ExitPoint], params: &TreeParams) -> Result<ExitDecisionTree> {
    if features.is_empty() {
        return Err(Error::Data("cannot train a routing tree on no segments".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} feature rows against {} exit labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Data(format!(
                "feature row {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature row {i} contains a non-finite value")));
        }
    }
    if params.min_leaf == 0 {
        return Err(Error::Config("min_leaf must be at least 1".into()));
    }

    let mut class_counts = [0usize; 2];
    for &l in labels {
        class_counts[exit_index(l)] += 1;
    }
    let n = labels.len() as f64;
    let weights = match params.class_weighting {
        ClassWeighting::Uniform => [1.0, 1.0],
        ClassWeighting::InverseFrequency => {
            let w = |c: usize| if c == 0 { 1.0 } else { n / (2.0 * c as f64) };
            [w(class_counts[0]), w(class_counts[1])]
        }
    };

    let mut grower = Grower {
        features,
        labels,
        weights,
        params,
        nodes: Vec::new(),
    };
    let root = grower.grow((0..features.len()).collect(), 0);
    debug_assert_eq!(root, 0);
    Ok(ExitDecisionTree {
        nodes: grower.nodes,
        feature_dim: dim,
        params: params.clone(),
        class_weights: weights,
    })
}

impl ExitDecisionTree {
    /// A tree that routes everything to one exit; the identity baselines for
    /// engine tests and the degenerate result of single-label training.
    pub fn constant(exit: ExitPoint, feature_dim: usize) -> Self {
        ExitDecisionTree {
            nodes: vec![Node::Leaf {
                label: exit,
                counts: [0, 0],
            }],
            feature_dim,
            params: TreeParams::default(),
            class_weights: [1.0, 1.0],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Routes a feature vector: left when `feature < threshold`, right
    /// otherwise, until a leaf answers.
    pub fn predict_exit(&self, features: &[f64]) -> Result<ExitPoint> {
        if features.len() != self.feature_dim {
            return Err(Error::shape(
                "predict_exit",
                format!("{} features", self.feature_dim),
                format!("{} features", features.len()),
            ));
        }
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { label, .. } => return Ok(*label),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Serializes to the routing-tree file format: the whole tree lives in
    /// readable header lines (one per node), sealed with the usual
    /// checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut lines: Vec<(String, String)> = vec![
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("nodes".into(), self.nodes.len().to_string()),
            ("max_depth".into(), self.params.max_depth.to_string()),
            ("min_leaf".into(), self.params.min_leaf.to_string()),
            ("class_weighting".into(), self.params.class_weighting.name().into()),
            ("seed".into(), self.params.seed.to_string()),
            ("weight.1".into(), format!("{}", self.class_weights[0])),
            ("weight.2".into(), format!("{}", self.class_weights[1])),
        ];
        for (i, node) in self.nodes.iter().enumerate() {
            let text = match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => format!("split {feature} {threshold} {left} {right}"),
                Node::Leaf { label, counts } => {
                    let code = exit_index(*label) + 1;
                    format!("leaf {code} {} {}", counts[0], counts[1])
                }
            };
            lines.push((format!("node.{i}"), text));
        }
        seal(TREE_MAGIC, &lines, &[])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = open_verified(bytes, TREE_MAGIC)?;
        let feature_dim: usize = file.header.parse("feature_dim")?;
        let node_count: usize = file.header.parse("nodes")?;
        let params = TreeParams {
            max_depth: file.header.parse("max_depth")?,
            min_leaf: file.header.parse("min_leaf")?,
            class_weighting: ClassWeighting::parse(file.header.get("class_weighting")?)?,
            seed: file.header.parse("seed")?,
        };
        let class_weights = [
            file.header.parse::<f64>("weight.1")?,
            file.header.parse::<f64>("weight.2")?,
        ];
        if node_count == 0 {
            return Err(Error::Format("tree has no nodes".into()));
        }
        let mut nodes = Vec::with_capacity(node_count);
        for i in 0..node_count {
            let key = format!("node.{i}");
            let text = file.header.get(&key)?;
            let fields: Vec<&str> = text.split_whitespace().collect();
            let node = match fields.first().copied() {
                Some("split") if fields.len() == 5 => {
                    let feature: usize = parse_field(fields[1], &key)?;
                    let threshold: f64 = parse_field(fields[2], &key)?;
                    let left: usize = parse_field(fields[3], &key)?;
                    let right: usize = parse_field(fields[4], &key)?;
                    if feature >= feature_dim {
                        return Err(Error::Format(format!("{key} tests feature {feature} of {feature_dim}")));
                    }
                    // Children must point forward; this rules out cycles.
                    if left <= i || right <= i || left >= node_count || right >= node_count {
                        return Err(Error::Format(format!("{key} has out-of-order children {left}/{right}")));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                Some("leaf") if fields.len() == 4 => {
                    let code: usize = parse_field(fields[1], &key)?;
                    let label = match code {
                        1 => ExitPoint::EarlyExit,
                        2 => ExitPoint::Baseline,
                        other => return Err(Error::Format(format!("{key} has exit code {other}, expected 1 or 2"))),
                    };
                    Node::Leaf {
                        label,
                        counts: [parse_field(fields[2], &key)?, parse_field(fields[3], &key)?],
                    }
                }
                _ => return Err(Error::Format(format!("{key} is not a split or leaf line: {text:?}"))),
            };
            nodes.push(node);
        }
        Ok(ExitDecisionTree {
            nodes,
            feature_dim,
            params,
            class_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const TREE_MAGIC: &str = "MXT1\n";

fn parse_field<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad value {s:?} in {key}")))
}

/// Scores the router itself: a 2x2 confusion matrix (rows true, columns
/// predicted, early exit first) plus the usual metric set.
pub fn obp_confusion(
    tree: &ExitDecisionTree,
    features: &[Vec<f64>],
    true_labels: &[ExitPoint],
) -> Result<(ConfusionMatrix, MetricSet)> {
    if features.len() != true_labels.len() {
        return Err(Error::Data(format!(
            "{} feature rows against {} exit labels",
            features.len(),
            true_labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(2);
    for (row, &truth) in features.iter().zip(true_labels) {
        let predicted = tree.predict_exit(row)?;
        cm.record(exit_index(truth), exit_index(predicted))?;
    }
    let metrics = compute_metrics(&cm)?;
    Ok((cm, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exit_labels_follow_the_four_case_mapping() {
        let truth = vec![3, 3, 3, 3];
        let early = vec![3, 3, 0, 0]; // right, right, wrong, wrong
        let base = vec![3, 0, 3, 0]; // right, wrong, right, wrong
        let labels = label_exits(&early, &base, &truth).unwrap();
        assert_eq!(
            labels,
            vec![
                ExitPoint::EarlyExit, // both right: cheap path suffices
                ExitPoint::EarlyExit, // only early right
                ExitPoint::Baseline,  // only baseline right
                ExitPoint::EarlyExit, // both wrong: don't pay for nothing
            ]
        );
        assert!(label_exits(&early, &base, &truth[..3]).is_err());
    }

    proptest! {
        #[test]
        fn exit_labels_depend_only_on_correctness(
            correct in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40),
            shift in 1usize..7,
        ) {
            // Two realizations with different class identities but the same
            // correctness pattern per segment.
            let n_classes = 9;
            let truth_a: Vec<usize> = (0..correct.len()).map(|i| i % n_classes).collect();
            let truth_b: Vec<usize> = truth_a.iter().map(|y| (y + shift) % n_classes).collect();
            let wrong = |y: usize| (y + 1) % n_classes;
            let realize = |truth: &[usize]| {
                let early: Vec<usize> = truth
                    .iter()
                    .zip(&correct)
                    .map(|(&y, &(e, _))| if e { y } else { wrong(y) })
                    .collect();
                let base: Vec<usize> = truth
                    .iter()
                    .zip(&correct)
                    .map(|(&y, &(_, b))| if b { y } else { wrong(y) })
                    .collect();
                label_exits(&early, &base, truth).unwrap()
            };
            prop_assert_eq!(realize(&truth_a), realize(&truth_b));
        }
    }

    #[test]
    fn pure_nodes_have_zero_impurity() {
        assert_eq!(weighted_gini([10, 0], [1.0, 1.0]), 0.0);
        assert_eq!(weighted_gini([0, 7], [0.3, 2.0]), 0.0);
        assert_eq!(weighted_gini([0, 0], [1.0, 1.0]), 0.0);
        // Balanced two-class node reaches the maximum 0.5.
        assert!((weighted_gini([5, 5], [1.0, 1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_label_training_gives_a_constant_tree() {
        let features: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, -(i as f64)]).collect();
        let labels = vec![ExitPoint::EarlyExit; 20];
        let tree = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        assert_eq!(tree.node_count(), 1);
        for row in &features {
            assert_eq!(tree.predict_exit(row).unwrap(), ExitPoint::EarlyExit);
        }
        assert_eq!(tree.predict_exit(&[1e9, -1e9]).unwrap(), ExitPoint::EarlyExit);
    }

    fn separable_set() -> (Vec<Vec<f64>>, Vec<ExitPoint>) {
        // Early iff the single feature is negative.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12 {
            features.push(vec![-2.0 - i as f64 * 0.25]);
            labels.push(ExitPoint::EarlyExit);
            features.push(vec![1.5 + i as f64 * 0.25]);
            labels.push(ExitPoint::Baseline);
        }
        (features, labels)
    }

    #[test]
    fn a_separable_problem_trains_to_one_split() {
        let (features, labels) = separable_set();
        let tree = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.node_count(), 3);
        // The split threshold sits in the gap between the classes.
        let Node::Split { feature, threshold, .. } = &tree.nodes[0] else {
            panic!("root should be a split");
        };
        assert_eq!(*feature, 0);
        assert!(*threshold > -2.0 && *threshold < 1.5, "threshold {threshold}");

        assert_eq!(tree.predict_exit(&[-1.0]).unwrap(), ExitPoint::EarlyExit);
        assert_eq!(tree.predict_exit(&[1.0]).unwrap(), ExitPoint::Baseline);
        for (row, label) in features.iter().zip(&labels) {
            assert_eq!(tree.predict_exit(row).unwrap(), *label);
        }
    }

    #[test]
    fn inverse_frequency_weighting_keeps_the_minority_learnable() {
        // Left region: raw majority early (30 vs 20), weighted majority
        // baseline. Right region: purely early.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            features.push(vec![-1.0 - (i % 7) as f64 * 0.01]);
            labels.push(ExitPoint::EarlyExit);
        }
        for i in 0..20 {
            features.push(vec![-1.0 - (i % 7) as f64 * 0.01]);
            labels.push(ExitPoint::Baseline);
        }
        for i in 0..300 {
            features.push(vec![1.0 + (i % 11) as f64 * 0.01]);
            labels.push(ExitPoint::EarlyExit);
        }

        let weighted = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        assert_eq!(weighted.predict_exit(&[-1.0]).unwrap(), ExitPoint::Baseline);
        assert_eq!(weighted.predict_exit(&[1.0]).unwrap(), ExitPoint::EarlyExit);

        let uniform = train_tree(
            &features,
            &labels,
            &TreeParams {
                class_weighting: ClassWeighting::Uniform,
                ..TreeParams::default()
            },
        )
        .unwrap();
        assert_eq!(uniform.predict_exit(&[-1.0]).unwrap(), ExitPoint::EarlyExit);
    }

    #[test]
    fn a_fully_grown_tree_memorizes_unique_rows() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            features.push(vec![(i * 37 % 41) as f64, (i * 17 % 23) as f64]);
            labels.push(if i % 3 == 0 { ExitPoint::Baseline } else { ExitPoint::EarlyExit });
        }
        let params = TreeParams {
            max_depth: 64,
            min_leaf: 1,
            class_weighting: ClassWeighting::Uniform,
            seed: 0,
        };
        let tree = train_tree(&features, &labels, &params).unwrap();
        for (row, label) in features.iter().zip(&labels) {
            assert_eq!(tree.predict_exit(row).unwrap(), *label);
        }
    }

    #[test]
    fn depth_cap_is_respected() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            features.push(vec![(i * 61 % 101) as f64, (i * 31 % 67) as f64, (i * 7 % 13) as f64]);
            labels.push(if (i * 61 % 101) % 2 == 0 { ExitPoint::Baseline } else { ExitPoint::EarlyExit });
        }
        for cap in [1, 2, 3] {
            let params = TreeParams {
                max_depth: cap,
                min_leaf: 1,
                class_weighting: ClassWeighting::Uniform,
                seed: 0,
            };
            let tree = train_tree(&features, &labels, &params).unwrap();
            assert!(tree.depth() <= cap, "depth {} over cap {cap}", tree.depth());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (features, labels) = separable_set();
        let a = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        let b = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn empty_and_ragged_inputs_are_rejected() {
        assert!(train_tree(&[], &[], &TreeParams::default()).is_err());
        let ragged = vec![vec![1.0, 2.0], vec![3.0]];
        let labels = vec![ExitPoint::EarlyExit; 2];
        assert!(train_tree(&ragged, &labels, &TreeParams::default()).is_err());
    }

    #[test]
    fn prediction_checks_the_feature_dimension() {
        let (features, labels) = separable_set();
        let tree = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        let err = tree.predict_exit(&[0.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("1 features"), "{err}");
    }

    #[test]
    fn tree_files_round_trip_and_catch_corruption() {
        let (features, labels) = separable_set();
        let tree = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        let bytes = tree.to_bytes();
        assert_eq!(ExitDecisionTree::from_bytes(&bytes).unwrap(), tree);
        // The artifact is readable text up to the checksum.
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 8]);
        assert!(text.contains("node.0=split"), "{text}");

        let mut corrupt = bytes.clone();
        let at = corrupt.len() / 2;
        corrupt[at] ^= 0x01;
        assert!(matches!(
            ExitDecisionTree::from_bytes(&corrupt),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            ExitDecisionTree::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn constant_trees_serialize_too() {
        let tree = ExitDecisionTree::constant(ExitPoint::Baseline, 6);
        let back = ExitDecisionTree::from_bytes(&tree.to_bytes()).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.predict_exit(&[0.0; 6]).unwrap(), ExitPoint::Baseline);
    }

    #[test]
    fn router_confusion_matches_hand_counts() {
        let (features, labels) = separable_set();
        let tree = train_tree(&features, &labels, &TreeParams::default()).unwrap();
        let (cm, metrics) = obp_confusion(&tree, &features, &labels).unwrap();
        assert_eq!(cm.at(0, 0), 12);
        assert_eq!(cm.at(1, 1), 12);
        assert_eq!(cm.at(0, 1), 0);
        assert_eq!(cm.at(1, 0), 0);
        assert_eq!(metrics.accuracy, 1.0);

        // Orientation: rows are the true routing label. A constant-early
        // tree puts every baseline-true segment in row 1, column 0.
        let constant = ExitDecisionTree::constant(ExitPoint::EarlyExit, 1);
        let (cm, _) = obp_confusion(&constant, &features, &labels).unwrap();
        assert_eq!(cm.at(0, 0), 12);
        assert_eq!(cm.at(1, 0), 12);
        assert_eq!(cm.at(0, 1) + cm.at(1, 1), 0);
    }

    #[test]
    fn published_router_counts_reproduce_their_accuracy() {
        // A router confusion of [[2932, 44], [36, 119]] over 3131 segments.
        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0, 0, 2932), (0, 1, 44), (1, 0, 36), (1, 1, 119)] {
            for _ in 0..n {
                cm.record(t, p).unwrap();
            }
        }
        let m = compute_metrics(&cm).unwrap();
        assert!((m.accuracy - 3051.0 / 3131.0).abs() < 1e-12, "{}", m.accuracy);
        assert!(format!("{:.2}%", m.accuracy * 100.0) == "97.44%");
        assert_eq!(cm.total(), 3131);
    }
}
