//! Multiclass evaluation: confusion matrices, accuracy, class-weighted
//! precision and recall, and weighted F1.
//!
//! Matrices are oriented with true classes as rows and predicted classes as
//! columns. Overall precision and recall are weighted by class support
//! `w_i = n_i / N`, which makes overall recall algebraically identical to
//! accuracy; reports that show equal accuracy and recall columns are showing
//! that identity, not a bug.

use crate::{Error, Result};

/// Square count matrix: `counts[true_class][predicted_class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Zero matrix for `n_classes` classes.
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Tallies paired labels. Errors when lengths differ or a label is out
    /// of range.
    pub fn from_pairs(true_labels: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if true_labels.len() != predicted.len() {
            return Err(Error::Data(format!(
                "label count mismatch: {} true vs {} predicted",
                true_labels.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in true_labels.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    /// Increments one cell.
    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        if true_class >= self.n_classes || predicted >= self.n_classes {
            return Err(Error::Data(format!(
                "label out of range: true {true_class}, predicted {predicted}, {} classes",
                self.n_classes
            )));
        }
        self.counts[true_class * self.n_classes + predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Count at `(true_class, predicted)`.
    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    /// Total number of evaluated samples.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum of the diagonal: correctly classified samples.
    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.at(i, i)).sum()
    }

    /// Row sum: support of one true class.
    pub fn row_total(&self, true_class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.at(true_class, p)).sum()
    }

    /// Column sum: how often one class was predicted.
    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|t| self.at(t, predicted)).sum()
    }

    /// Adds another matrix of the same shape cell by cell.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Data(format!(
                "cannot merge a {} class matrix into a {} class matrix",
                other.n_classes, self.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Rows in true-class order; each row in predicted-class order.
    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.n_classes)
    }
}

/// Scores derived from one confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub accuracy: f64,
    /// Support-weighted mean of per-class precision.
    pub precision: f64,
    /// Support-weighted mean of per-class recall; equals accuracy exactly.
    pub recall: f64,
    pub weighted_f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Class supports as fractions of the total; sums to 1.
    pub class_weights: Vec<f64>,
    /// True when some class had an empty row, empty column, or a zero
    /// precision+recall sum, and contributed 0 to an average by definition
    /// rather than by computation.
    pub degenerate_classes: bool,
}

/// Computes the full metric set from a non-empty confusion matrix.
///
/// Per class `i`: precision is `cm[i][i]` over column `i`, recall is
/// `cm[i][i]` over row `i`, and F1 is their harmonic mean. A class with an
/// empty column, empty row, or zero precision+recall contributes 0 and sets
/// the degenerate flag. Overall scores weight each class by its support.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricSet> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("cannot compute metrics of an empty confusion matrix".into()));
    }
    let n = cm.n_classes();
    let total_f = total as f64;

    let mut per_class_precision = Vec::with_capacity(n);
    let mut per_class_recall = Vec::with_capacity(n);
    let mut per_class_f1 = Vec::with_capacity(n);
    let mut class_weights = Vec::with_capacity(n);
    let mut degenerate = false;

    for i in 0..n {
        let diag = cm.at(i, i) as f64;
        let col = cm.col_total(i);
        let row = cm.row_total(i);
        let p = if col == 0 {
            degenerate = true;
            0.0
        } else {
            diag / col as f64
        };
        let r = if row == 0 {
            degenerate = true;
            0.0
        } else {
            diag / row as f64
        };
        let f1 = if p + r == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        per_class_precision.push(p);
        per_class_recall.push(r);
        per_class_f1.push(f1);
        class_weights.push(row as f64 / total_f);
    }

    let weighted = |vals: &[f64]| -> f64 { vals.iter().zip(&class_weights).map(|(v, w)| v * w).sum() };

    Ok(MetricSet {
        accuracy: cm.trace() as f64 / total_f,
        precision: weighted(&per_class_precision),
        recall: weighted(&per_class_recall),
        weighted_f1: weighted(&per_class_f1),
        per_class_precision,
        per_class_recall,
        per_class_f1,
        class_weights,
        degenerate_classes: degenerate,
    })
}
