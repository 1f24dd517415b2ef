//! Confusion-matrix metrics, ROC-AUC and grouped k-fold splits.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("ROC-AUC needs both classes present")]
    OneClassOnly,
    #[error("{count} ids cannot be split into {k} equal groups")]
    IndivisibleCount { count: usize, k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Counts by (prediction, label) with plexus as the positive class.
pub fn confusion(preds: &[Label], labels: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (p, l) in preds.iter().zip(labels) {
        match (p.is_positive(), l.is_positive()) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// A metric value; `None` marks an undefined ratio (zero denominator).
pub type Metric = Option<f64>;

fn ratio(num: u64, den: u64) -> Metric {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub specificity: Metric,
    pub f1_micro: Metric,
    pub f1_macro: Metric,
    pub auc: Metric,
    pub matrix: ConfusionMatrix,
}

/// Scalar metrics of a confusion matrix. `auc` is left unset.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let total = cm.total();
    let accuracy = ratio(cm.tp + cm.tn, total);
    let f1_pos = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    let f1_neg = ratio(2 * cm.tn, 2 * cm.tn + cm.fp + cm.fn_);
    MetricsReport {
        accuracy,
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        // Single-label binary: every error is one FP and one FN across the
        // two classes, so micro-F1 is accuracy.
        f1_micro: accuracy,
        f1_macro: f1_pos.zip(f1_neg).map(|(a, b)| (a + b) / 2.0),
        auc: None,
        matrix: *cm,
    }
}

/// Mann-Whitney AUC with ties counted as one half, via a rank sort.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k].is_positive()).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Seeded shuffle into `k` equal groups. Fold `i` validates on the first
/// half of sorted group `i`, tests on the rest, and trains on the other
/// groups.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k == 0 || ids.is_empty() || ids.len() % k != 0 {
        return Err(EvalError::IndivisibleCount {
            count: ids.len(),
            k,
        });
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let size = ids.len() / k;
    let groups: Vec<Vec<String>> = sorted
        .chunks(size)
        .map(|g| {
            let mut g = g.to_vec();
            g.sort();
            g
        })
        .collect();
    let folds = (0..k)
        .map(|i| {
            let half = size / 2;
            let train = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            Fold {
                train,
                val: groups[i][..half].to_vec(),
                test: groups[i][half..].to_vec(),
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

fn pct(m: Metric) -> String {
    m.map_or_else(|| "n/a".to_owned(), |v| format!("{:.2}", 100.0 * v))
}

/// Header of the Table-1-style text table.
pub const TABLE_COLUMNS: [&str; 7] = [
    "Accuracy (%)",
    "Precision (%)",
    "Recall (%)",
    "Specificity (%)",
    "F1 Micro (%)",
    "F1 Macro (%)",
    "AUC (%)",
];

/// Aligned text table, one row per `(name, report)`.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<name_w$}", "Model");
    for c in TABLE_COLUMNS {
        out.push_str(&format!("  {c:>15}"));
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for m in [r.accuracy, r.precision, r.recall, r.specificity, r.f1_micro, r.f1_macro, r.auc] {
            out.push_str(&format!("  {:>15}", pct(m)));
        }
        out.push('\n');
    }
    out
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_table(&[("model".into(), self)]))
    }
}
