use serde::{Deserialize, Serialize};

use crate::data::UNSCORED;
use crate::error::{Error, Result};

/// Counts indexed by `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }
}

fn default_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

/// Tallies `(truth, prediction)` pairs. Pairs with an [`UNSCORED`] code on
/// either side are skipped.
pub fn confusion_matrix(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} true codes vs {} predicted codes",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(default_labels(num_classes));
    for (&t, &p) in truth.iter().zip(pred) {
        if t == UNSCORED || p == UNSCORED {
            continue;
        }
        if t as usize >= num_classes || p as usize >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class code ({t}, {p}) outside 0..{num_classes}"
            )));
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// One-vs-rest scores of a single class. Undefined ratios are reported as
/// 0 with the matching flag set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn class_scores(cm: &ConfusionMatrix, class: usize) -> ClassScores {
    let tp = cm.counts[class][class];
    let (precision, precision_undefined) = ratio(tp, cm.col_sum(class));
    let (recall, recall_undefined) = ratio(tp, cm.row_sum(class));
    ClassScores {
        precision,
        recall,
        f1: f1_score(precision, recall),
        support: cm.row_sum(class),
        precision_undefined,
        recall_undefined,
    }
}

pub fn classification_scores(cm: &ConfusionMatrix) -> Result<ClassificationScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassScores> = (0..cm.num_classes()).map(|c| class_scores(cm, c)).collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(ClassificationScores {
        per_class,
        accuracy: cm.trace() as f64 / total as f64,
        macro_f1,
    })
}

/// Cohen's κ from observed and chance agreement.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.num_classes())
        .map(|c| (cm.row_sum(c) as f64 / n) * (cm.col_sum(c) as f64 / n))
        .sum();
    if p_e >= 1.0 {
        return Err(Error::Degenerate(
            "kappa is undefined when chance agreement is 1".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties kept in input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve by trapezoidal integration over distinct
/// thresholds. Ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check_scores(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Degenerate(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (p as f64 * n as f64))
}

/// Average precision: mean over positives of the precision at their rank.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check_scores(scores, labels)?;
    if p == 0 {
        return Err(Error::Degenerate(
            "AUPRC needs at least one positive label".into(),
        ));
    }
    let mut tp = 0u64;
    let mut sum = 0.0;
    for (rank, &i) in descending(scores).iter().enumerate() {
        if labels[i] != 0 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

/// One ROC point per distinct threshold: `(threshold, fpr, tpr)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (p, n) = check_scores(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let rate = |k: u64, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, rate(fp, n), rate(tp, p)));
    }
    Ok(out)
}

/// One precision-recall point per distinct threshold: `(threshold, recall, precision)`.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (p, _) = check_scores(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += (labels[order[i]] != 0) as u64;
            seen += 1;
            i += 1;
        }
        let recall = if p == 0 { 0.0 } else { tp as f64 / p as f64 };
        out.push((s, recall, tp as f64 / seen as f64));
    }
    Ok(out)
}

/// Thresholded binary scores of the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// `None` when chance agreement is 1 (a single class on both sides).
    pub kappa: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

pub fn binary_scores(truth: &[u8], pred: &[u8]) -> Result<BinaryScores> {
    let cm = confusion_matrix(truth, pred, 2)?;
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("no items to score".into()));
    }
    let pos = class_scores(&cm, 1);
    Ok(BinaryScores {
        precision: pos.precision,
        recall: pos.recall,
        f1: pos.f1,
        accuracy: cm.trace() as f64 / cm.total() as f64,
        kappa: cohens_kappa(&cm).ok(),
        tp: cm.counts[1][1],
        fp: cm.counts[0][1],
        tn: cm.counts[0][0],
        fn_: cm.counts[1][0],
    })
}
