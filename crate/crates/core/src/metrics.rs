//! Evaluation metrics for the three task kinds and for the stacker.
//!
//! Zero-denominator conventions: precision, recall and F1 are 0 when their
//! denominator is 0; an example whose true and predicted label sets are both
//! empty scores 1 in the Jaccard index.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn precision_recall_f1(tp: u64, fp: u64, fn_: u64) -> Prf {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf { precision, recall, f1 }
}

/// Per-class (or per-label) detection counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        precision_recall_f1(self.tp, self.fp, self.fn_)
    }
}

/// `(micro, macro)` F1: micro pools the counts, macro averages per-class F1.
pub fn f1_micro_macro(counts: &[Counts]) -> (f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    let pooled = counts.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
        tn: a.tn + c.tn,
    });
    let macro_f1 = counts.iter().map(|c| c.prf().f1).sum::<f64>() / counts.len() as f64;
    (pooled.prf().f1, macro_f1)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_counts(&self) -> Vec<Counts> {
        let total = self.total();
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[c][c];
                let row: u64 = self.counts[c].iter().sum();
                let col: u64 = self.counts.iter().map(|r| r[c]).sum();
                Counts {
                    tp,
                    fp: col - tp,
                    fn_: row - tp,
                    tn: total + tp - row - col,
                }
            })
            .collect()
    }

    /// CSV with a header row of predicted labels and one row per true label.
    pub fn write_csv<W: Write>(&self, out: W, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    same_len(truth.len(), pred.len())?;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(format!("class pair ({t}, {p}) outside [0, {classes})")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(truth: &[T], pred: &[T]) -> Result<f64> {
    same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-label counts for multi-label predictions.
pub fn multilabel_counts(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<Vec<Counts>> {
    same_len(truth.len(), pred.len())?;
    let width = truth.first().map_or(0, Vec::len);
    let mut counts = vec![Counts::default(); width];
    for (t, p) in truth.iter().zip(pred) {
        if t.len() != width || p.len() != width {
            return Err(Error::shape("ragged label vectors"));
        }
        for (c, (&a, &b)) in counts.iter_mut().zip(t.iter().zip(p)) {
            match (a, b) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// Mean over examples of `TP_i / (TP_i + FP_i + FN_i)`.
pub fn jaccard_index(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<f64> {
    same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("jaccard index of an empty set"));
    }
    let mut total = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        same_len(t.len(), p.len())?;
        let mut inter = 0u32;
        let mut union = 0u32;
        for (&a, &b) in t.iter().zip(p) {
            inter += u32::from(a && b);
            union += u32::from(a || b);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / truth.len() as f64)
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("MAE of an empty set"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Signed mean residual `mean(pred - truth)`.
pub fn mean_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("mean error of an empty set"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).sum::<f64>() / pred.len() as f64)
}

/// Test-retest reliabilities of the two measurements being correlated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConstants {
    pub r_xx: f64,
    pub r_yy: f64,
}

impl Default for ReliabilityConstants {
    fn default() -> Self {
        ReliabilityConstants { r_xx: 0.77, r_yy: 0.70 }
    }
}

impl ReliabilityConstants {
    pub fn factor(&self) -> f64 {
        1.0 / (self.r_xx * self.r_yy).sqrt()
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Undefined("Pearson correlation needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Pearson correlation with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation scaled by `1 / sqrt(r_xx * r_yy)`.
pub fn disattenuated_pearson(x: &[f64], y: &[f64], rel: ReliabilityConstants) -> Result<f64> {
    if !(rel.r_xx > 0.0 && rel.r_xx <= 1.0 && rel.r_yy > 0.0 && rel.r_yy <= 1.0) {
        return Err(Error::Config("reliabilities must lie in (0, 1]".into()));
    }
    Ok(pearson(x, y)? * rel.factor())
}

/// Mann-Whitney AUC with tied scores counted as half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // positives-beating-negatives count, ties as half, in half-units
    let mut wins2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u128, 0u128);
        for &k in &order[i..j] {
            if labels[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        wins2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Metric name to value, plus the confusion matrix for single-label tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: TaskKind,
    pub n: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Macro one-vs-rest AUC over the columns where both classes occur.
fn macro_auc(columns: &[(Vec<f64>, Vec<bool>)]) -> Option<f64> {
    let aucs: Vec<f64> = columns.iter().filter_map(|(s, l)| roc_auc(s, l).ok()).collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Report for head outputs (`scores` rows in the task's output format).
///
/// Classification rows are log-probabilities, multi-label rows are
/// probabilities thresholded at 0.5, regression rows hold one score.
pub fn evaluate_outputs(kind: TaskKind, scores: &[Vec<f64>], labels: &[Label], rel: ReliabilityConstants) -> Result<MetricsReport> {
    same_len(scores.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut m = BTreeMap::new();
    let mut confusion = None;
    match kind {
        TaskKind::Classification => {
            let classes = scores[0].len();
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    other => Err(Error::shape(format!("expected class label, got {other:?}"))),
                })
                .collect::<Result<_>>()?;
            let pred: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
            let cm = confusion_matrix(&truth, &pred, classes)?;
            let counts = cm.class_counts();
            let (micro, macro_f1) = f1_micro_macro(&counts);
            let prfs: Vec<Prf> = counts.iter().map(Counts::prf).collect();
            m.insert("accuracy".into(), accuracy(&truth, &pred)?);
            m.insert("micro_f1".into(), micro);
            m.insert("macro_f1".into(), macro_f1);
            m.insert("f1".into(), macro_f1);
            m.insert("precision".into(), prfs.iter().map(|p| p.precision).sum::<f64>() / classes as f64);
            m.insert("recall".into(), prfs.iter().map(|p| p.recall).sum::<f64>() / classes as f64);
            let columns: Vec<(Vec<f64>, Vec<bool>)> = (0..classes)
                .map(|c| (scores.iter().map(|r| r[c]).collect(), truth.iter().map(|&t| t == c).collect()))
                .collect();
            if let Some(auc) = macro_auc(&columns) {
                m.insert("roc_auc".into(), auc);
            }
            confusion = Some(cm);
        }
        TaskKind::Multilabel => {
            let truth: Vec<Vec<bool>> = labels
                .iter()
                .map(|l| match l {
                    Label::Multi(v) => Ok(v.clone()),
                    other => Err(Error::shape(format!("expected multilabel label, got {other:?}"))),
                })
                .collect::<Result<_>>()?;
            let pred: Vec<Vec<bool>> = scores.iter().map(|r| r.iter().map(|&p| p >= 0.5).collect()).collect();
            let counts = multilabel_counts(&truth, &pred)?;
            let (micro, macro_f1) = f1_micro_macro(&counts);
            m.insert("jaccard".into(), jaccard_index(&truth, &pred)?);
            m.insert("micro_f1".into(), micro);
            m.insert("macro_f1".into(), macro_f1);
            let width = truth[0].len();
            let columns: Vec<(Vec<f64>, Vec<bool>)> = (0..width)
                .map(|c| (scores.iter().map(|r| r[c]).collect(), truth.iter().map(|t| t[c]).collect()))
                .collect();
            if let Some(auc) = macro_auc(&columns) {
                m.insert("roc_auc".into(), auc);
            }
        }
        TaskKind::Regression => {
            let truth: Vec<f64> = labels
                .iter()
                .map(|l| match l {
                    Label::Score(s) => Ok(*s),
                    other => Err(Error::shape(format!("expected score label, got {other:?}"))),
                })
                .collect::<Result<_>>()?;
            let pred: Vec<f64> = scores.iter().map(|r| r[0]).collect();
            let err = mae(&pred, &truth)?;
            m.insert("mae".into(), err);
            m.insert("neg_mae".into(), -err);
            m.insert("mean_error".into(), mean_error(&pred, &truth)?);
            m.insert(
                "mse".into(),
                pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64,
            );
            if let Ok(r) = pearson(&pred, &truth) {
                m.insert("pearson".into(), r);
                m.insert("disattenuated_pearson".into(), r * rel.factor());
            }
        }
    }
    Ok(MetricsReport {
        kind,
        n: labels.len(),
        metrics: m,
        confusion,
    })
}
