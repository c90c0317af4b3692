//! Stratified k-fold cross-validation of the stacker and the feature-group
//! ablation harness built on it.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::precision_recall_f1;

use super::logistic::{train_stacker, StackerConfig};
use super::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl BinaryScores {
    pub fn from_predictions(truth: &[bool], pred: &[bool]) -> BinaryScores {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let prf = precision_recall_f1(tp, fp, fn_);
        BinaryScores {
            accuracy: (tp + tn) as f64 / truth.len().max(1) as f64,
            recall: prf.recall,
            precision: prf.precision,
            f1: prf.f1,
        }
    }

    /// Unweighted mean over folds.
    pub fn mean(folds: &[BinaryScores]) -> BinaryScores {
        let n = folds.len() as f64;
        let avg = |f: fn(&BinaryScores) -> f64| folds.iter().map(f).sum::<f64>() / n;
        BinaryScores {
            accuracy: avg(|s| s.accuracy),
            recall: avg(|s| s.recall),
            precision: avg(|s| s.precision),
            f1: avg(|s| s.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub features: String,
    pub folds: Vec<BinaryScores>,
    pub aggregate: BinaryScores,
    /// Held-out indices of each fold.
    pub fold_indices: Vec<Vec<usize>>,
}

/// Positives and negatives are shuffled separately and dealt round-robin, the
/// negatives continuing where the positives stopped, so fold sizes differ by
/// at most one and every class with at least two members reaches every
/// training split.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::invalid(format!("{} examples cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "class {} has {} examples; stratified folds need at least 2",
                u8::from(class),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn run_folds(features: &str, x: &FeatureMatrix, labels: &[bool], folds: Vec<Vec<usize>>, seed: u64, cfg: &StackerConfig) -> Result<CvReport> {
    if x.rows.len() != labels.len() {
        return Err(Error::shape(format!("{} feature rows but {} labels", x.rows.len(), labels.len())));
    }
    let mut scores = Vec::with_capacity(folds.len());
    let mut held_out = vec![usize::MAX; labels.len()];
    for (f, fold) in folds.iter().enumerate() {
        for &i in fold {
            held_out[i] = f;
        }
    }
    for (f, fold) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| held_out[i] != f).collect();
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x.rows[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let model = train_stacker(&x.names, &tx, &ty, cfg, seed.wrapping_add(f as u64))?;
        let truth: Vec<bool> = fold.iter().map(|&i| labels[i]).collect();
        let pred = fold
            .iter()
            .map(|&i| Ok(model.probability(&x.rows[i])? >= model.threshold))
            .collect::<Result<Vec<bool>>>()?;
        scores.push(BinaryScores::from_predictions(&truth, &pred));
    }
    Ok(CvReport {
        features: features.to_string(),
        aggregate: BinaryScores::mean(&scores),
        folds: scores,
        fold_indices: folds,
    })
}

pub fn cross_validate(x: &FeatureMatrix, labels: &[bool], k: usize, seed: u64, cfg: &StackerConfig) -> Result<CvReport> {
    let folds = stratified_folds(labels, k, seed)?;
    run_folds(&combination_name(&x.groups()), x, labels, folds, seed, cfg)
}

/// Display name of a group combination, e.g. `toxic+emotion`.
pub fn combination_name(groups: &[String]) -> String {
    groups.join("+")
}

/// Cross-validates every requested combination of named feature groups on
/// one shared fold assignment.
pub fn ablate(
    groups: &IndexMap<String, FeatureMatrix>,
    combinations: &[Vec<String>],
    labels: &[bool],
    k: usize,
    seed: u64,
    cfg: &StackerConfig,
) -> Result<Vec<CvReport>> {
    if groups.is_empty() || combinations.is_empty() {
        return Err(Error::Config("ablation needs at least one group and one combination".into()));
    }
    for combo in combinations {
        if combo.is_empty() {
            return Err(Error::Config("empty feature-group combination".into()));
        }
        for g in combo {
            if !groups.contains_key(g) {
                return Err(Error::Config(format!("unknown feature group `{g}`")));
            }
        }
    }
    let folds = stratified_folds(labels, k, seed)?;
    combinations
        .iter()
        .map(|combo| {
            let parts: Vec<&FeatureMatrix> = combo.iter().map(|g| &groups[g]).collect();
            let x = FeatureMatrix::hstack(&parts)?;
            run_folds(&combination_name(combo), &x, labels, folds.clone(), seed, cfg)
        })
        .collect()
}

/// Ablation table with columns `Features, Acc., Rec., Prec., F1`.
pub fn write_ablation_csv<W: std::io::Write>(out: W, reports: &[CvReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Features", "Acc.", "Rec.", "Prec.", "F1"])?;
    for r in reports {
        let a = r.aggregate;
        w.write_record([
            r.features.clone(),
            a.accuracy.to_string(),
            a.recall.to_string(),
            a.precision.to_string(),
            a.f1.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
