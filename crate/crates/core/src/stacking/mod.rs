//! Chunk-averaged features from task models and the logistic stacker on top.

mod cv;
mod logistic;

pub use cv::{ablate, combination_name, cross_validate, stratified_folds, write_ablation_csv, BinaryScores, CvReport};
pub use logistic::{
    check_threshold, feature_weight_report, predict_disturbing, train_stacker, write_weight_report, StackerConfig,
    StackerModel,
};

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{ResponseSet, TaskKind};
use crate::error::{Error, Result};
use crate::model::activation::logit;
use crate::model::{Matrix, TaskModel, INFERENCE_BATCH_TOKENS};
use crate::textproc::{chunk, tokenize};

/// What a feature slot holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Class or label probabilities; regression scores pass through.
    #[default]
    Probabilities,
    /// Log-probabilities for classification, log-odds for multi-label.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

/// Slot names of `models` in concatenation order.
pub fn feature_schema(models: &[TaskModel]) -> Vec<String> {
    models.iter().flat_map(TaskModel::output_names).collect()
}

fn model_chunk_features(model: &TaskModel, chunks: &[Vec<String>], mode: FeatureMode) -> Result<Vec<f64>> {
    let seqs = chunks.iter().map(|c| model.encode_tokens(c)).collect::<Result<Vec<_>>>()?;
    let scores = model.predict_seqs(&seqs, INFERENCE_BATCH_TOKENS)?;
    let per_chunk = to_features(model, &scores, mode);
    Ok(column_means(&per_chunk))
}

fn to_features(model: &TaskModel, scores: &Matrix, mode: FeatureMode) -> Matrix {
    match (mode, model.kind()) {
        (FeatureMode::Probabilities, _) => model.to_probabilities(scores),
        (FeatureMode::Logits, TaskKind::Multilabel) => scores.map(logit),
        (FeatureMode::Logits, _) => scores.clone(),
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums.iter().map(|s| s / m.rows as f64).collect()
}

/// Per-chunk eval-mode outputs of one model, one row per chunk.
pub fn chunk_predictions(text: &str, model: &TaskModel, chunk_size: usize, mode: FeatureMode) -> Result<Matrix> {
    let chunks = chunk(&tokenize(text), chunk_size)?;
    let seqs = chunks.chunks.iter().map(|c| model.encode_tokens(c)).collect::<Result<Vec<_>>>()?;
    Ok(to_features(model, &model.predict_seqs(&seqs, INFERENCE_BATCH_TOKENS)?, mode))
}

/// Splits `text` into `chunk_size`-token chunks, scores every chunk with
/// every model and averages each slot uniformly over chunks.
pub fn extract_features(text: &str, models: &[TaskModel], chunk_size: usize, mode: FeatureMode) -> Result<FeatureVector> {
    if models.is_empty() {
        return Err(Error::Config("feature extraction needs at least one task model".into()));
    }
    let chunks = chunk(&tokenize(text), chunk_size)?;
    let mut values = Vec::new();
    for model in models {
        if chunk_size + 1 > model.config.max_len {
            return Err(Error::Config(format!(
                "chunk size {chunk_size} plus [CLS] exceeds max_len {} of model `{}`",
                model.config.max_len,
                model.name()
            )));
        }
        values.extend(model_chunk_features(model, &chunks.chunks, mode)?);
    }
    Ok(FeatureVector { names: feature_schema(models), values })
}

/// Feature rows for a set of texts sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, i: usize) -> FeatureVector {
        FeatureVector { names: self.names.clone(), values: self.rows[i].clone() }
    }

    /// Group of a slot is the task name before the first `.`.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let g = n.split('.').next().unwrap_or(n).to_string();
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn select(&self, cols: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
            ids: self.ids.clone(),
            rows: self.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect(),
        }
    }

    pub fn split_groups(&self) -> IndexMap<String, FeatureMatrix> {
        self.groups()
            .into_iter()
            .map(|g| {
                let prefix = format!("{g}.");
                let cols: Vec<usize> = (0..self.names.len()).filter(|&j| self.names[j].starts_with(&prefix)).collect();
                let m = self.select(&cols);
                (g, m)
            })
            .collect()
    }

    /// Column-wise concatenation; all parts must list the same ids.
    pub fn hstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut out = FeatureMatrix { names: Vec::new(), ids: first.ids.clone(), rows: vec![Vec::new(); first.len()] };
        for p in parts {
            if p.ids != first.ids {
                return Err(Error::shape("feature groups list different rows"));
            }
            out.names.extend(p.names.iter().cloned());
            for (row, extra) in out.rows.iter_mut().zip(&p.rows) {
                row.extend_from_slice(extra);
            }
        }
        Ok(out)
    }
}

/// Features for every response. Responses are scored on worker threads; the
/// result does not depend on the thread count.
pub fn extract_response_features(set: &ResponseSet, models: &[TaskModel], chunk_size: usize, mode: FeatureMode) -> Result<FeatureMatrix> {
    let n = set.records.len();
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let per = n.div_ceil(workers.max(1)).max(1);
    let rows: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = set
            .records
            .chunks(per)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| extract_features(&r.text, models, chunk_size, mode).map(|fv| fv.values))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("feature worker panicked")).collect()
    });
    Ok(FeatureMatrix {
        names: feature_schema(models),
        ids: set.records.iter().map(|r| r.id.clone()).collect(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// CSV with columns `id, disturbing, <slot names...>`.
pub fn write_feature_matrix(path: impl AsRef<Path>, x: &FeatureMatrix, labels: &[bool]) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != x.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.len(), labels.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "disturbing".to_string()];
    header.extend(x.names.iter().cloned());
    w.write_record(&header)?;
    for ((id, row), &l) in x.ids.iter().zip(&x.rows).zip(labels) {
        let mut rec = vec![id.clone(), u8::from(l).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<(FeatureMatrix, Vec<bool>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "disturbing" {
        return Err(Error::Parse { path: path.into(), line: 1, message: "header must start with `id,disturbing`".into() });
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut x = FeatureMatrix { names, ids: Vec::new(), rows: Vec::new() };
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |message: String| Error::Parse { path: path.into(), line: i + 2, message };
        labels.push(match &rec[1] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("disturbing must be 0 or 1, got `{other}`"))),
        });
        x.ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("`{v}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        x.rows.push(row);
    }
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ResponseRecord, TaskSpec};
    use crate::model::{EncoderConfig, HeadSpec, ModelConfig};
    use crate::textproc::{build_vocab, BasicTokenizer};

    fn model(name: &str, kind: TaskKind, seed: u64) -> TaskModel {
        let vocab = build_vocab(&["the cat sat on a mat and the dog ran far away"], 1, &BasicTokenizer).unwrap();
        let labels = match kind {
            TaskKind::Regression => vec![],
            _ => vec!["p".into(), "q".into()],
        };
        let task = TaskSpec::new(name, kind, labels).unwrap();
        let mut encoder = EncoderConfig::desk(vocab.len(), 64);
        encoder.hidden_dim = 8;
        encoder.ff_dim = 16;
        let head = HeadSpec::for_task(&task, 8);
        TaskModel::new(ModelConfig { encoder, head, task, max_len: 64 }, vocab, seed).unwrap()
    }

    fn words(n: usize) -> String {
        let pool = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "far", "away", "zebra"];
        (0..n).map(|i| pool[(i * 7 + i / 3) % pool.len()]).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn slots_stay_within_chunk_range() {
        let models = vec![model("c", TaskKind::Classification, 1), model("m", TaskKind::Multilabel, 2)];
        let text = words(130);
        let fv = extract_features(&text, &models, 50, FeatureMode::Probabilities).unwrap();
        assert_eq!(fv.names, ["c.p", "c.q", "m.p", "m.q"]);
        let mut slot = 0;
        for m in &models {
            let per = chunk_predictions(&text, m, 50, FeatureMode::Probabilities).unwrap();
            assert_eq!(per.rows, 3);
            for c in 0..per.cols {
                let col: Vec<f64> = (0..per.rows).map(|r| per.at(r, c)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(fv.values[slot] >= lo && fv.values[slot] <= hi);
                assert!((0.0..=1.0).contains(&fv.values[slot]));
                slot += 1;
            }
        }
    }

    #[test]
    fn empty_text_is_a_cls_only_chunk() {
        let models = vec![model("r", TaskKind::Regression, 3)];
        let fv = extract_features("", &models, 50, FeatureMode::Probabilities).unwrap();
        assert_eq!(fv.names, ["r.score"]);
        let per = chunk_predictions("", &models[0], 50, FeatureMode::Probabilities).unwrap();
        assert_eq!(fv.values, per.data);
        assert!(extract_features("a", &[], 50, FeatureMode::Probabilities).is_err());
        assert!(extract_features("a", &models, 64, FeatureMode::Probabilities).is_err());
    }

    #[test]
    fn logit_mode_inverts_probabilities() {
        let models = vec![model("m", TaskKind::Multilabel, 5)];
        let p = extract_features("the cat", &models, 50, FeatureMode::Probabilities).unwrap();
        let l = extract_features("the cat", &models, 50, FeatureMode::Logits).unwrap();
        for (a, b) in p.values.iter().zip(&l.values) {
            assert!((logit(*a) - b).abs() < 1e-9);
        }
    }

    #[test]
    fn response_matrix_round_trips_through_csv() {
        let models = vec![model("c", TaskKind::Classification, 1), model("r", TaskKind::Regression, 2)];
        let set = ResponseSet {
            records: (0..7)
                .map(|i| ResponseRecord { id: format!("r{i}"), text: words(10 + 20 * i), disturbing: (i % 2) as u8 })
                .collect(),
        };
        let x = extract_response_features(&set, &models, 50, FeatureMode::Probabilities).unwrap();
        for (i, r) in set.records.iter().enumerate() {
            let fv = extract_features(&r.text, &models, 50, FeatureMode::Probabilities).unwrap();
            assert_eq!(fv.values, x.rows[i]);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        write_feature_matrix(&path, &x, &set.labels()).unwrap();
        let (back, labels) = read_feature_matrix(&path).unwrap();
        assert_eq!(back, x);
        assert_eq!(labels, set.labels());

        let groups = x.split_groups();
        assert_eq!(groups.keys().collect::<Vec<_>>(), ["c", "r"]);
        let joined = FeatureMatrix::hstack(&[&groups["c"], &groups["r"]]).unwrap();
        assert_eq!(joined, x);
    }
}
