//! Labeled text corpora: task datasets for the fine-tuned heads and the
//! response set consumed by the stacker.
//!
//! Every role shares one on-disk format, JSONL with one object per line.
//! Task records carry `id`, `text` and a `label` whose JSON shape depends on
//! the task kind: an integer class index, an array of booleans, or a float.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Multilabel,
    Regression,
}

impl TaskKind {
    /// Selection metric used for early stopping when a task does not name one.
    pub fn default_selection_metric(self) -> &'static str {
        match self {
            TaskKind::Classification => "macro_f1",
            TaskKind::Multilabel => "jaccard",
            TaskKind::Regression => "neg_mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_names: Vec<String>,
    pub selection_metric: String,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, label_names: Vec<String>) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            kind,
            label_names,
            selection_metric: kind.default_selection_metric().to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of classes `C`; zero for regression.
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("task name is empty"));
        }
        let mut seen = HashSet::new();
        for name in &self.label_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!(
                    "task `{}`: duplicate label name `{name}`",
                    self.name
                )));
            }
        }
        match self.kind {
            TaskKind::Classification | TaskKind::Multilabel if self.label_names.len() < 2 => {
                Err(Error::invalid(format!(
                    "task `{}`: {:?} needs at least 2 labels, got {}",
                    self.name,
                    self.kind,
                    self.label_names.len()
                )))
            }
            TaskKind::Regression if !self.label_names.is_empty() => Err(Error::invalid(format!(
                "task `{}`: regression takes no label names",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Multi(Vec<bool>),
    Score(f64),
}

impl Label {
    fn from_json(value: &Value, spec: &TaskSpec) -> std::result::Result<Self, String> {
        let c = spec.num_classes();
        match spec.kind {
            TaskKind::Classification => {
                let idx = value
                    .as_u64()
                    .ok_or_else(|| format!("classification label must be an integer, got {value}"))?;
                let idx = idx as usize;
                if idx >= c {
                    return Err(format!("class index {idx} out of range [0, {c})"));
                }
                Ok(Label::Class(idx))
            }
            TaskKind::Multilabel => {
                let arr = value
                    .as_array()
                    .ok_or_else(|| format!("multilabel label must be a boolean array, got {value}"))?;
                if arr.len() != c {
                    return Err(format!("multilabel label has length {} but C = {c}", arr.len()));
                }
                arr.iter()
                    .map(|v| v.as_bool().ok_or_else(|| format!("non-boolean entry {v}")))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(Label::Multi)
            }
            TaskKind::Regression => {
                let score = value
                    .as_f64()
                    .ok_or_else(|| format!("regression label must be a number, got {value}"))?;
                if !score.is_finite() {
                    return Err("regression label is not finite".into());
                }
                Ok(Label::Score(score))
            }
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Label::Class(i) => Value::from(*i),
            Label::Multi(v) => Value::from(v.clone()),
            Label::Score(s) => Value::from(*s),
        }
    }

    /// Checks this label against a task's kind and class count.
    pub fn check(&self, spec: &TaskSpec) -> Result<()> {
        let ok = match (self, spec.kind) {
            (Label::Class(i), TaskKind::Classification) => *i < spec.num_classes(),
            (Label::Multi(v), TaskKind::Multilabel) => v.len() == spec.num_classes(),
            (Label::Score(s), TaskKind::Regression) => s.is_finite(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "label {self:?} does not fit {:?} task `{}`",
                spec.kind, spec.name
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub records: Vec<TextRecord>,
}

impl Dataset {
    pub fn new(spec: TaskSpec, records: Vec<TextRecord>) -> Result<Self> {
        spec.validate()?;
        if records.is_empty() {
            return Err(Error::invalid(format!("dataset `{}` is empty", spec.name)));
        }
        let mut ids = HashSet::new();
        for r in &records {
            if r.text.is_empty() {
                return Err(Error::invalid(format!("record `{}` has empty text", r.id)));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id `{}`", r.id)));
            }
            r.label.check(&spec)?;
        }
        Ok(Dataset { spec, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label.clone()).collect()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskLine {
    id: String,
    text: String,
    label: Value,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Loads a JSONL task dataset and validates every label against `spec`.
pub fn load_task_dataset(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Dataset> {
    let path = path.as_ref();
    spec.validate()?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (line, raw) in read_lines(path)? {
        let raw: RawTaskLine = serde_json::from_str(&raw).map_err(|e| parse_err(line, e.to_string()))?;
        if raw.text.is_empty() {
            return Err(parse_err(line, "empty text".into()));
        }
        if !ids.insert(raw.id.clone()) {
            return Err(parse_err(line, format!("duplicate id `{}`", raw.id)));
        }
        let label = Label::from_json(&raw.label, spec).map_err(|m| parse_err(line, m))?;
        records.push(TextRecord {
            id: raw.id,
            text: raw.text,
            label,
        });
    }
    if records.is_empty() {
        return Err(parse_err(0, "dataset file has no records".into()));
    }
    Dataset::new(spec.clone(), records)
}

pub fn write_task_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in &dataset.records {
        let line = serde_json::json!({"id": r.id, "text": r.text, "label": r.label.to_json()});
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Deterministic exhaustive split into `(train, test)`.
///
/// The test size is `round(N * test_fraction)` clamped to `[1, N - 1]`.
pub fn split_train_test(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split a dataset of {n} record(s)")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((d.subset(&train_idx), d.subset(&test_idx)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub id: String,
    pub text: String,
    pub disturbing: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseSet {
    pub records: Vec<ResponseRecord>,
}

impl ResponseSet {
    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.disturbing == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.records.len() - self.positives()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.disturbing == 1).collect()
    }
}

pub fn load_response_set(path: impl AsRef<Path>) -> Result<ResponseSet> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (line, raw) in read_lines(path)? {
        let value: Value = serde_json::from_str(&raw).map_err(|e| parse_err(line, e.to_string()))?;
        // checked separately so that e.g. 2 gets a domain error rather than a serde one
        match value.get("disturbing").and_then(Value::as_u64) {
            Some(0) | Some(1) => {}
            other => {
                return Err(parse_err(
                    line,
                    format!("`disturbing` must be 0 or 1, got {}", other.map_or("non-integer".into(), |v| v.to_string())),
                ))
            }
        }
        let rec: ResponseRecord = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
        if rec.text.is_empty() {
            return Err(parse_err(line, "empty text".into()));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(line, format!("duplicate id `{}`", rec.id)));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(parse_err(0, "empty response set".into()));
    }
    Ok(ResponseSet { records })
}

pub fn write_response_set(path: impl AsRef<Path>, set: &ResponseSet) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in &set.records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
