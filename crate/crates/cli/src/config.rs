//! The run configuration document and everything derived from it.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flagstack::corpus::{load_task_dataset, split_train_test, Dataset, TaskKind, TaskSpec};
use flagstack::model::params::HEAD_DROPOUT;
use flagstack::model::{EncoderConfig, HeadSpec, ModelConfig, TaskModel};
use flagstack::stacking::{check_threshold, FeatureMode, StackerConfig};
use flagstack::textproc::{build_vocab, BasicTokenizer, DEFAULT_CHUNK_SIZE};
use flagstack::trainer::TrainConfig;

/// A configuration or validation failure (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn default_folds() -> usize {
    5
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn default_fraction() -> f64 {
    0.1
}

fn default_min_count() -> usize {
    1
}

fn default_head_dropout() -> f64 {
    HEAD_DROPOUT
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
    #[serde(default = "default_true")]
    pub pooler: bool,
    /// Hidden widths of the head; defaults to two layers of `hidden_dim`.
    #[serde(default)]
    pub head_hidden: Option<Vec<usize>>,
    #[serde(default = "default_head_dropout")]
    pub head_dropout: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let desk = EncoderConfig::desk(3, 2);
        EncoderSettings {
            num_layers: desk.num_layers,
            hidden_dim: desk.hidden_dim,
            num_heads: desk.num_heads,
            ff_dim: desk.ff_dim,
            dropout_p: desk.dropout_p,
            pooler: desk.pooler,
            head_hidden: None,
            head_dropout: HEAD_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub selection_metric: Option<String>,
    pub train_path: PathBuf,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Trained checkpoint used by feature extraction and prediction.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Replaces the run-wide training settings for this task.
    #[serde(default)]
    pub training: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub responses: Option<PathBuf>,
    /// Task models whose outputs become stacker features. Defaults to every
    /// non-regression task.
    #[serde(default)]
    pub feature_groups: Option<Vec<String>>,
    /// Group combinations for the ablation table. Defaults to each group
    /// alone followed by all groups together.
    #[serde(default)]
    pub combinations: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub stacker: StackerConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default)]
    pub feature_mode: FeatureMode,
}

/// Root seed combined with the SHA-256 of `label`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    root ^ u64::from_le_bytes(bytes)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for t in &mut cfg.tasks {
            resolve(base, &mut t.train_path);
            for p in [&mut t.dev_path, &mut t.test_path, &mut t.checkpoint].into_iter().flatten() {
                resolve(base, p);
            }
        }
        if let Some(p) = &mut cfg.responses {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, threshold: Option<f64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = threshold {
            self.stacker.threshold = t;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let cfg = |e: flagstack::Error| config_err(e.to_string());
        if self.tasks.is_empty() {
            return Err(config_err("config lists no tasks"));
        }
        let mut names = HashSet::new();
        for t in &self.tasks {
            if t.name.is_empty() || t.name.contains(['.', '+', '/', '\\']) {
                return Err(config_err(format!("task name `{}` must be non-empty without `.`, `+` or path separators", t.name)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(config_err(format!("duplicate task `{}`", t.name)));
            }
            self.task_spec(t).map_err(cfg)?;
            self.train_config(t).validate().map_err(cfg)?;
            for (what, f) in [("dev_fraction", t.dev_fraction), ("test_fraction", t.test_fraction)] {
                if !(f > 0.0 && f < 1.0) {
                    return Err(config_err(format!("task `{}`: {what} must lie in (0, 1)", t.name)));
                }
            }
            self.model_config(t, 3).map_err(cfg)?;
        }
        self.stacker.validate().map_err(cfg)?;
        check_threshold(self.stacker.threshold).map_err(cfg)?;
        if self.folds < 2 {
            return Err(config_err("folds must be at least 2"));
        }
        if self.chunk_size < 1 {
            return Err(config_err("chunk_size must be at least 1"));
        }
        let groups = self.groups();
        if groups.is_empty() {
            return Err(config_err("no feature groups configured"));
        }
        for g in &groups {
            if !names.contains(g.as_str()) {
                return Err(config_err(format!("feature group `{g}` is not a configured task")));
            }
        }
        for combo in self.combos() {
            if combo.is_empty() {
                return Err(config_err("empty feature-group combination"));
            }
            for g in &combo {
                if !groups.contains(g) {
                    return Err(config_err(format!("combination uses `{g}`, which is not a feature group")));
                }
            }
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> anyhow::Result<&TaskEntry> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| config_err(format!("unknown task `{name}`")))
    }

    pub fn groups(&self) -> Vec<String> {
        match &self.feature_groups {
            Some(g) => g.clone(),
            None => self.tasks.iter().filter(|t| t.kind != TaskKind::Regression).map(|t| t.name.clone()).collect(),
        }
    }

    pub fn combos(&self) -> Vec<Vec<String>> {
        match &self.combinations {
            Some(c) => c.clone(),
            None => {
                let groups = self.groups();
                let mut out: Vec<Vec<String>> = groups.iter().map(|g| vec![g.clone()]).collect();
                if groups.len() > 1 {
                    out.push(groups);
                }
                out
            }
        }
    }

    pub fn task_spec(&self, t: &TaskEntry) -> flagstack::Result<TaskSpec> {
        let mut spec = TaskSpec::new(t.name.clone(), t.kind, t.labels.clone())?;
        if let Some(m) = &t.selection_metric {
            spec.selection_metric = m.clone();
            spec.validate()?;
        }
        Ok(spec)
    }

    /// Task training settings with the derived task seed.
    pub fn train_config(&self, t: &TaskEntry) -> TrainConfig {
        let mut c = t.training.clone().unwrap_or_else(|| self.train.clone());
        c.seed = derive_seed(self.seed, &t.name);
        c
    }

    pub fn model_config(&self, t: &TaskEntry, vocab_size: usize) -> flagstack::Result<ModelConfig> {
        let e = &self.encoder;
        let max_len = self.train_config(t).max_len;
        let task = self.task_spec(t)?;
        let encoder = EncoderConfig {
            num_layers: e.num_layers,
            hidden_dim: e.hidden_dim,
            num_heads: e.num_heads,
            ff_dim: e.ff_dim,
            vocab_size,
            max_positions: max_len,
            dropout_p: e.dropout_p,
            pooler: e.pooler,
        };
        let mut head = HeadSpec::for_task(&task, e.hidden_dim);
        if let Some(h) = &e.head_hidden {
            head.hidden_sizes = h.clone();
        }
        head.dropout_p = e.head_dropout;
        let config = ModelConfig { encoder, head, task, max_len };
        config.validate()?;
        Ok(config)
    }

    /// Fails with a config error naming any missing input of task `t`.
    pub fn require_task_data(&self, t: &TaskEntry) -> anyhow::Result<()> {
        require_file(&t.train_path, &format!("task `{}` train_path", t.name))?;
        for (what, p) in [("dev_path", &t.dev_path), ("test_path", &t.test_path)] {
            if let Some(p) = p {
                require_file(p, &format!("task `{}` {what}", t.name))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_of(&self, name: &str) -> anyhow::Result<PathBuf> {
        let t = self.task(name)?;
        let dir = t
            .checkpoint
            .clone()
            .ok_or_else(|| config_err(format!("feature group `{name}` has no checkpoint configured")))?;
        if !dir.is_dir() {
            return Err(config_err(format!("checkpoint for `{name}` not found: {}", dir.display())));
        }
        Ok(dir)
    }

    pub fn responses_path(&self) -> anyhow::Result<PathBuf> {
        let p = self.responses.clone().ok_or_else(|| config_err("config has no `responses` path"))?;
        require_file(&p, "responses")?;
        Ok(p)
    }

    /// Stable short hash of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..6])
    }
}

pub fn require_file(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} not found: {}", p.display())))
    }
}

/// Train, dev and test portions of one task.
pub struct TaskSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn task_splits(cfg: &RunConfig, t: &TaskEntry) -> anyhow::Result<TaskSplits> {
    let spec = cfg.task_spec(t)?;
    let full = load_task_dataset(&t.train_path, &spec)?;
    let (rest, test) = match &t.test_path {
        Some(p) => (full, load_task_dataset(p, &spec)?),
        None => split_train_test(&full, t.test_fraction, derive_seed(cfg.seed, &format!("{}/test", t.name)))?,
    };
    let (train, dev) = match &t.dev_path {
        Some(p) => (rest, load_task_dataset(p, &spec)?),
        None => split_train_test(&rest, t.dev_fraction, derive_seed(cfg.seed, &format!("{}/dev", t.name)))?,
    };
    Ok(TaskSplits { train, dev, test })
}

/// Fresh model for `t` with a vocabulary built from its training split.
pub fn fresh_model(cfg: &RunConfig, t: &TaskEntry, train: &Dataset) -> anyhow::Result<TaskModel> {
    let texts: Vec<&str> = train.texts().collect();
    let vocab = build_vocab(&texts, t.min_count, &BasicTokenizer)?;
    let config = cfg.model_config(t, vocab.len())?;
    Ok(TaskModel::new(config, vocab, derive_seed(cfg.seed, &t.name))?)
}
