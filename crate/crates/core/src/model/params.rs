use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use crate::corpus::{TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Dropout applied after each ReLU in the task head.
pub const HEAD_DROPOUT: f64 = 0.5;

fn default_true() -> bool {
    true
}

fn default_head_dropout() -> f64 {
    HEAD_DROPOUT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
    /// Linear + tanh transform of the `[CLS]` state before the head.
    #[serde(default = "default_true")]
    pub pooler: bool,
}

impl EncoderConfig {
    /// 2 layers, hidden 64, 2 heads, feed-forward 128.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 2,
            ff_dim: 128,
            vocab_size,
            max_positions,
            dropout_p: 0.1,
            pooler: true,
        }
    }

    /// BERT-Base dimensions.
    pub fn base(vocab_size: usize, max_positions: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ff_dim: 3072,
            vocab_size,
            max_positions,
            dropout_p: 0.1,
            pooler: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub kind: TaskKind,
    #[serde(default = "default_head_dropout")]
    pub dropout_p: f64,
}

impl HeadSpec {
    /// Two hidden layers of the encoder width.
    pub fn for_task(task: &TaskSpec, hidden_dim: usize) -> Self {
        HeadSpec {
            hidden_sizes: vec![hidden_dim, hidden_dim],
            output_dim: match task.kind {
                TaskKind::Regression => 1,
                _ => task.num_classes(),
            },
            kind: task.kind,
            dropout_p: HEAD_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Regression => self.output_dim == 1,
            _ => self.output_dim >= 2,
        };
        if !ok {
            return Err(Error::Config(format!(
                "output_dim {} inconsistent with {:?} head",
                self.output_dim, self.kind
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("head hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("head dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a task model's shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub task: TaskSpec,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.head.kind != self.task.kind {
            return Err(Error::Config("head kind differs from task kind".into()));
        }
        if self.task.kind != TaskKind::Regression && self.head.output_dim != self.task.num_classes() {
            return Err(Error::Config(format!(
                "head output_dim {} but task has {} classes",
                self.head.output_dim,
                self.task.num_classes()
            )));
        }
        if self.max_len < 2 || self.max_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "max_len {} must lie in [2, max_positions = {}]",
                self.max_len, self.encoder.max_positions
            )));
        }
        Ok(())
    }

    /// Tensor names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let e = &self.encoder;
        let h = e.hidden_dim;
        let mut out: Vec<(String, [usize; 2])> = vec![
            ("embeddings.token.weight".into(), [e.vocab_size, h]),
            ("embeddings.position.weight".into(), [e.max_positions, h]),
            ("embeddings.ln.gain".into(), [1, h]),
            ("embeddings.ln.bias".into(), [1, h]),
        ];
        for l in 0..e.num_layers {
            for part in ["query", "key", "value", "output"] {
                out.push((format!("layers.{l}.attn.{part}.weight"), [h, h]));
                out.push((format!("layers.{l}.attn.{part}.bias"), [1, h]));
            }
            out.push((format!("layers.{l}.attn.ln.gain"), [1, h]));
            out.push((format!("layers.{l}.attn.ln.bias"), [1, h]));
            out.push((format!("layers.{l}.ff.inner.weight"), [h, e.ff_dim]));
            out.push((format!("layers.{l}.ff.inner.bias"), [1, e.ff_dim]));
            out.push((format!("layers.{l}.ff.outer.weight"), [e.ff_dim, h]));
            out.push((format!("layers.{l}.ff.outer.bias"), [1, h]));
            out.push((format!("layers.{l}.ff.ln.gain"), [1, h]));
            out.push((format!("layers.{l}.ff.ln.bias"), [1, h]));
        }
        if e.pooler {
            out.push(("pooler.weight".into(), [h, h]));
            out.push(("pooler.bias".into(), [1, h]));
        }
        let mut width = h;
        for (j, &size) in self.head.hidden_sizes.iter().enumerate() {
            out.push((format!("head.fc.{j}.weight"), [width, size]));
            out.push((format!("head.fc.{j}.bias"), [1, size]));
            width = size;
        }
        out.push(("head.output.weight".into(), [width, self.head.output_dim]));
        out.push(("head.output.bias".into(), [1, self.head.output_dim]));
        out
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters(IndexMap<String, Matrix>);

impl Parameters {
    pub fn new() -> Self {
        Parameters(IndexMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        if self.0.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.0.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.0
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Matrix::len).sum()
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn quantized(&self) -> Parameters {
        Parameters(
            self.0
                .iter()
                .map(|(k, m)| (k.clone(), m.map(|v| v as f32 as f64)))
                .collect(),
        )
    }

    /// Checks names and shapes against a layout.
    pub fn check_layout(&self, layout: &[(String, [usize; 2])]) -> Result<()> {
        for (name, shape) in layout {
            let m = self.0.get(name).ok_or_else(|| Error::Checkpoint {
                tensor: name.clone(),
                message: "missing".into(),
            })?;
            if m.shape() != *shape {
                return Err(Error::shape(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        if self.0.len() != layout.len() {
            let extra = self.0.keys().find(|k| !layout.iter().any(|(n, _)| n == *k));
            return Err(Error::shape(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

/// Glorot-uniform weights (`U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`),
/// layer-norm gains of one, zero biases.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for (name, [rows, cols]) in config.layout() {
        let m = if name.ends_with(".bias") {
            Matrix::zeros(rows, cols)
        } else if name.ends_with(".gain") {
            Matrix::filled(rows, cols, 1.0)
        } else {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
        };
        params.insert(name, m)?;
    }
    Ok(params)
}
