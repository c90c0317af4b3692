//! Transformer task models: encoder, heads, losses, gradients and checkpoints.

pub mod activation;
pub mod checkpoint;
pub mod encoder;
pub mod import;
pub mod loss;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_with, read_config as read_checkpoint_config, save_checkpoint};
pub use encoder::{encoder_forward, head_forward, EncoderOutput};
pub use loss::compute_loss;
pub use params::{init_parameters, EncoderConfig, HeadSpec, ModelConfig, Parameters};
pub use tape::{Gradients, Tape};
pub use tensor::Matrix;

use crate::batcher::{collate, plan_batches, Batch};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::textproc::{encode, tokenize, TokenSeq, Vocab, PAD_ID};
use encoder::{build_encoder, build_head, Dropout};

/// Padded-token budget used when a model is only run for inference.
pub const INFERENCE_BATCH_TOKENS: usize = 4096;

/// A fine-tuned task model with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Parameters,
}

impl TaskModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, seed)?;
        Self::from_parts(config, vocab, params)
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: Parameters) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but encoder vocab_size is {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        params.check_layout(&config.layout())?;
        Ok(TaskModel { config, vocab, params })
    }

    pub fn name(&self) -> &str {
        &self.config.task.name
    }

    pub fn kind(&self) -> TaskKind {
        self.config.task.kind
    }

    /// Same model with parameters rounded to checkpoint precision.
    pub fn quantized(&self) -> TaskModel {
        TaskModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.quantized(),
        }
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<TokenSeq> {
        encode(tokens, &self.vocab, self.config.max_len)
    }

    pub fn encode_text(&self, text: &str) -> Result<TokenSeq> {
        self.encode_tokens(&tokenize(text))
    }

    /// Head outputs: log-probabilities, probabilities, or raw scores.
    pub fn forward(&self, batch: &Batch, train_mode: bool, dropout_seed: u64) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut dropout = Dropout::new(train_mode, dropout_seed);
        let (_, pooled) = build_encoder(&mut tape, &self.params, &self.config.encoder, batch, &mut dropout)?;
        let out = build_head(&mut tape, &self.params, &self.config.head, pooled, &mut dropout)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Matrix> {
        self.forward(batch, false, 0)
    }

    /// Loss on `batch.labels` and gradients for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch, train_mode: bool, dropout_seed: u64) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let mut dropout = Dropout::new(train_mode, dropout_seed);
        let (_, pooled) = build_encoder(&mut tape, &self.params, &self.config.encoder, batch, &mut dropout)?;
        let scores = build_head(&mut tape, &self.params, &self.config.head, pooled, &mut dropout)?;
        let (value, grad) = loss::loss_and_grad(self.kind(), tape.value(scores), &batch.labels)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let root = tape.loss(scores, value, grad);
        Ok((value, tape.backward(root)?))
    }

    /// Eval-mode outputs for many sequences, batched under a token budget and
    /// returned in input order.
    pub fn predict_seqs(&self, seqs: &[TokenSeq], max_tokens: usize) -> Result<Matrix> {
        let out_dim = self.config.head.output_dim;
        let mut out = Matrix::zeros(seqs.len(), out_dim);
        let lengths: Vec<usize> = seqs.iter().map(TokenSeq::len).collect();
        for group in plan_batches(&lengths, max_tokens, 0, false)?.groups {
            let batch = collate(seqs, &[], &group, PAD_ID)?;
            let scores = self.predict(&batch)?;
            for (r, &i) in group.iter().enumerate() {
                out.row_mut(i).copy_from_slice(scores.row(r));
            }
        }
        Ok(out)
    }

    /// Converts head outputs to probabilities; regression scores pass through.
    pub fn to_probabilities(&self, scores: &Matrix) -> Matrix {
        match self.kind() {
            TaskKind::Classification => scores.map(f64::exp),
            TaskKind::Multilabel | TaskKind::Regression => scores.clone(),
        }
    }

    /// Feature-slot names, `task.label` per output unit (`task.score` for regression).
    pub fn output_names(&self) -> Vec<String> {
        let task = &self.config.task;
        match task.kind {
            TaskKind::Regression => vec![format!("{}.score", task.name)],
            _ => task.label_names.iter().map(|l| format!("{}.{l}", task.name)).collect(),
        }
    }
}
