//! Post-norm transformer encoder, `[CLS]` pooling and the task head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{EncoderConfig, HeadSpec, Parameters};
use super::tape::{AttentionLayout, Tape, Var};
use super::tensor::Matrix;
use crate::batcher::Batch;
use crate::corpus::TaskKind;
use crate::error::{Error, Result};

/// Seeded dropout masks; `None` in eval mode.
pub(crate) struct Dropout(Option<ChaCha8Rng>);

impl Dropout {
    pub(crate) fn new(train_mode: bool, seed: u64) -> Self {
        Dropout(train_mode.then(|| ChaCha8Rng::seed_from_u64(seed)))
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        let Some(rng) = self.0.as_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = tape.value(x).len();
        let scale = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.dropout(x, scale)
    }
}

fn linear(tape: &mut Tape, params: &Parameters, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"), params.get(&format!("{prefix}.weight"))?);
    let b = tape.param(&format!("{prefix}.bias"), params.get(&format!("{prefix}.bias"))?);
    Ok(tape.linear(x, w, b))
}

fn layer_norm(tape: &mut Tape, params: &Parameters, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gain"), params.get(&format!("{prefix}.gain"))?);
    let b = tape.param(&format!("{prefix}.bias"), params.get(&format!("{prefix}.bias"))?);
    Ok(tape.layer_norm(x, g, b))
}

/// Records the encoder on `tape`; returns the `[B*T, H]` hidden states and the
/// `[B, H]` pooled representation.
pub(crate) fn build_encoder(
    tape: &mut Tape,
    params: &Parameters,
    cfg: &EncoderConfig,
    batch: &Batch,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    if batch.width > cfg.max_positions {
        return Err(Error::invalid(format!(
            "batch width {} exceeds max_positions {}",
            batch.width, cfg.max_positions
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if batch.rows == 0 || batch.width == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..batch.rows).flat_map(|_| 0..batch.width).collect();

    let tok_table = tape.param("embeddings.token.weight", params.get("embeddings.token.weight")?);
    let pos_table = tape.param("embeddings.position.weight", params.get("embeddings.position.weight")?);
    let tok = tape.gather(tok_table, ids);
    let pos = tape.gather(pos_table, positions);
    let x = tape.add(tok, pos);
    let x = layer_norm(tape, params, x, "embeddings.ln")?;
    let mut x = dropout.apply(tape, x, cfg.dropout_p);

    let layout = AttentionLayout {
        batch: batch.rows,
        seq: batch.width,
        heads: cfg.num_heads,
        key_mask: batch.mask.clone(),
    };
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        let q = linear(tape, params, x, &format!("{p}.attn.query"))?;
        let k = linear(tape, params, x, &format!("{p}.attn.key"))?;
        let v = linear(tape, params, x, &format!("{p}.attn.value"))?;
        let a = tape.attention(q, k, v, layout.clone());
        let a = linear(tape, params, a, &format!("{p}.attn.output"))?;
        let a = dropout.apply(tape, a, cfg.dropout_p);
        let r = tape.add(x, a);
        x = layer_norm(tape, params, r, &format!("{p}.attn.ln"))?;

        let f = linear(tape, params, x, &format!("{p}.ff.inner"))?;
        let f = tape.gelu(f);
        let f = linear(tape, params, f, &format!("{p}.ff.outer"))?;
        let f = dropout.apply(tape, f, cfg.dropout_p);
        let r = tape.add(x, f);
        x = layer_norm(tape, params, r, &format!("{p}.ff.ln"))?;
    }

    let cls_rows: Vec<usize> = (0..batch.rows).map(|b| b * batch.width).collect();
    let cls = tape.select_rows(x, cls_rows);
    let pooled = if cfg.pooler {
        let p = linear(tape, params, cls, "pooler")?;
        tape.tanh(p)
    } else {
        cls
    };
    Ok((x, pooled))
}

/// Records the FC/ReLU stack and the output activation for `head.kind`.
pub(crate) fn build_head(
    tape: &mut Tape,
    params: &Parameters,
    head: &HeadSpec,
    pooled: Var,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut z = pooled;
    for j in 0..head.hidden_sizes.len() {
        z = linear(tape, params, z, &format!("head.fc.{j}"))?;
        z = tape.relu(z);
        z = dropout.apply(tape, z, head.dropout_p);
    }
    let logits = linear(tape, params, z, "head.output")?;
    Ok(match head.kind {
        TaskKind::Classification => tape.log_softmax(logits),
        TaskKind::Multilabel => tape.sigmoid(logits),
        TaskKind::Regression => logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[B*T, H]`, row `b*T + t` is position `t` of sequence `b`.
    pub hidden: Matrix,
    pub pooled: Matrix,
}

pub fn encoder_forward(
    params: &Parameters,
    cfg: &EncoderConfig,
    batch: &Batch,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let mut dropout = Dropout::new(train_mode, dropout_seed);
    let (hidden, pooled) = build_encoder(&mut tape, params, cfg, batch, &mut dropout)?;
    Ok(EncoderOutput {
        hidden: tape.value(hidden).clone(),
        pooled: tape.value(pooled).clone(),
    })
}

/// Eval-mode head: log-probabilities, probabilities or raw scores per row.
pub fn head_forward(params: &Parameters, pooled: &Matrix, head: &HeadSpec) -> Result<Matrix> {
    if !pooled.all_finite() {
        return Err(Error::NonFinite("pooled".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(pooled.clone());
    let out = build_head(&mut tape, params, head, x, &mut Dropout::new(false, 0))?;
    Ok(tape.value(out).clone())
}
