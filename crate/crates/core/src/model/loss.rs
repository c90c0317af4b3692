//! Task losses over head outputs.
//!
//! Cross-entropy terms are reported in bits: the natural-log value divided by
//! `LN_2`. Mean squared error has no logarithm and is unaffected.
//!
//! | kind           | head output       | loss                                     |
//! |----------------|-------------------|------------------------------------------|
//! | classification | log-probabilities | mean over rows of `-log2 q_true`         |
//! | multilabel     | probabilities     | mean over cells of binary cross-entropy  |
//! | regression     | raw scores        | mean of squared residuals                |

use std::f64::consts::LN_2;

use super::tensor::Matrix;
use crate::corpus::{Label, TaskKind};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss value and its gradient with respect to `scores`.
pub fn loss_and_grad(kind: TaskKind, scores: &Matrix, labels: &[Label]) -> Result<(f64, Matrix)> {
    if scores.rows != labels.len() || scores.rows == 0 {
        return Err(Error::shape(format!("{} score rows for {} labels", scores.rows, labels.len())));
    }
    let n = scores.rows as f64;
    let mut grad = Matrix::zeros(scores.rows, scores.cols);
    let mut total = 0.0;
    match kind {
        TaskKind::Classification => {
            let floor = PROB_FLOOR.ln();
            for (r, label) in labels.iter().enumerate() {
                let Label::Class(c) = *label else {
                    return Err(Error::shape(format!("expected a class label, got {label:?}")));
                };
                if c >= scores.cols {
                    return Err(Error::shape(format!("class {c} outside {} outputs", scores.cols)));
                }
                let lq = scores.at(r, c);
                if lq > floor {
                    total -= lq;
                    *grad.at_mut(r, c) = -1.0 / (n * LN_2);
                } else {
                    total -= floor;
                }
            }
            total /= LN_2;
        }
        TaskKind::Multilabel => {
            let cells = n * scores.cols as f64;
            for (r, label) in labels.iter().enumerate() {
                let Label::Multi(bits) = label else {
                    return Err(Error::shape(format!("expected a multilabel label, got {label:?}")));
                };
                if bits.len() != scores.cols {
                    return Err(Error::shape(format!("{} label bits for {} outputs", bits.len(), scores.cols)));
                }
                for (c, &y) in bits.iter().enumerate() {
                    let raw = scores.at(r, c);
                    let p = raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    let y = if y { 1.0 } else { 0.0 };
                    total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                    if p == raw {
                        *grad.at_mut(r, c) = -(y / p - (1.0 - y) / (1.0 - p)) / (cells * LN_2);
                    }
                }
            }
            total /= cells * LN_2;
            return Ok((total, grad));
        }
        TaskKind::Regression => {
            if scores.cols != 1 {
                return Err(Error::shape(format!("regression expects 1 output, got {}", scores.cols)));
            }
            for (r, label) in labels.iter().enumerate() {
                let Label::Score(y) = *label else {
                    return Err(Error::shape(format!("expected a score label, got {label:?}")));
                };
                let resid = scores.at(r, 0) - y;
                total += resid * resid;
                *grad.at_mut(r, 0) = 2.0 * resid / n;
            }
        }
    }
    Ok((total / n, grad))
}

pub fn compute_loss(kind: TaskKind, scores: &Matrix, labels: &[Label]) -> Result<f64> {
    loss_and_grad(kind, scores, labels).map(|(l, _)| l)
}
