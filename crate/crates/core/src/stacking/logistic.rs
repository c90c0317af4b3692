//! L2-regularized binary logistic regression fitted by gradient ascent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::activation::{logit, sigmoid};

use super::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackerConfig {
    pub reg_strength: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub threshold: f64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        StackerConfig {
            reg_strength: 1.0,
            max_iter: 10_000,
            tol: 1e-6,
            threshold: 0.5,
        }
    }
}

impl StackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_strength >= 0.0 && self.reg_strength.is_finite()) {
            return Err(Error::Config("reg_strength must be a non-negative number".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        check_threshold(self.threshold)
    }
}

pub fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must lie in [0, 1], got {t}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerModel {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    /// Gradient-ascent iterations used and final gradient norm.
    pub iterations: usize,
    pub grad_norm: f64,
}

impl StackerModel {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "stacker has {} names but {} weights",
                self.names.len(),
                self.weights.len()
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("stacker weights".into()));
        }
        check_threshold(self.threshold)
    }

    pub fn score(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.weights.len() {
            return Err(Error::shape(format!("expected {} features, got {}", self.weights.len(), values.len())));
        }
        Ok(dot(&self.weights, values) + self.bias)
    }

    pub fn probability(&self, values: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(values)?))
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(self)
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: StackerModel = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    reg: f64,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.x.len() as f64
    }

    /// Mean log-likelihood minus `reg / (2N) * |w|^2`; `theta` is `[w.., b]`.
    fn objective(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(theta.len() - 1);
        let ll: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(row, &y)| {
                let z = dot(w, row) + b[0];
                if y {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum();
        ll / self.n() - self.reg / (2.0 * self.n()) * dot(w, w)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = theta.len() - 1;
        let (w, b) = theta.split_at(d);
        let mut g = vec![0.0; d + 1];
        for (row, &y) in self.x.iter().zip(self.y) {
            let r = f64::from(u8::from(y)) - sigmoid(dot(w, row) + b[0]);
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        let n = self.n();
        for j in 0..d {
            g[j] = g[j] / n - self.reg / n * w[j];
        }
        g[d] /= n;
        g
    }
}

/// Fits the stacker on feature rows and binary labels.
///
/// The seed only draws a small starting weight vector; the bias starts at the
/// log-odds of the positive rate.
pub fn train_stacker(names: &[String], x: &[Vec<f64>], y: &[bool], cfg: &StackerConfig, seed: u64) -> Result<StackerModel> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} feature rows but {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("stacker needs at least 2 examples"));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::invalid("stacker labels contain a single class"));
    }
    let d = names.len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(Error::shape(format!("feature row {i} has {} values, schema has {d}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {i}")));
        }
    }

    let problem = Problem { x, y, reg: cfg.reg_strength };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    theta.push(logit(pos as f64 / y.len() as f64));

    let mut value = problem.objective(&theta);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut grad = problem.gradient(&theta);
    let mut norm = dot(&grad, &grad).sqrt();
    while norm >= cfg.tol && iterations < cfg.max_iter {
        iterations += 1;
        step *= 2.0;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            let v = problem.objective(&cand);
            if v >= value + 0.5 * step * norm * norm {
                break Some((cand, v));
            }
            step *= 0.5;
            if step < 1e-30 {
                break None;
            }
        };
        let Some((cand, v)) = accepted else { break };
        theta = cand;
        value = v;
        grad = problem.gradient(&theta);
        norm = dot(&grad, &grad).sqrt();
    }

    let bias = theta.pop().expect("bias slot");
    Ok(StackerModel {
        names: names.to_vec(),
        weights: theta,
        bias,
        threshold: cfg.threshold,
        iterations,
        grad_norm: norm,
    })
}

/// `(probability, flag)` with `flag = probability >= threshold`.
pub fn predict_disturbing(model: &StackerModel, fv: &FeatureVector) -> Result<(f64, bool)> {
    if fv.names != model.names {
        return Err(Error::shape(format!(
            "feature schema [{}] does not match stacker schema [{}]",
            fv.names.join(", "),
            model.names.join(", ")
        )));
    }
    let p = model.probability(&fv.values)?;
    Ok((p, p >= model.threshold))
}

/// Features sorted by signed weight, descending; ties broken by name.
pub fn feature_weight_report(model: &StackerModel) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = model.names.iter().cloned().zip(model.weights.iter().copied()).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn write_weight_report<W: std::io::Write>(out: W, report: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature", "weight"])?;
    for (name, weight) in report {
        w.write_record([name.as_str(), &weight.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
