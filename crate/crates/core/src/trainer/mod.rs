//! Fine-tuning a task model: Adam over token-budget batches, dev evaluation
//! after every epoch, and early stopping on the task's selection metric.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batcher::{collate, plan_batches, Batch};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_outputs, MetricsReport, ReliabilityConstants};
use crate::model::{Matrix, TaskModel, INFERENCE_BATCH_TOKENS};
use crate::textproc::{TokenSeq, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_tokens_per_batch: usize,
    pub max_len: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            max_epochs: 20,
            patience: 5,
            max_tokens_per_batch: 5000,
            max_len: 224,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if self.max_tokens_per_batch < 1 {
            return bad("max_tokens_per_batch must be at least 1");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub history: Vec<EpochRecord>,
}

/// Patience counter over a higher-is-better metric. Only a strict increase
/// counts as improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_improve: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_improve: 0,
        }
    }

    /// Records `metric` for `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some((_, best)) => metric > best,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_improve >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn since_improve(&self) -> usize {
        self.since_improve
    }
}

/// What the epoch loop drives. `train_task` implements it over a real model;
/// tests can script it.
pub trait EpochRunner {
    /// Trains one epoch (1-based) and returns `(train_loss, dev_metric)`.
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)>;
    /// Called right after an epoch produced a new best dev metric.
    fn on_improvement(&mut self, epoch: usize);
}

/// Runs epochs until patience runs out or `max_epochs` is reached. A
/// non-finite loss ends the run with [`StopReason::Diverged`].
pub fn fit(runner: &mut dyn EpochRunner, max_epochs: usize, patience: usize, mut log: impl FnMut(&EpochRecord)) -> (TrainState, StopReason) {
    let mut stopper = EarlyStopping::new(patience);
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut epoch = 0;
    while epoch < max_epochs {
        epoch += 1;
        let started = Instant::now();
        let (train_loss, dev_metric) = match runner.run_epoch(epoch) {
            Ok(r) => r,
            Err(e) => {
                epoch -= 1;
                stop = StopReason::Diverged(format!("epoch {}: {e}", epoch + 1));
                break;
            }
        };
        if !train_loss.is_finite() {
            stop = StopReason::Diverged(format!("epoch {epoch}: non-finite training loss {train_loss}"));
            let record = EpochRecord { epoch, train_loss, dev_metric, seconds: started.elapsed().as_secs_f64() };
            log(&record);
            history.push(record);
            break;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&record);
        history.push(record);
        if stopper.observe(epoch, dev_metric) {
            runner.on_improvement(epoch);
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_metric) = stopper.best().unwrap_or((0, f64::NEG_INFINITY));
    let state = TrainState {
        epoch,
        best_metric,
        best_epoch,
        epochs_since_improve: stopper.since_improve(),
        history,
    };
    (state, stop)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the best dev epoch, at checkpoint precision.
    pub best: TaskModel,
    pub state: TrainState,
    pub stop: StopReason,
}

/// Seed for one (epoch, batch) slot derived from the run seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

pub fn encode_dataset(model: &TaskModel, d: &Dataset) -> Result<Vec<TokenSeq>> {
    d.texts().map(|t| model.encode_text(t)).collect()
}

/// One forward/backward/Adam step; returns the pre-update loss.
pub fn train_step(model: &mut TaskModel, batch: &Batch, adam: &mut AdamState, cfg: &AdamConfig, train_mode: bool, dropout_seed: u64) -> Result<f64> {
    let (loss, grads) = model.loss_and_grads(batch, train_mode, dropout_seed)?;
    adam_step(&mut model.params, &grads, adam, cfg)?;
    Ok(loss)
}

struct Runner<'a> {
    model: TaskModel,
    seqs: Vec<TokenSeq>,
    lengths: Vec<usize>,
    train: &'a Dataset,
    dev: &'a Dataset,
    cfg: &'a TrainConfig,
    adam: AdamState,
    adam_cfg: AdamConfig,
    best: Option<TaskModel>,
    last: Option<TaskModel>,
}

impl EpochRunner for Runner<'_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let labels = self.train.labels();
        let plan = plan_batches(&self.lengths, self.cfg.max_tokens_per_batch, mix(self.cfg.seed, epoch as u64, 0), true)?;
        let mut loss_sum = 0.0;
        for (b, group) in plan.groups.iter().enumerate() {
            let batch = collate(&self.seqs, &labels, group, PAD_ID)?;
            let seed = mix(self.cfg.seed, epoch as u64, b as u64 + 1);
            let loss = train_step(&mut self.model, &batch, &mut self.adam, &self.adam_cfg, true, seed)
                .map_err(|e| Error::Diverged { epoch, message: e.to_string() })?;
            loss_sum += loss * group.len() as f64;
        }
        let train_loss = loss_sum / self.seqs.len() as f64;
        // Score the checkpoint-precision snapshot so the kept best model is
        // exactly the one that earned the metric.
        let snapshot = self.model.quantized();
        let metric_name = &snapshot.config.task.selection_metric;
        let report = evaluate_task(&snapshot, self.dev)?;
        let metric = report
            .get(metric_name)
            .ok_or_else(|| Error::Config(format!("selection metric `{metric_name}` not produced for this task")))?;
        self.last = Some(snapshot);
        Ok((train_loss, metric))
    }

    fn on_improvement(&mut self, _epoch: usize) {
        self.best = self.last.take();
    }
}

/// Fine-tunes every parameter of `model` on `train`, selecting on `dev`.
///
/// Returns the best-dev snapshot, not the last one. Divergence after at least
/// one completed epoch still returns the best snapshot with
/// [`StopReason::Diverged`]; divergence before that is an error.
pub fn train_task(
    train: &Dataset,
    dev: &Dataset,
    model: TaskModel,
    cfg: &TrainConfig,
    log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.spec != dev.spec || train.spec != model.config.task {
        return Err(Error::Config("train, dev and model must share one task spec".into()));
    }
    if dev.is_empty() || train.is_empty() {
        return Err(Error::invalid("train and dev sets must be non-empty"));
    }
    if cfg.max_len != model.config.max_len {
        return Err(Error::Config(format!(
            "train max_len {} differs from model max_len {}",
            cfg.max_len, model.config.max_len
        )));
    }
    let seqs = encode_dataset(&model, train)?;
    let lengths = seqs.iter().map(TokenSeq::len).collect();
    let mut runner = Runner {
        model,
        seqs,
        lengths,
        train,
        dev,
        cfg,
        adam: AdamState::new(),
        adam_cfg: cfg.adam(),
        best: None,
        last: None,
    };
    let (state, stop) = fit(&mut runner, cfg.max_epochs, cfg.patience, log);
    match runner.best {
        Some(best) => Ok(TrainOutcome { best, state, stop }),
        None => Err(Error::Diverged {
            epoch: state.epoch + 1,
            message: match stop {
                StopReason::Diverged(m) => m,
                _ => "no epoch produced a usable dev metric".into(),
            },
        }),
    }
}

/// Eval-mode head outputs for every record, in dataset order.
pub fn predict_dataset(model: &TaskModel, d: &Dataset) -> Result<Matrix> {
    let seqs = encode_dataset(model, d)?;
    model.predict_seqs(&seqs, INFERENCE_BATCH_TOKENS)
}

pub fn evaluate_task(model: &TaskModel, d: &Dataset) -> Result<MetricsReport> {
    if d.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let scores = predict_dataset(model, d)?;
    evaluate_outputs(model.kind(), &scores.to_rows(), &d.labels(), ReliabilityConstants::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        metrics: Vec<f64>,
        improvements: Vec<usize>,
    }

    impl EpochRunner for Scripted {
        fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
            Ok((1.0, self.metrics[(epoch - 1).min(self.metrics.len() - 1)]))
        }
        fn on_improvement(&mut self, epoch: usize) {
            self.improvements.push(epoch);
        }
    }

    #[test]
    fn plateau_stops_after_patience() {
        let mut s = Scripted { metrics: vec![0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9], improvements: vec![] };
        let (state, stop) = fit(&mut s, 20, 5, |_| {});
        assert_eq!(stop, StopReason::Patience);
        assert_eq!(state.epoch, 7);
        assert_eq!((state.best_epoch, state.best_metric), (2, 0.6));
        assert_eq!(s.improvements, vec![1, 2]);
        assert_eq!(state.history.len(), 7);
    }

    #[test]
    fn max_epochs_dominates() {
        let mut s = Scripted { metrics: vec![0.1], improvements: vec![] };
        let (state, stop) = fit(&mut s, 1, 5, |_| {});
        assert_eq!((state.epoch, stop), (1, StopReason::MaxEpochs));

        let mut s = Scripted { metrics: (0..30).map(f64::from).collect(), improvements: vec![] };
        let (state, stop) = fit(&mut s, 20, 5, |_| {});
        assert_eq!((state.epoch, stop, state.best_epoch), (20, StopReason::MaxEpochs, 20));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        struct Blowup;
        impl EpochRunner for Blowup {
            fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
                Ok((if epoch == 3 { f64::NAN } else { 1.0 }, epoch as f64))
            }
            fn on_improvement(&mut self, _: usize) {}
        }
        let (state, stop) = fit(&mut Blowup, 20, 5, |_| {});
        assert!(matches!(stop, StopReason::Diverged(_)));
        assert_eq!(state.best_epoch, 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
    }
}
