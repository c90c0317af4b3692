//! Acceptance gate. Each criterion prints one `PASS`/`FAIL` line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use flagstack::batcher::{collate, plan_batches, BUDGET_ESSAYS, BUDGET_TWEETS};
use flagstack::corpus::{Label, TaskKind, TaskSpec};
use flagstack::metrics::{
    accuracy, confusion_matrix, disattenuated_pearson, f1_micro_macro, jaccard_index, mae, multilabel_counts,
    precision_recall_f1, roc_auc, ReliabilityConstants,
};
use flagstack::model::activation::{log_softmax, relu, sigmoid};
use flagstack::model::{compute_loss, load_checkpoint, save_checkpoint, EncoderConfig, HeadSpec, ModelConfig, TaskModel};
use flagstack::stacking::{
    ablate, chunk_predictions, cross_validate, extract_features, extract_response_features, FeatureMatrix, FeatureMode,
    StackerConfig,
};
use flagstack::textproc::{build_vocab, tokenize, BasicTokenizer, TokenSeq, PAD_ID};
use flagstack::trainer::{evaluate_task, fit, predict_dataset, train_task, EpochRunner, StopReason, TrainConfig};
use flagstack::Result;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error. The attention key bias has an
/// identically zero gradient (softmax ignores per-row shifts), so its
/// finite-difference estimate is pure rounding noise of order 1e-11.
const GRAD_NOISE_FLOOR: f64 = 1e-6;
const GRAD_TIME_LIMIT_S: f64 = 120.0;
const METRIC_TOL: f64 = 1e-9;
const DISATTENUATED_MAX: f64 = 1.3616;
const DISATTENUATED_REPORTED: f64 = 1.362;
const DISATTENUATED_TOL: f64 = 1e-3;
const PATIENCE: usize = 5;
const MAX_EPOCHS: usize = 20;
const CHUNK_MEAN_TOL: f64 = 1e-9;
const OVERFIT_ACCURACY: f64 = 0.95;
const OVERFIT_JACCARD: f64 = 0.9;
const OVERFIT_MAE: f64 = 0.1;
const OVERFIT_TIME_LIMIT_S: f64 = 300.0;
const PIPELINE_F1: f64 = 0.9;
const IDENTITY_TOL: f64 = 1e-9;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1. Analytic gradients against central differences.

fn gradcheck_model(kind: TaskKind, seed: u64) -> (TaskModel, flagstack::batcher::Batch) {
    let vocab = build_vocab(&["a b c d e f g h"], 1, &BasicTokenizer).unwrap();
    let labels = match kind {
        TaskKind::Regression => vec![],
        _ => vec!["x".into(), "y".into(), "z".into()],
    };
    let task = TaskSpec::new("g", kind, labels).unwrap();
    let encoder = EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 16,
        vocab_size: vocab.len(),
        max_positions: 8,
        dropout_p: 0.0,
        pooler: true,
    };
    let head = HeadSpec::for_task(&task, 8);
    let model = TaskModel::new(ModelConfig { encoder, head, task, max_len: 8 }, vocab, seed).unwrap();
    let seqs: Vec<TokenSeq> = ["a b c", "d e f g h a", "h"].iter().map(|t| model.encode_text(t).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let labels = (0..3)
        .map(|_| match kind {
            TaskKind::Classification => Label::Class(rng.random_range(0..3)),
            TaskKind::Multilabel => Label::Multi((0..3).map(|_| rng.random_bool(0.5)).collect()),
            TaskKind::Regression => Label::Score(rng.random_range(-1.0..1.0)),
        })
        .collect::<Vec<_>>();
    let batch = collate(&seqs, &labels, &[0, 1, 2], PAD_ID).unwrap();
    (model, batch)
}

fn max_grad_error(kind: TaskKind, seed: u64) -> f64 {
    let (mut model, batch) = gradcheck_model(kind, seed);
    let (_, grads) = model.loss_and_grads(&batch, false, 0).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = grads.get(&name).unwrap().clone();
        let mut numeric = vec![0.0; analytic.data.len()];
        for i in 0..numeric.len() {
            let orig = model.params.get(&name).unwrap().data[i];
            let mut eval_at = |v: f64| {
                model.params.get_mut(&name).unwrap().data[i] = v;
                let out = model.predict(&batch).unwrap();
                compute_loss(kind, &out, &batch.labels).unwrap()
            };
            let plus = eval_at(orig + GRAD_STEP);
            let minus = eval_at(orig - GRAD_STEP);
            eval_at(orig);
            numeric[i] = (plus - minus) / (2.0 * GRAD_STEP);
        }
        let diff: f64 = analytic.data.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(GRAD_NOISE_FLOOR));
    }
    worst
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for kind in [TaskKind::Classification, TaskKind::Multilabel, TaskKind::Regression] {
        for seed in 0..5 {
            worst = worst.max(max_grad_error(kind, seed));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < GRAD_REL_TOL && secs < GRAD_TIME_LIMIT_S,
        format!("max relative error {worst:.2e} over 3 head kinds x 5 seeds in {secs:.1}s"),
    )
}

// 2. Metrics against brute-force recomputation.

fn oracle_prf(truth: &[usize], pred: &[usize], c: usize) -> (f64, f64, f64) {
    let predicted: Vec<usize> = (0..truth.len()).filter(|&i| pred[i] == c).collect();
    let actual: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
    let hits = predicted.iter().filter(|i| actual.contains(i)).count() as f64;
    let p = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let r = if actual.is_empty() { 0.0 } else { hits / actual.len() as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn criterion_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let classes = rng.random_range(2..7);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

        let cm = confusion_matrix(&truth, &pred, classes).unwrap();
        for t in 0..classes {
            for p in 0..classes {
                let count = (0..n).filter(|&i| truth[i] == t && pred[i] == p).count() as u64;
                if cm.counts[t][p] != count {
                    return Err(format!("confusion cell ({t},{p}) {} != {count}", cm.counts[t][p]));
                }
            }
        }
        let per_class = cm.class_counts();
        let mut f1s = Vec::new();
        for (c, counts) in per_class.iter().enumerate() {
            let got = counts.prf();
            let (p, r, f) = oracle_prf(&truth, &pred, c);
            track(got.precision, p);
            track(got.recall, r);
            track(got.f1, f);
            f1s.push(f);
        }
        let (micro, macro_) = f1_micro_macro(&per_class);
        let correct = (0..n).filter(|&i| truth[i] == pred[i]).count() as f64;
        track(micro, correct / n as f64);
        track(macro_, f1s.iter().sum::<f64>() / classes as f64);
        track(accuracy(&truth, &pred).unwrap(), correct / n as f64);

        let labels_n = rng.random_range(1..6);
        let mt: Vec<Vec<bool>> = (0..n).map(|_| (0..labels_n).map(|_| rng.random_bool(0.4)).collect()).collect();
        let mp: Vec<Vec<bool>> = (0..n).map(|_| (0..labels_n).map(|_| rng.random_bool(0.4)).collect()).collect();
        let jac: f64 = mt
            .iter()
            .zip(&mp)
            .map(|(t, p)| {
                let ts: HashSet<usize> = (0..labels_n).filter(|&j| t[j]).collect();
                let ps: HashSet<usize> = (0..labels_n).filter(|&j| p[j]).collect();
                let union = ts.union(&ps).count();
                if union == 0 {
                    1.0
                } else {
                    ts.intersection(&ps).count() as f64 / union as f64
                }
            })
            .sum::<f64>()
            / n as f64;
        track(jaccard_index(&mt, &mp).unwrap(), jac);
        let ml = multilabel_counts(&mt, &mp).unwrap();
        for (j, counts) in ml.iter().enumerate() {
            let tp = (0..n).filter(|&i| mt[i][j] && mp[i][j]).count() as u64;
            let fp = (0..n).filter(|&i| !mt[i][j] && mp[i][j]).count() as u64;
            let fn_ = (0..n).filter(|&i| mt[i][j] && !mp[i][j]).count() as u64;
            let want = precision_recall_f1(tp, fp, fn_);
            track(counts.prf().f1, want.f1);
        }

        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let yhat: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let abs_err = y.iter().zip(&yhat).map(|(a, b)| (b - a).abs()).sum::<f64>() / n as f64;
        track(mae(&yhat, &y).unwrap(), abs_err);

        let mut bin: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        bin[0] = true;
        bin[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
        track(roc_auc(&scores, &bin).unwrap(), oracle_auc(&scores, &bin));
    }
    ensure(worst <= METRIC_TOL, format!("max abs diff {worst:.2e} over 1000 random instances"))
}

// 3. Disattenuated Pearson of a series with itself.

fn criterion_disattenuation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rel = ReliabilityConstants::default();
    let mut worst: f64 = 0.0;
    let mut last = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        x[0] = x[1] + 1.0;
        let v = disattenuated_pearson(&x, &x, rel).unwrap();
        worst = worst.max((v - DISATTENUATED_MAX).abs()).max((v - DISATTENUATED_REPORTED).abs());
        last = v;
    }
    ensure(
        worst <= DISATTENUATED_TOL,
        format!("value {last:.6}, max distance to 1.3616 and 1.362 is {worst:.1e}"),
    )
}

// 4. Early stopping on scripted dev metrics.

struct Scripted(Vec<f64>);

impl EpochRunner for Scripted {
    fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        Ok((1.0, self.0[epoch - 1]))
    }
    fn on_improvement(&mut self, _epoch: usize) {}
}

fn criterion_early_stopping() -> Check {
    for b in 1..=30usize {
        let metrics: Vec<f64> = (1..=40).map(|e| if e <= b { e as f64 / 10.0 } else { b as f64 / 10.0 - 0.01 * (e % 3) as f64 }).collect();
        let (state, stop) = fit(&mut Scripted(metrics), MAX_EPOCHS, PATIENCE, |_| {});
        let expected = (b + PATIENCE).min(MAX_EPOCHS);
        let expected_stop = if b + PATIENCE <= MAX_EPOCHS { StopReason::Patience } else { StopReason::MaxEpochs };
        if state.epoch != expected || stop != expected_stop || state.best_epoch != b.min(MAX_EPOCHS) {
            return Err(format!("best at {b}: halted at {} ({stop:?}), expected {expected}", state.epoch));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let metrics: Vec<f64> = (0..40).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
        let (state, stop) = fit(&mut Scripted(metrics), MAX_EPOCHS, PATIENCE, |_| {});
        let ok = state.epoch <= MAX_EPOCHS
            && match stop {
                StopReason::Patience => state.epoch == state.best_epoch + PATIENCE,
                StopReason::MaxEpochs => state.epoch == MAX_EPOCHS,
                StopReason::Diverged(_) => false,
            };
        if !ok {
            return Err(format!("random sequence halted at {} with best {}", state.epoch, state.best_epoch));
        }
    }
    Ok(format!("halts at best + {PATIENCE} for best epochs 1..=30, capped at {MAX_EPOCHS}; 1000 random sequences"))
}

// 5. Token-budget batching.

fn criterion_batcher() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let n = rng.random_range(1..300);
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=324)).collect();
        let budget = [BUDGET_ESSAYS.0, BUDGET_TWEETS.0, rng.random_range(50..3000)][case % 3];
        let seed = rng.random();
        let shuffle = case % 2 == 0;
        let plan = plan_batches(&lengths, budget, seed, shuffle).unwrap();
        let mut seen = vec![0u32; n];
        for g in &plan.groups {
            let longest = g.iter().map(|&i| lengths[i]).max().unwrap();
            if g.len() > 1 && g.len() * longest > budget {
                return Err(format!("case {case}: batch of {} x {longest} exceeds {budget}", g.len()));
            }
            g.iter().for_each(|&i| seen[i] += 1);
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(format!("case {case}: batches do not partition the indices"));
        }
        if plan != plan_batches(&lengths, budget, seed, shuffle).unwrap() {
            return Err(format!("case {case}: plan differs under a fixed seed"));
        }
    }
    for (budget, max_len) in [BUDGET_ESSAYS, BUDGET_TWEETS] {
        let json = format!(r#"{{"max_tokens_per_batch": {budget}, "max_len": {max_len}}}"#);
        let cfg: TrainConfig = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        if (cfg.max_tokens_per_batch, cfg.max_len) != (budget, max_len) {
            return Err(format!("config did not carry {budget}/{max_len}"));
        }
    }
    Ok("1000 random length lists respect the budget, partition, and replay; 5000/224 and 5400/324 accepted".into())
}

// 6. Chunk-averaged features.

fn criterion_chunk_average() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = class_dataset("topic", &[("distress", DISTRESS), ("sports", SPORTS)], 5, &mut rng);
    let models = vec![
        tiny_model(&train, 16, 64, 1),
        tiny_model(&multilabel_dataset("tox", &[("insult", INSULT), ("threat", THREAT)], 10, &mut rng), 16, 64, 2),
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let short = sentence(&mut rng, &[(DISTRESS, 2), (INSULT, 1)], 5 + trial);
        let fv = extract_features(&short, &models, 50, FeatureMode::Probabilities).map_err(|e| e.to_string())?;
        let mut single = Vec::new();
        for m in &models {
            let seq = m.encode_tokens(&tokenize(&short)).unwrap();
            let batch = collate(&[seq], &[], &[0], PAD_ID).unwrap();
            single.extend(m.to_probabilities(&m.predict(&batch).unwrap()).data);
        }
        if fv.values != single {
            return Err(format!("short text {trial}: features differ from the single-chunk prediction"));
        }

        let long = sentence(&mut rng, &[(SPORTS, 10), (THREAT, 10)], 120 + trial);
        let tokens = tokenize(&long);
        let fv = extract_features(&long, &models, 50, FeatureMode::Probabilities).map_err(|e| e.to_string())?;
        let mut expected = Vec::new();
        for m in &models {
            let mut sum = vec![0.0; m.config.head.output_dim];
            for piece in tokens.chunks(50) {
                let seq = m.encode_tokens(piece).unwrap();
                let batch = collate(&[seq], &[], &[0], PAD_ID).unwrap();
                let p = m.to_probabilities(&m.predict(&batch).unwrap());
                sum.iter_mut().zip(&p.data).for_each(|(s, v)| *s += v);
            }
            expected.extend(sum.iter().map(|s| s / 3.0));
        }
        if tokens.chunks(50).count() != 3 {
            return Err("long text did not produce 3 chunks".into());
        }
        for (a, b) in fv.values.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        let per = chunk_predictions(&long, &models[0], 50, FeatureMode::Probabilities).unwrap();
        if per.rows != 3 {
            return Err("chunk_predictions row count".into());
        }
    }
    ensure(
        worst <= CHUNK_MEAN_TOL,
        format!("short texts bit-identical; 3-chunk mean max abs diff {worst:.2e}"),
    )
}

// 7. Overfitting small constructed datasets.

fn overfit(train: &flagstack::corpus::Dataset, seed: u64) -> (flagstack::metrics::MetricsReport, usize) {
    let model = tiny_model(train, 32, 16, seed);
    let cfg = TrainConfig { patience: MAX_EPOCHS, ..fast_train(16, MAX_EPOCHS, seed) };
    let out = train_task(train, train, model, &cfg, |_| {}).unwrap();
    (evaluate_task(&out.best, train).unwrap(), out.state.epoch)
}

fn criterion_overfit() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cls = class_dataset("cls", &[("distress", DISTRESS), ("sports", SPORTS), ("cooking", COOKING)], 20, &mut rng);
    let ml = multilabel_dataset("ml", &[("insult", INSULT), ("threat", THREAT), ("joy", JOY)], 60, &mut rng);
    let reg = regression_dataset("reg", SADNESS, 60, &mut rng);
    let (r_cls, e_cls) = overfit(&cls, 11);
    let (r_ml, e_ml) = overfit(&ml, 12);
    let (r_reg, e_reg) = overfit(&reg, 13);
    let acc = r_cls.get("accuracy").unwrap();
    let jac = r_ml.get("jaccard").unwrap();
    let err = r_reg.get("mae").unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        acc >= OVERFIT_ACCURACY && jac >= OVERFIT_JACCARD && err <= OVERFIT_MAE && secs < OVERFIT_TIME_LIMIT_S && e_cls.max(e_ml).max(e_reg) <= MAX_EPOCHS,
        format!("train accuracy {acc:.3}, jaccard {jac:.3}, mae {err:.3} in {secs:.1}s"),
    )
}

// 8. Synthetic end-to-end pipeline.

fn criterion_pipeline() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let reddit = class_dataset("reddit", &[("SuicideWatch", DISTRESS), ("sports", SPORTS), ("cooking", COOKING)], 30, &mut rng);
    let emotion = class_dataset("emotion", &[("sadness", SADNESS), ("joy", JOY)], 30, &mut rng);
    let toxic = multilabel_dataset("toxic", &[("insult", INSULT), ("threat", THREAT)], 80, &mut rng);
    let mut models = Vec::new();
    for (i, d) in [&reddit, &toxic, &emotion].into_iter().enumerate() {
        let cfg = fast_train(64, 12, 80 + i as u64);
        let out = train_task(d, d, tiny_model(d, 32, 64, 80 + i as u64), &cfg, |_| {}).map_err(|e| e.to_string())?;
        models.push(out.best);
    }
    let responses = response_set(100, &mut rng);
    let labels = responses.labels();
    let x = extract_response_features(&responses, &models, 50, FeatureMode::Probabilities).map_err(|e| e.to_string())?;
    let groups: IndexMap<String, FeatureMatrix> = x.split_groups();
    let combos: Vec<Vec<String>> = [vec!["toxic"], vec!["emotion"], vec!["reddit"], vec!["toxic", "emotion"], vec!["reddit", "toxic", "emotion"]]
        .iter()
        .map(|c| c.iter().map(|s| s.to_string()).collect())
        .collect();
    let cfg = StackerConfig::default();
    let rows = ablate(&groups, &combos, &labels, 5, 8, &cfg).map_err(|e| e.to_string())?;
    let full = cross_validate(&x, &labels, 5, 8, &cfg).map_err(|e| e.to_string())?;
    let f1 = |name: &str| rows.iter().find(|r| r.features == name).unwrap().aggregate.f1;
    let best = rows.iter().map(|r| r.aggregate.f1).fold(f64::NEG_INFINITY, f64::max);
    let table: Vec<String> = rows.iter().map(|r| format!("{}={:.3}", r.features, r.aggregate.f1)).collect();
    ensure(
        full.aggregate.f1 >= PIPELINE_F1 && f1("reddit") > f1("toxic") && f1("reddit+toxic+emotion") >= best,
        format!("5-fold F1 {:.3}; ablation {}", full.aggregate.f1, table.join(", ")),
    )
}

// 9. Checkpoint round-trip.

fn criterion_checkpoint() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = multilabel_dataset("ckpt", &[("insult", INSULT), ("threat", THREAT)], 30, &mut rng);
    let out = train_task(&data, &data, tiny_model(&data, 16, 16, 9), &fast_train(16, 2, 9), |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (tag, model) in [("trained", out.best), ("fresh", tiny_model(&data, 16, 16, 10).quantized())] {
        let path = dir.path().join(tag);
        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let before = predict_dataset(&model, &data).unwrap();
        let after = predict_dataset(&loaded, &data).unwrap();
        let same = before.data.iter().zip(&after.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || loaded.params != model.params {
            return Err(format!("{tag} model predictions changed after reload"));
        }
        checked += before.data.len();
    }
    Ok(format!("{checked} probe outputs bitwise identical after save/load"))
}

// 10. Activation and loss identities.

fn criterion_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = (sigmoid(0.0) - 0.5).abs();
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-50.0..50.0);
        if relu(relu(x)) != relu(x) {
            return Err(format!("relu not idempotent at {x}"));
        }
        worst = worst.max((sigmoid(x) + sigmoid(-x) - 1.0).abs());
        let row: Vec<f64> = (0..rng.random_range(1..10)).map(|_| rng.random_range(-30.0..30.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let lp = log_softmax(&row);
        worst = worst.max((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs());
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        for (a, b) in lp.iter().zip(log_softmax(&shifted)) {
            worst = worst.max((a - b).abs());
        }
    }
    let uniform = flagstack::model::Matrix::from_vec(1, 2, vec![0.5f64.ln(); 2]);
    let one_bit = compute_loss(TaskKind::Classification, &uniform, &[Label::Class(0)]).unwrap();
    worst = worst.max((one_bit - 1.0).abs());
    ensure(
        worst <= IDENTITY_TOL,
        format!("sigmoid(0)={}, relu idempotent, log-softmax normalized and shift invariant; max deviation {worst:.1e}", sigmoid(0.0)),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", criterion_gradients),
        ("metric oracle equivalence", criterion_metrics),
        ("disattenuation constant", criterion_disattenuation),
        ("early stopping", criterion_early_stopping),
        ("batcher", criterion_batcher),
        ("chunk-average identity", criterion_chunk_average),
        ("overfit sanity", criterion_overfit),
        ("end-to-end synthetic pipeline", criterion_pipeline),
        ("checkpoint round-trip", criterion_checkpoint),
        ("activation and loss identities", criterion_identities),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
