//! Subcommand bodies.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use flagstack::corpus::load_response_set;
use flagstack::metrics::MetricsReport;
use flagstack::model::{load_checkpoint, save_checkpoint, TaskModel};
use flagstack::stacking::{
    ablate as run_ablation, cross_validate, extract_features, extract_response_features, feature_schema,
    feature_weight_report, predict_disturbing, read_feature_matrix, train_stacker, write_ablation_csv,
    write_feature_matrix, write_weight_report, CvReport, FeatureMatrix, StackerModel,
};
use flagstack::trainer::{evaluate_task, train_task, StopReason};

use crate::config::{config_err, derive_seed, fresh_model, require_file, task_splits, RunConfig};
use crate::rundir::RunDir;
use crate::Common;

fn setup(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_overrides(common.seed, common.threshold);
    cfg.validate()?;
    Ok(cfg)
}

fn open_run(common: &Common, cfg: &RunConfig) -> anyhow::Result<RunDir> {
    let run = RunDir::acquire(common.run_dir.as_deref(), &cfg.hash())?;
    write_json(&run.join("config.json"), cfg)?;
    eprintln!("run directory: {}", run.path().display());
    Ok(run)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    task: &'a str,
    checkpoint: PathBuf,
    selection_metric: &'a str,
    best_epoch: usize,
    best_metric: f64,
    epochs: usize,
    stop: StopReason,
    test: MetricsReport,
}

pub fn train(common: &Common, task: &str) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let entry = cfg.task(task)?;
    cfg.require_task_data(entry)?;
    let splits = task_splits(&cfg, entry)?;
    let model = fresh_model(&cfg, entry, &splits.train)?;
    let train_cfg = cfg.train_config(entry);

    let run = open_run(common, &cfg)?;
    let task_dir = run.join(task);
    let mut log = create(&task_dir.join("train_log.jsonl"))?;
    let mut log_err = None;
    eprintln!(
        "training `{task}`: {} train, {} dev, {} test records",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    );
    let outcome = train_task(&splits.train, &splits.dev, model, &train_cfg, |r| {
        eprintln!("epoch {:>3}  loss {:.6}  dev {:.6}  {:.1}s", r.epoch, r.train_loss, r.dev_metric, r.seconds);
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("cannot write training log");
    }
    let checkpoint = task_dir.join("checkpoint");
    save_checkpoint(&outcome.best, &checkpoint)?;
    let summary = TrainSummary {
        task,
        checkpoint: checkpoint.clone(),
        selection_metric: &outcome.best.config.task.selection_metric,
        best_epoch: outcome.state.best_epoch,
        best_metric: outcome.state.best_metric,
        epochs: outcome.state.epoch,
        stop: outcome.stop,
        test: evaluate_task(&outcome.best, &splits.test)?,
    };
    write_json(&task_dir.join("best.json"), &summary)?;
    println!("{}", checkpoint.display());
    Ok(())
}

fn load_task_model(cfg: &RunConfig, task: &str, dir: &Path) -> anyhow::Result<TaskModel> {
    let entry = cfg.task(task)?;
    let model = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if model.config.task != cfg.task_spec(entry)? {
        return Err(config_err(format!("checkpoint {} was not trained for task `{task}` as configured", dir.display())));
    }
    Ok(model)
}

pub fn eval(common: &Common, task: &str, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let entry = cfg.task(task)?;
    cfg.require_task_data(entry)?;
    if !checkpoint.is_dir() {
        return Err(config_err(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let model = load_task_model(&cfg, task, checkpoint)?;
    let splits = task_splits(&cfg, entry)?;
    let report = evaluate_task(&model, &splits.test)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Feature-group models in configured order.
fn group_models(cfg: &RunConfig, groups: &[String]) -> anyhow::Result<Vec<TaskModel>> {
    let dirs = groups.iter().map(|g| cfg.checkpoint_of(g)).collect::<anyhow::Result<Vec<_>>>()?;
    groups.iter().zip(&dirs).map(|(g, d)| load_task_model(cfg, g, d)).collect()
}

fn features_for_responses(cfg: &RunConfig, run: &RunDir) -> anyhow::Result<(FeatureMatrix, Vec<bool>)> {
    let responses = cfg.responses_path()?;
    let models = group_models(cfg, &cfg.groups())?;
    let set = load_response_set(&responses)?;
    eprintln!("extracting features for {} responses from {} models", set.records.len(), models.len());
    let x = extract_response_features(&set, &models, cfg.chunk_size, cfg.feature_mode)?;
    let labels = set.labels();
    write_feature_matrix(run.join("features.csv"), &x, &labels)?;
    Ok((x, labels))
}

pub fn extract(common: &Common) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    cfg.responses_path()?;
    for g in cfg.groups() {
        cfg.checkpoint_of(&g)?;
    }
    let run = open_run(common, &cfg)?;
    features_for_responses(&cfg, &run)?;
    println!("{}", run.join("features.csv").display());
    Ok(())
}

fn read_features(path: &Path) -> anyhow::Result<(FeatureMatrix, Vec<bool>)> {
    require_file(path, "feature file")?;
    Ok(read_feature_matrix(path)?)
}

fn fit_stacker(cfg: &RunConfig, run: &RunDir, x: &FeatureMatrix, y: &[bool]) -> anyhow::Result<StackerModel> {
    let model = train_stacker(&x.names, &x.rows, y, &cfg.stacker, derive_seed(cfg.seed, "stacker"))?;
    model.save_json(run.join("stacker.json"))?;
    write_weight_report(create(&run.join("weights.csv"))?, &feature_weight_report(&model))?;
    Ok(model)
}

pub fn stack(common: &Common, features: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (x, y) = read_features(features)?;
    let run = open_run(common, &cfg)?;
    let model = fit_stacker(&cfg, &run, &x, &y)?;
    eprintln!("stacker converged after {} iterations (gradient norm {:.3e})", model.iterations, model.grad_norm);
    println!("{}", run.join("stacker.json").display());
    Ok(())
}

pub fn crossval(common: &Common, features: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (x, y) = read_features(features)?;
    let run = open_run(common, &cfg)?;
    let report = cross_validate(&x, &y, cfg.folds, derive_seed(cfg.seed, "cv"), &cfg.stacker)?;
    write_json(&run.join("crossval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    Ok(())
}

fn ablation_table(cfg: &RunConfig, run: &RunDir, x: &FeatureMatrix, y: &[bool]) -> anyhow::Result<Vec<CvReport>> {
    let reports = run_ablation(&x.split_groups(), &cfg.combos(), y, cfg.folds, derive_seed(cfg.seed, "cv"), &cfg.stacker)?;
    write_ablation_csv(create(&run.join("ablation.csv"))?, &reports)?;
    write_json(&run.join("ablation.json"), &reports)?;
    Ok(reports)
}

pub fn ablate(common: &Common, features: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let (x, y) = read_features(features)?;
    let run = open_run(common, &cfg)?;
    let reports = ablation_table(&cfg, &run, &x, &y)?;
    let mut out = std::io::stdout().lock();
    write_ablation_csv(&mut out, &reports)?;
    Ok(())
}

#[derive(Serialize)]
struct Flag<'a> {
    id: &'a str,
    probability: f64,
    flag: bool,
}

pub fn predict(common: &Common, stacker: &Path, text: Option<String>, input: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    require_file(stacker, "stacker")?;
    if let Some(p) = &input {
        require_file(p, "input")?;
    }
    let model = StackerModel::load_json(stacker)?.with_threshold(cfg.stacker.threshold)?;
    let mut groups: Vec<String> = Vec::new();
    for name in &model.names {
        let g = name.split('.').next().unwrap_or(name).to_string();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let models = group_models(&cfg, &groups)?;
    let schema = feature_schema(&models);
    if schema != model.names {
        anyhow::bail!("stacker expects features {:?} but the configured models produce {:?}", model.names, schema);
    }

    let items: Vec<(String, String)> = match (text, input) {
        (Some(t), _) => vec![("text".to_string(), t)],
        (None, Some(p)) => read_inputs(&p)?,
        (None, None) => unreachable!("clap requires --text or --input"),
    };
    let mut out = std::io::stdout().lock();
    for (id, text) in &items {
        let fv = extract_features(text, &models, cfg.chunk_size, cfg.feature_mode)?;
        let (probability, flag) = predict_disturbing(&model, &fv)?;
        writeln!(out, "{}", serde_json::to_string(&Flag { id, probability, flag })?)?;
    }
    Ok(())
}

fn read_inputs(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        let text = v
            .get("text")
            .and_then(|t| t.as_str())
            .with_context(|| format!("{}:{}: missing string field `text`", path.display(), i + 1))?;
        let id = match v.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) if !other.is_null() => other.to_string(),
            _ => (i + 1).to_string(),
        };
        items.push((id, text.to_string()));
    }
    Ok(items)
}

pub fn report(stacker: &Path) -> anyhow::Result<()> {
    require_file(stacker, "stacker")?;
    let model = StackerModel::load_json(stacker)?;
    write_weight_report(std::io::stdout().lock(), &feature_weight_report(&model))?;
    Ok(())
}

pub fn pipeline(common: &Common) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    cfg.responses_path()?;
    for g in cfg.groups() {
        cfg.checkpoint_of(&g)?;
        cfg.require_task_data(cfg.task(&g)?)?;
    }
    let run = open_run(common, &cfg)?;

    let (x, y) = features_for_responses(&cfg, &run)?;
    let reports = ablation_table(&cfg, &run, &x, &y)?;
    for r in &reports {
        eprintln!("{:<40} F1 {:.4}", r.features, r.aggregate.f1);
    }
    fit_stacker(&cfg, &run, &x, &y)?;

    for g in cfg.groups() {
        let entry = cfg.task(&g)?;
        let model = load_task_model(&cfg, &g, &cfg.checkpoint_of(&g)?)?;
        let splits = task_splits(&cfg, entry)?;
        let report = evaluate_task(&model, &splits.test)?;
        write_json(&run.join("metrics").join(format!("{g}.json")), &report)?;
        if let Some(cm) = &report.confusion {
            cm.write_csv(create(&run.join("confusion").join(format!("{g}.csv")))?, &entry.labels)?;
        }
    }
    println!("{}", run.path().display());
    Ok(())
}
