//! Synthetic corpora with planted signal, shared by the integration tests.

#![allow(dead_code)]

use flagstack::corpus::{Dataset, Label, ResponseRecord, ResponseSet, TaskKind, TaskSpec, TextRecord};
use flagstack::model::{EncoderConfig, HeadSpec, ModelConfig, TaskModel};
use flagstack::textproc::{build_vocab, BasicTokenizer};
use flagstack::trainer::TrainConfig;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FILLER: &[&str] = &["the", "a", "and", "it", "was", "day", "then", "we", "my", "this"];
pub const DISTRESS: &[&str] = &["hopeless", "alone", "worthless", "empty", "tired"];
pub const SPORTS: &[&str] = &["goal", "team", "match", "coach", "score"];
pub const COOKING: &[&str] = &["recipe", "bake", "flour", "oven", "salt"];
pub const SADNESS: &[&str] = &["cry", "tears", "grief", "sorrow"];
pub const JOY: &[&str] = &["laugh", "smile", "happy", "cheer"];
pub const INSULT: &[&str] = &["idiot", "moron", "fool", "loser"];
pub const THREAT: &[&str] = &["hurt", "punch", "attack", "destroy"];

pub fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// `signal` words from each pool plus filler up to `len`, shuffled.
pub fn sentence(rng: &mut ChaCha8Rng, pools: &[(&[&str], usize)], len: usize) -> String {
    let mut words: Vec<&str> = Vec::new();
    for (pool, count) in pools {
        for _ in 0..*count {
            words.push(pick(rng, pool));
        }
    }
    while words.len() < len {
        words.push(pick(rng, FILLER));
    }
    words.shuffle(rng);
    words.join(" ")
}

pub fn dataset(spec: TaskSpec, rows: Vec<(String, Label)>) -> Dataset {
    let records = rows
        .into_iter()
        .enumerate()
        .map(|(i, (text, label))| TextRecord { id: format!("{}-{i}", spec.name), text, label })
        .collect();
    Dataset::new(spec, records).unwrap()
}

/// Each class owns a keyword pool; two keywords per sequence.
pub fn class_dataset(name: &str, pools: &[(&str, &[&str])], per_class: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let spec = TaskSpec::new(name, TaskKind::Classification, pools.iter().map(|(n, _)| n.to_string()).collect()).unwrap();
    let mut rows = Vec::new();
    for i in 0..per_class {
        for (c, (_, pool)) in pools.iter().enumerate() {
            let len = 6 + (i % 5);
            rows.push((sentence(rng, &[(pool, 2)], len), Label::Class(c)));
        }
    }
    dataset(spec, rows)
}

/// Label `j` is on iff a keyword from pool `j` occurs.
pub fn multilabel_dataset(name: &str, pools: &[(&str, &[&str])], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let spec = TaskSpec::new(name, TaskKind::Multilabel, pools.iter().map(|(n, _)| n.to_string()).collect()).unwrap();
    let rows = (0..n)
        .map(|_| {
            let on: Vec<bool> = pools.iter().map(|_| rng.random_bool(0.5)).collect();
            let chosen: Vec<(&[&str], usize)> = pools.iter().zip(&on).filter(|(_, &b)| b).map(|((_, p), _)| (*p, 2)).collect();
            (sentence(rng, &chosen, 8), Label::Multi(on))
        })
        .collect();
    dataset(spec, rows)
}

/// Target is the fraction of `hot` keywords among four slots.
pub fn regression_dataset(name: &str, hot: &[&str], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let spec = TaskSpec::new(name, TaskKind::Regression, vec![]).unwrap();
    let rows = (0..n)
        .map(|i| {
            let k = i % 5;
            (sentence(rng, &[(hot, k)], 8), Label::Score(k as f64 / 4.0))
        })
        .collect();
    dataset(spec, rows)
}

/// Head dropout for the toy models; 0.5 on a 32-wide head drowns the signal.
pub const TOY_HEAD_DROPOUT: f64 = 0.1;

pub fn tiny_model(train: &Dataset, hidden: usize, max_len: usize, seed: u64) -> TaskModel {
    let texts: Vec<&str> = train.texts().collect();
    let vocab = build_vocab(&texts, 1, &BasicTokenizer).unwrap();
    let encoder = EncoderConfig {
        num_layers: 2,
        hidden_dim: hidden,
        num_heads: 2,
        ff_dim: 2 * hidden,
        vocab_size: vocab.len(),
        max_positions: max_len,
        dropout_p: 0.1,
        pooler: true,
    };
    let head = HeadSpec { dropout_p: TOY_HEAD_DROPOUT, ..HeadSpec::for_task(&train.spec, hidden) };
    let config = ModelConfig { encoder, head, task: train.spec.clone(), max_len };
    TaskModel::new(config, vocab, seed).unwrap()
}

pub fn fast_train(max_len: usize, max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { lr: 3e-3, max_epochs, patience: 5, max_tokens_per_batch: 64, max_len, seed, ..Default::default() }
}

/// Response set whose disturbing label rides on distress and sadness words;
/// insult/threat words are sprinkled independently of the label.
pub fn response_set(n: usize, rng: &mut ChaCha8Rng) -> ResponseSet {
    let records = (0..n)
        .map(|i| {
            let disturbing = i % 5 < 2;
            let mut pools: Vec<(&[&str], usize)> = if disturbing {
                vec![(DISTRESS, 4), (SADNESS, 3)]
            } else {
                vec![(if i % 2 == 0 { SPORTS } else { COOKING }, 4), (JOY, 3)]
            };
            if rng.random_bool(0.5) {
                pools.push((INSULT, 2));
            }
            if rng.random_bool(0.5) {
                pools.push((THREAT, 2));
            }
            ResponseRecord { id: format!("resp-{i}"), text: sentence(rng, &pools, 40 + (i % 3) * 20), disturbing: u8::from(disturbing) }
        })
        .collect();
    ResponseSet { records }
}
