//! Whole-pipeline runs: synthesise, train, evaluate, cluster.

use std::path::Path;
use std::time::Instant;

use ldct_core::dataset::{load_dataset, save_dataset, synthesize};
use ldct_core::imaging::hu_window_normalize;
use ldct_core::interpret::{kmeans_cluster, render_label_map};
use ldct_core::metrics::{evaluate, evaluate_inputs};
use ldct_core::trainer::{load_denoiser, train, StepReport, TrainOutputs};
use ldct_core::{Checkpoint, MacConfig, MetricReport, SlicePair, TrainConfig, TrainState};

use super::training::small_config;

/// Files written by [`end_to_end`], in a fixed order.
pub const ARTIFACTS: [&str; 5] = [
    "train/final.ckpt",
    "train/metrics.ndjson",
    "report.json",
    "labels.png",
    "labels.json",
];

/// Runs the pipeline into `dir` through the files on disk, as the command
/// line would.
pub fn end_to_end(dir: &Path, seed: u64, steps: u64) {
    let data_dir = dir.join("data");
    save_dataset(&data_dir, &synthesize(6, 32, seed).unwrap()).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    let config = TrainConfig {
        max_steps: Some(steps),
        seed,
        ..small_config()
    };
    let train_dir = dir.join("train");
    let mut log = Vec::new();
    let mut state = TrainState::new(config, data.len()).unwrap();
    train(
        &mut state,
        &data,
        TrainOutputs {
            dir: Some(&train_dir),
            log: &mut log,
        },
    )
    .unwrap();
    std::fs::write(train_dir.join("metrics.ndjson"), &log).unwrap();

    let ck = Checkpoint::load(train_dir.join("final.ckpt")).unwrap();
    let (net, (lo, hi)) = load_denoiser(&ck).unwrap();
    let report = evaluate(&net, &data, (lo, hi), None).unwrap();
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .unwrap();

    let features = net
        .extract_features(&hu_window_normalize(&data[0].noisy, lo, hi).unwrap())
        .unwrap();
    let clustering = kmeans_cluster(&features, 5, seed, 100).unwrap();
    render_label_map(&clustering.labels, dir.join("labels.png")).unwrap();
    std::fs::write(
        dir.join("labels.json"),
        serde_json::to_string_pretty(&clustering.sidecar()).unwrap(),
    )
    .unwrap();
}

/// Bytes of every artifact of [`end_to_end`].
pub fn artifacts(dir: &Path) -> Vec<Vec<u8>> {
    ARTIFACTS
        .iter()
        .map(|name| std::fs::read(dir.join(name)).unwrap())
        .collect()
}

/// Two runs from one seed must agree byte for byte; returns the total size
/// compared.
pub fn determinism(steps: u64) -> usize {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    end_to_end(a.path(), 21, steps);
    end_to_end(b.path(), 21, steps);
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    for ((x, y), name) in fa.iter().zip(&fb).zip(ARTIFACTS) {
        assert!(!x.is_empty(), "{name} is empty");
        assert!(x == y, "{name} differs between runs");
    }
    fa.iter().map(Vec::len).sum()
}

/// Desk-scale set-up: 200 training phantoms, a disjoint validation set.
pub const TRAIN_PAIRS: usize = 200;
pub const VALIDATION_PAIRS: usize = 16;
pub const SIDE: usize = 64;
pub const TRAIN_SEED: u64 = 2024;
pub const VALIDATION_SEED: u64 = 99;

pub fn desk_data() -> (Vec<SlicePair>, Vec<SlicePair>) {
    (
        synthesize(TRAIN_PAIRS, SIDE, TRAIN_SEED).unwrap(),
        synthesize(VALIDATION_PAIRS, SIDE, VALIDATION_SEED).unwrap(),
    )
}

/// Training recipe for the desk-scale runs.
pub fn desk_config(steps: u64, contrastive: bool) -> TrainConfig {
    let weight = if contrastive { 1.0 } else { 0.0 };
    TrainConfig {
        epochs: 1000,
        max_steps: Some(steps),
        lr_max: DESK_LR,
        lr_min: DESK_LR / 100.0,
        seed: 7,
        global_weight: weight,
        local_weight: weight,
        mac: MacConfig {
            base_width: 16,
            ..MacConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub const DESK_LR: f64 = 1e-3;
pub const DESK_STEPS: u64 = 2000;

pub struct DeskRun {
    pub reports: Vec<StepReport>,
    pub input: MetricReport,
    pub output: MetricReport,
    pub seconds: f64,
}

pub fn desk_run(config: TrainConfig, train_set: &[SlicePair], validation: &[SlicePair]) -> DeskRun {
    let start = Instant::now();
    let mut state = TrainState::new(config.clone(), train_set.len()).unwrap();
    let mut log = std::io::sink();
    let reports = train(
        &mut state,
        train_set,
        TrainOutputs {
            dir: None,
            log: &mut log,
        },
    )
    .unwrap();
    let input = evaluate_inputs(validation, config.window()).unwrap();
    let output = evaluate(&state.esau, validation, config.window(), None).unwrap();
    DeskRun {
        reports,
        input,
        output,
        seconds: start.elapsed().as_secs_f64(),
    }
}
