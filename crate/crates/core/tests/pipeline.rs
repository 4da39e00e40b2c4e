use std::fs;

use timeview_core::datasets::{generate, split, Dataset, DatasetName, DatasetSpec, DEFAULT_SPLIT};
use timeview_core::model::{Mode, ModelConfig, TimeviewDModel};
use timeview_core::robustness::{compare, RobustnessConfig};
use timeview_core::training::{train, RunConfig, TrainConfig};

fn config(name: DatasetName, mode: Mode) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::new(name, 40, 3),
        train: TrainConfig {
            mode,
            epochs: 4,
            batch_size: 16,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            static_hidden: 8,
            recurrent_hidden: 8,
            ..ModelConfig::default()
        },
        encoding: Default::default(),
    }
}

#[test]
fn dataset_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&DatasetSpec::new(DatasetName::Beta, 30, 7)).unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.content_hash(), data.content_hash());
    assert_eq!(back.samples, data.samples);
}

#[test]
fn trained_checkpoint_reloads_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(DatasetName::Tumor, Mode::TrendsPropertiesCl);
    let data = generate(&cfg.dataset).unwrap();
    let run = train(&data, &cfg, Some(dir.path())).unwrap();
    let run_dir = run.run_dir.clone().unwrap();
    assert!(run_dir.ends_with(cfg.hash()));
    assert_eq!(fs::read_to_string(run_dir.join("log.csv")).unwrap().lines().count(), 1 + 2 * run.metrics.epochs_run);

    let loaded = TimeviewDModel::load(&run_dir.join("checkpoint.bin")).unwrap();
    let test = split(&data.samples, DEFAULT_SPLIT, cfg.train.seed).unwrap().test;
    for s in &test {
        assert_eq!(loaded.predict_sample(s).unwrap(), run.model.predict_sample(s).unwrap());
    }
}

#[test]
fn same_seed_same_metrics() {
    let cfg = config(DatasetName::Sine, Mode::Trends);
    let data = generate(&cfg.dataset).unwrap();
    let a = train(&data, &cfg, None).unwrap();
    let b = train(&data, &cfg, None).unwrap();
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
}

#[test]
fn sensitivity_report_on_trained_pair() {
    let raw_cfg = config(DatasetName::Tumor, Mode::Raw);
    let data = generate(&raw_cfg.dataset).unwrap();
    let raw = train(&data, &raw_cfg, None).unwrap().model;
    let trend = train(&data, &config(DatasetName::Tumor, Mode::TrendsProperties), None).unwrap().model;
    let test = split(&data.samples, DEFAULT_SPLIT, raw_cfg.train.seed).unwrap().test;
    let cfg = RobustnessConfig {
        draws: 4,
        samples: 3,
        ..RobustnessConfig::default()
    };
    let report = compare(&raw, &trend, &test, &cfg).unwrap();
    assert_eq!(report.raw_per_sample.len(), 3);
    assert!(report.r_raw > 0.0 && report.r_trend.is_finite());
    assert!((0.0..=1.0).contains(&report.boundary_flip_frequency));
}
