use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn timeview(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timeview"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn train(dir: &Path, name: &str, mode: &str) -> PathBuf {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(
        &cfg,
        format!("[dataset]\nname = \"d-tumor\"\nn_samples = 40\n[train]\nmode = \"{mode}\"\nepochs = 3\n[model]\nstatic_hidden = 8\nrecurrent_hidden = 8\n"),
    )
    .unwrap();
    let out = json(&timeview(&["train", "--config", cfg.to_str().unwrap()], dir));
    dir.join(out["run_dir"].as_str().unwrap()).join("checkpoint.bin")
}

#[test]
fn generate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--dataset", "d-sine", "--seed", "0", "--n", "100", "--out"];
    let a = json(&timeview(&[&args[..], &["a"]].concat(), dir.path()));
    let b = json(&timeview(&[&args[..], &["b"]].concat(), dir.path()));
    assert_eq!(a["content_hash"], b["content_hash"]);
    for f in ["meta.json", "samples.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn generate_refuses_non_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--dataset", "d-beta", "--n", "20", "--out", "d"];
    json(&timeview(&args, dir.path()));
    let again = timeview(&args, dir.path());
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    json(&timeview(&[&args[..], &["--force"]].concat(), dir.path()));
}

#[test]
fn tumor_has_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let out = json(&timeview(&["generate", "--dataset", "d-tumor", "--n", "10", "--out", "t"], dir.path()));
    assert_eq!(out["channels"], 3);
    let csv = fs::read_to_string(dir.path().join("t/samples.csv")).unwrap();
    let mut channels: Vec<&str> = csv
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == "dynamic").then_some(f[2])
        })
        .collect();
    channels.sort();
    channels.dedup();
    assert_eq!(channels, ["0", "1", "2"]);
}

#[test]
fn invalid_dataset_names_the_options() {
    let dir = tempfile::tempdir().unwrap();
    let out = timeview(&["generate", "--dataset", "d-cosine", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d-sine") && err.contains("d-beta") && err.contains("d-tumor"), "{err}");
}

#[test]
fn unknown_config_key_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = timeview(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("nan.toml"),
        "[dataset]\nname = \"d-sine\"\nn_samples = 30\n[train]\nmode = \"raw\"\nepochs = 50\nlr = 1e300\n",
    )
    .unwrap();
    let out = timeview(&["train", "--config", "nan.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_explain_whatif_robustness() {
    let dir = tempfile::tempdir().unwrap();
    let raw = train(dir.path(), "raw", "raw");
    let trend = train(dir.path(), "trend", "trends+properties");
    let run_dir = trend.parent().unwrap();
    for f in ["model_card.json", "log.csv", "metrics.json", "config.json", "experiment.toml"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let ckpt = trend.to_str().unwrap();
    let explained = json(&timeview(&["explain", "--ckpt", ckpt, "--sample", "0"], dir.path()));
    assert_eq!(explained["inputs"].as_array().unwrap().len(), 3);
    assert!(!explained["prediction"]["composition"]["motifs"].as_array().unwrap().is_empty());

    // Re-applying the motif already at interval 0 is a no-op.
    let kind = explained["inputs"][0]["motifs"][0]["kind"].as_str().unwrap().to_string();
    let args = ["whatif", "--ckpt", ckpt, "--sample", "0", "--channel", "0", "--interval", "0", "--motif", &kind];
    let same = json(&timeview(&args, dir.path()));
    assert_eq!(same["before"], same["after"]);
    assert_eq!(same["max_abs_change"], 0.0);

    let bad = timeview(&["whatif", "--ckpt", ckpt, "--sample", "0", "--channel", "0", "--interval", "999", "--motif", "constant"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let raw_edit = timeview(
        &["whatif", "--ckpt", raw.to_str().unwrap(), "--sample", "0", "--channel", "0", "--interval", "0", "--motif", "constant"],
        dir.path(),
    );
    assert_eq!(raw_edit.status.code(), Some(1));

    fs::write(dir.path().join("rob.toml"), "[robustness]\ndraws = 3\nsamples = 4\n").unwrap();
    let report = json(&timeview(
        &["robustness", "--raw-ckpt", raw.to_str().unwrap(), "--trend-ckpt", ckpt, "--config", "rob.toml"],
        dir.path(),
    ));
    assert_eq!(report["num_draws"], 3);
    assert_eq!(report["raw_per_sample"].as_array().unwrap().len(), 4);
    assert!(report["r_raw"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("ab.toml"),
        "[dataset]\nn_samples = 24\n[train]\nepochs = 2\n[model]\nstatic_hidden = 8\nrecurrent_hidden = 8\n[ablation]\ndatasets = [\"d-sine\", \"d-beta\"]\nmodes = [\"raw\", \"trends\"]\nseeds = [0, 1]\n",
    )
    .unwrap();
    let out = timeview(&["ablate", "--config", "ab.toml", "--out", "ab", "--workers", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("TIMEVIEW + Raw Time Series") && table.contains("D-Sine"));
    let cells = fs::read_to_string(dir.path().join("ab/cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 2 * 2);
    assert!(dir.path().join("ab/table.csv").exists());
}
