//! `timeview`: dataset generation, training, the ablation matrix, robustness
//! comparison and prediction explanations from the command line.
//!
//! Exit codes: 0 success, 1 user error, 2 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use timeview_core::composition::{CompositionMap, Motif};
use timeview_core::config::ExperimentConfig;
use timeview_core::datasets::{generate, split, Dataset, DatasetName, DatasetSpec, Sample};
use timeview_core::encoding::{encode_channels, EncodingMode};
use timeview_core::model::{Mode, TimeviewDModel};
use timeview_core::robustness::{compare, probe_times, RobustnessError};
use timeview_core::training::{ablation_matrix, default_workers, train, RunConfig, TrainError, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "timeview", version, about = "Transparent trajectory forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into a directory.
    Generate {
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetName,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Observation noise sd (dataset default when absent).
        #[arg(long)]
        noise: Option<f64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model from a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's runs directory.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
    /// Train the dataset × mode × seed matrix and write the results table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Directory for cells.csv, table.csv and table.txt.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Compare perturbation sensitivity of a raw and a trend checkpoint.
    Robustness {
        #[arg(long)]
        raw_ckpt: PathBuf,
        #[arg(long)]
        trend_ckpt: PathBuf,
        /// Experiment config supplying the robustness settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Saved dataset to probe instead of regenerating the training one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Composition of a prediction and of its input channels.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Replace one input trend motif and show how the prediction changes.
    Whatif {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        channel: usize,
        #[arg(long)]
        interval: usize,
        #[arg(long, value_parser = parse_motif)]
        motif: Motif,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_dataset(s: &str) -> Result<DatasetName, String> {
    s.parse().map_err(|_| {
        let valid: Vec<&str> = DatasetName::ALL.iter().map(|d| d.as_str()).collect();
        format!("unknown dataset '{s}'; valid options: {}", valid.join(", "))
    })
}

fn parse_motif(s: &str) -> Result<Motif, String> {
    Motif::parse(s).ok_or_else(|| {
        let valid: Vec<&str> = Motif::ALL.iter().map(|m| m.name()).collect();
        format!("unknown motif '{s}'; valid options: {}", valid.join(", "))
    })
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<TrainError>().is_some_and(TrainError::is_numerical)
            || matches!(e.downcast_ref::<RobustnessError>(), Some(RobustnessError::NonFinite(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_numerical(&err) { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate {
            dataset,
            out,
            seed,
            n,
            noise,
            force,
        } => cmd_generate(dataset, &out, seed, n, noise, force),
        Command::Train { config, runs_dir } => cmd_train(&config, runs_dir),
        Command::Ablate { config, out, workers } => cmd_ablate(&config, &out, workers),
        Command::Robustness {
            raw_ckpt,
            trend_ckpt,
            config,
            data,
            out,
        } => cmd_robustness(&raw_ckpt, &trend_ckpt, config.as_deref(), data.as_deref(), out.as_deref()),
        Command::Explain { ckpt, sample, data } => cmd_explain(&ckpt, sample, data.as_deref()),
        Command::Whatif {
            ckpt,
            sample,
            channel,
            interval,
            motif,
            data,
        } => cmd_whatif(&ckpt, sample, channel, interval, motif, data.as_deref()),
    }
}

fn print_out(text: &str) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    print_out(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn cmd_generate(name: DatasetName, out: &Path, seed: u64, n: usize, noise: Option<f64>, force: bool) -> anyhow::Result<()> {
    if !force && out.is_dir() && fs::read_dir(out)?.next().is_some() {
        bail!("{} is not empty; pass --force to overwrite", out.display());
    }
    let mut spec = DatasetSpec::new(name, n, seed);
    if let Some(sd) = noise {
        spec = spec.with_noise(sd);
    }
    let data = generate(&spec)?;
    data.save(out)?;
    print_json(&json!({
        "dataset": name,
        "samples": data.samples.len(),
        "channels": data.spec.channels,
        "content_hash": data.content_hash(),
        "out": out,
    }))
}

fn config_base(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn cmd_train(config_path: &Path, runs_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let config = ExperimentConfig::from_file(config_path)?;
    let base = config_base(config_path);
    let dataset = config.dataset.resolve(base)?;
    let runs = runs_dir.unwrap_or_else(|| config.runs_dir(base));
    eprintln!("resolved config:\n{}", config.to_toml());
    let result = train(&dataset, &config.run_config(&dataset), Some(&runs))?;
    let dir = result.run_dir.expect("runs dir given");
    fs::write(dir.join("experiment.toml"), config.to_toml())?;
    print_json(&json!({
        "run_dir": dir,
        "metrics": result.metrics,
        "wall_seconds": result.wall_seconds,
    }))
}

fn cmd_ablate(config_path: &Path, out: &Path, workers: Option<usize>) -> anyhow::Result<()> {
    let config = ExperimentConfig::from_file(config_path)?;
    let base = config_base(config_path);
    let ab = &config.ablation;
    if ab.datasets.is_empty() || ab.modes.is_empty() || ab.seeds.is_empty() {
        bail!("ablation needs at least one dataset, mode and seed");
    }
    let datasets = ab
        .datasets
        .iter()
        .map(|&name| generate(&config.dataset.spec(name)))
        .collect::<Result<Vec<Dataset>, _>>()?;
    let workers = workers.or(ab.workers).unwrap_or_else(default_workers);
    eprintln!(
        "ablation: {} cells on {workers} workers\nresolved config:\n{}",
        datasets.len() * ab.modes.len() * ab.seeds.len(),
        config.to_toml()
    );
    let base_run = config.run_config(&datasets[0]);
    let runs = config.runs_dir(base);
    let table = ablation_matrix(&datasets, &ab.modes, &ab.seeds, &base_run, workers, Some(&runs))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("cells.csv"), table.cells_csv())?;
    fs::write(out.join("table.csv"), table.table_csv())?;
    fs::write(out.join("table.txt"), table.table_text())?;
    fs::write(out.join("experiment.toml"), config.to_toml())?;
    print_out(&table.table_text())?;
    Ok(())
}

/// A checkpoint together with the dataset and split it was trained on.
struct LoadedRun {
    model: TimeviewDModel,
    dataset: Dataset,
    test: Vec<Sample>,
}

fn load_run(ckpt: &Path, data: Option<&Path>) -> anyhow::Result<LoadedRun> {
    let model = TimeviewDModel::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let run: RunConfig = serde_json::from_str(
        &fs::read_to_string(dir.join("config.json")).with_context(|| format!("no config.json beside {}", ckpt.display()))?,
    )?;
    let dataset = match data {
        Some(d) => Dataset::load(d)?,
        None => generate(&run.dataset)?,
    };
    if dataset.content_hash() != model.card.dataset_hash {
        bail!(
            "dataset hash {} does not match the checkpoint's {}; pass --data with the training dataset",
            dataset.content_hash(),
            model.card.dataset_hash
        );
    }
    let parts = split(&dataset.samples, run.train.split, run.train.seed)?;
    Ok(LoadedRun {
        model,
        dataset,
        test: parts.test,
    })
}

fn cmd_robustness(
    raw_ckpt: &Path,
    trend_ckpt: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let settings = match config {
        Some(p) => ExperimentConfig::from_file(p)?.robustness,
        None => Default::default(),
    };
    let raw = load_run(raw_ckpt, data)?;
    let trend = TimeviewDModel::load(trend_ckpt).with_context(|| format!("loading {}", trend_ckpt.display()))?;
    if raw.model.mode() != Mode::Raw {
        bail!("--raw-ckpt holds a {} model", raw.model.mode());
    }
    if trend.mode() == Mode::Raw {
        bail!("--trend-ckpt holds a raw model");
    }
    let n = settings.samples.min(raw.test.len());
    let report = compare(&raw.model, &trend, &raw.test[..n], &settings)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(path) = out {
        fs::write(path, &text)?;
    }
    print_out(&text)?;
    eprintln!("{}", report.summary());
    Ok(())
}

fn find_sample(run: &LoadedRun, id: usize) -> anyhow::Result<&Sample> {
    run.dataset
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| anyhow!("no sample with id {id} (dataset has {})", run.dataset.samples.len()))
}

fn prediction_json(model: &TimeviewDModel, sample: &Sample, input: &timeview_core::encoding::EncodedInput) -> anyhow::Result<serde_json::Value> {
    let times = probe_times(model.card.horizon, 50);
    let values = model.predict_trajectory(&sample.static_features, input, &times)?;
    let composition = model.explain_prediction(&sample.static_features, input)?;
    Ok(json!({ "times": times, "values": values, "composition": composition }))
}

fn input_compositions(model: &TimeviewDModel, sample: &Sample) -> anyhow::Result<Vec<CompositionMap>> {
    let card = &model.card;
    let (_, enc) = encode_channels(&sample.dynamic, EncodingMode::TrendsProperties, &card.encoding, &card.stats.channels)?;
    Ok(enc.into_iter().map(|e| e.composition).collect())
}

fn cmd_explain(ckpt: &Path, id: usize, data: Option<&Path>) -> anyhow::Result<()> {
    let run = load_run(ckpt, data)?;
    let sample = find_sample(&run, id)?;
    let input = run.model.encode(&sample.dynamic)?;
    print_json(&json!({
        "sample": id,
        "mode": run.model.mode(),
        "prediction": prediction_json(&run.model, sample, &input)?,
        "inputs": input_compositions(&run.model, sample)?,
    }))
}

fn cmd_whatif(ckpt: &Path, id: usize, channel: usize, interval: usize, motif: Motif, data: Option<&Path>) -> anyhow::Result<()> {
    let run = load_run(ckpt, data)?;
    if run.model.mode() == Mode::Raw {
        bail!("what-if edits need a trend-encoded checkpoint; this one is raw");
    }
    let sample = find_sample(&run, id)?;
    let before = run.model.encode(&sample.dynamic)?;
    let mut after = before.clone();
    after.set_trend_motif(channel, interval, motif)?;
    let b = prediction_json(&run.model, sample, &before)?;
    let a = prediction_json(&run.model, sample, &after)?;
    let max_change = b["values"]
        .as_array()
        .zip(a["values"].as_array())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p.as_f64().unwrap_or(0.0) - q.as_f64().unwrap_or(0.0)).abs())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    let composition_changed = b["composition"]["motifs"] != a["composition"]["motifs"];
    print_json(&json!({
        "sample": id,
        "channel": channel,
        "interval": interval,
        "motif": motif,
        "before": b,
        "after": a,
        "max_abs_change": max_change,
        "composition_changed": composition_changed,
    }))
}
