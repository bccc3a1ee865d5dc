//! Command implementations behind the `mcf` binary.

pub mod plot;

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use multichart::atlas::MultiChartFlow;
use multichart::checkpoint::{load_checkpoint, LoadedCheckpoint};
use multichart::config::{preset, ExperimentConfig};
use multichart::datasets::{build_dataset, load_dataset, save_dataset, write_points_csv, Dataset};
use multichart::density::DensityMode;
use multichart::eval::{evaluate, EvalReport};
use multichart::training::{train, CheckpointSink, TrainState};

/// Loads a config from a TOML file, or from a shipped preset when `spec` is
/// not an existing path.
pub fn resolve_config(spec: &str) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()));
    }
    preset(spec).with_context(|| format!("`{spec}` is neither a config file nor a preset"))
}

pub fn generate(config: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let ds = &config.dataset;
    let dataset = build_dataset(&ds.name, &ds.source, ds.n_train, ds.n_val, ds.seed)?;
    if dataset.meta.dropped_rows > 0 {
        log::warn!("dropped {} malformed rows", dataset.meta.dropped_rows);
    }
    save_dataset(&dataset, out)?;
    log::info!(
        "wrote {} train / {} val points to {}",
        dataset.meta.n_train,
        dataset.meta.n_val,
        out.display()
    );
    Ok(dataset)
}

/// Trains on the dataset in `data`, or on a freshly generated one when no
/// directory is given, and writes the checkpoint to `out`.
pub fn train_cmd(config: &ExperimentConfig, data: Option<&Path>, out: &Path) -> Result<TrainState> {
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let ds = &config.dataset;
            build_dataset(&ds.name, &ds.source, ds.n_train, ds.n_val, ds.seed)?
        }
    };
    if dataset.ambient_dim() != config.model.ambient_dim {
        bail!(
            "dataset has {} columns but the model expects {}",
            dataset.ambient_dim(),
            config.model.ambient_dim
        );
    }
    let mut model = MultiChartFlow::for_data(&config.model, &dataset.train, config.train.seed)?;
    let sink = CheckpointSink { dir: out.to_path_buf(), experiment: config.clone() };
    let state = train(&mut model, &dataset.train, &dataset.val, &config.train, Some(&sink))?;
    log::info!("checkpoint written to {}", out.display());
    Ok(state)
}

pub fn open_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Draws `n` ambient samples and writes them as CSV.
pub fn sample_cmd(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let ckpt = open_checkpoint(checkpoint)?;
    let x = ckpt.model.sample(n, seed)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_points_csv(file, &x)?;
    Ok(())
}

/// Evaluates on the validation split of `data`. `modes` overrides the
/// config's density modes when non-empty.
pub fn eval_cmd(checkpoint: &Path, data: &Path, modes: &[DensityMode], seed: Option<u64>) -> Result<EvalReport> {
    let ckpt = open_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let mut eval_cfg = ckpt.config.eval.clone();
    if !modes.is_empty() {
        eval_cfg.modes = modes.to_vec();
    }
    if let Some(s) = seed {
        eval_cfg.seed = s;
    }
    let on_sphere = ckpt.config.dataset.source.is_sphere();
    Ok(evaluate(&ckpt.model, &dataset.val, &eval_cfg, on_sphere)?)
}

pub fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}
