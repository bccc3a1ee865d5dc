//! Experiment configuration: dataset, model, training and evaluation blocks,
//! the shipped presets and the config hash stored in checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::DatasetSource;
use crate::density::DensityMode;
use crate::error::{Error, Result};
use crate::flows::LinearKind;
use crate::nn::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub seed: u64,
    /// Synthetic sources only; geo sources split by their train fraction.
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_val: usize,
    pub source: DatasetSource,
}

/// One row of an architecture table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub charts: usize,
    /// Dimension of the chart index embedding.
    pub index_dim: usize,
    pub chart_layers: usize,
    pub base_layers: usize,
    pub chart_bins: usize,
    pub base_bins: usize,
    /// Splines act on `[-spline_range, spline_range]`.
    pub spline_range: f64,
    pub linear: LinearKind,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_blocks: Option<usize>,
    /// Standardize inputs with training-set mean and scale before the chart flow.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing to zero over each phase.
    Cosine,
    Step { decay_every: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub recon_epochs: usize,
    pub ml_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ml_clip: Option<f64>,
    pub reg_weight: f64,
    pub seed: u64,
    /// Stop a phase after this many epochs without validation improvement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bandwidth: f64,
    pub grid_lat: usize,
    pub grid_lon: usize,
    pub modes: Vec<DensityMode>,
    pub n_samples: usize,
    pub hutchinson_probes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// A small identity-initializable architecture for tests and examples.
    pub fn minimal(ambient_dim: usize, latent_dim: usize, charts: usize) -> Self {
        Self {
            ambient_dim,
            latent_dim,
            charts,
            index_dim: 2,
            chart_layers: 2,
            base_layers: 2,
            chart_bins: 6,
            base_bins: 6,
            spline_range: 4.0,
            linear: LinearKind::Permutation,
            hidden_layers: 2,
            hidden_units: 16,
            activation: Activation::Relu,
            residual_blocks: None,
            standardize: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        self.collect_errors(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn collect_errors(&self, errs: &mut Vec<String>) {
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(format!("model.{msg}"));
            }
        };
        need(self.latent_dim >= 1, "latent_dim must be at least 1");
        need(self.latent_dim < self.ambient_dim, "latent_dim must be smaller than ambient_dim");
        need(self.charts >= 1, "charts must be at least 1");
        need(self.chart_layers >= 1, "chart_layers must be at least 1");
        need(self.chart_bins >= 1 && self.base_bins >= 1, "chart_bins and base_bins must be at least 1");
        need(self.spline_range.is_finite() && self.spline_range > 0.0, "spline_range must be positive");
        need(self.hidden_units >= 1, "hidden_units must be at least 1");
        need(self.residual_blocks != Some(0), "residual_blocks must be at least 1 when set");
    }

    /// Hex SHA-256 of the serialized model block.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl TrainConfig {
    fn collect_errors(&self, errs: &mut Vec<String>) {
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(format!("train.{msg}"));
            }
        };
        need(self.batch_size >= 1, "batch_size must be at least 1");
        need(self.learning_rate.is_finite() && self.learning_rate > 0.0, "learning_rate must be positive");
        need(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be non-negative");
        need(self.reg_weight.is_finite() && self.reg_weight >= 0.0, "reg_weight must be non-negative");
        for (name, clip) in [("recon_clip", self.recon_clip), ("ml_clip", self.ml_clip)] {
            if let Some(c) = clip {
                need(c.is_finite() && c > 0.0, &format!("{name} must be positive when set"));
            }
        }
        if let LrSchedule::Step { decay_every, factor } = self.lr_schedule {
            need(decay_every >= 1, "lr_schedule.decay_every must be at least 1");
            need(factor.is_finite() && factor > 0.0, "lr_schedule.factor must be positive");
        }
        need(self.patience != Some(0), "patience must be at least 1 when set");
    }
}

impl EvalConfig {
    fn collect_errors(&self, errs: &mut Vec<String>) {
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(format!("eval.{msg}"));
            }
        };
        need(self.bandwidth.is_finite() && self.bandwidth > 0.0, "bandwidth must be positive");
        need(self.grid_lat >= 1 && self.grid_lon >= 1, "grid sizes must be at least 1");
        need(self.hutchinson_probes >= 1, "hutchinson_probes must be at least 1");
    }
}

impl DatasetConfig {
    fn collect_errors(&self, errs: &mut Vec<String>) {
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(format!("dataset.{msg}"));
            }
        };
        match &self.source {
            DatasetSource::GeoCsv { train_fraction, lat_column, lon_column, .. } => {
                need(*train_fraction > 0.0 && *train_fraction < 1.0, "source.train_fraction must lie in (0, 1)".into());
                need(!lat_column.is_empty() && !lon_column.is_empty(), "source column names must be non-empty".into());
                need(
                    self.n_train == 0 && self.n_val == 0,
                    "n_train/n_val are derived from the train fraction for geo sources".into(),
                );
            }
            other => {
                need(self.n_train >= 1 && self.n_val >= 1, "n_train and n_val must be at least 1".into());
                match other {
                    DatasetSource::WrappedNormalsSphere { scale } => {
                        need(scale.is_finite() && *scale >= 0.0, "source.scale must be non-negative".into())
                    }
                    DatasetSource::FiveGaussiansHyperbolic { distance, scale } => need(
                        distance.is_finite() && scale.is_finite() && *scale >= 0.0,
                        "source distance and scale must be finite".into(),
                    ),
                    DatasetSource::VmfSphere { modes, kappas } => need(
                        !modes.is_empty() && modes.len() == kappas.len() && kappas.iter().all(|k| *k >= 0.0),
                        "source needs one non-negative kappa per mode".into(),
                    ),
                    DatasetSource::Lorenz { trajectories, t_span } => need(
                        *trajectories >= 1 && t_span.is_finite() && *t_span > 0.0,
                        "source needs at least one trajectory and a positive t_span".into(),
                    ),
                    _ => {}
                }
            }
        }
    }
}

impl ExperimentConfig {
    /// Checks every block and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.dataset.collect_errors(&mut errs);
        self.model.collect_errors(&mut errs);
        self.train.collect_errors(&mut errs);
        self.eval.collect_errors(&mut errs);
        if self.model.ambient_dim != 3 {
            errs.push(format!(
                "model.ambient_dim is {} but every dataset source produces 3-dimensional points",
                self.model.ambient_dim
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// Names of the shipped presets; `<name>_desk` variants use reduced schedules.
        pub const PRESET_NAMES: &[&str] = &[$($name),*];

        fn preset_text(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!(concat!("../presets/", $name, ".toml"))),)*
                _ => None,
            }
        }
    };
}

presets!(
    "checkerboard_s2",
    "checkerboard_s2_desk",
    "wrapped_normals_s2",
    "wrapped_normals_s2_desk",
    "five_gaussians_h2",
    "five_gaussians_h2_desk",
    "checkerboard_h2",
    "checkerboard_h2_desk",
    "earthquakes",
    "earthquakes_desk",
    "fires",
    "fires_desk",
    "lorenz",
    "lorenz_desk",
);

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name).ok_or_else(|| {
        Error::InvalidInput(format!("unknown preset `{name}` (available: {})", PRESET_NAMES.join(", ")))
    })?;
    ExperimentConfig::from_toml(text)
}
