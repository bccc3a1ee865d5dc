//! Two-phase training: manifold reconstruction on the chart parameters, then
//! maximum likelihood on the base flow with the charts frozen.

use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atlas::{MultiChartFlow, BASE_GROUPS, CHART_GROUPS};
use crate::checkpoint::{save_checkpoint, Checkpoint, MetricRow};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::density::log_prob_latent;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamGroup, ParamStore};
use crate::optim::{clip_gradients, scheduled_lr, Adam};
use crate::tape::{Tape, Var};

/// Consecutive non-finite losses tolerated before a phase aborts.
pub const MAX_NON_FINITE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Recon,
    Ml,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Recon => "recon",
            Phase::Ml => "ml",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconMetrics {
    pub mse: f64,
    pub reg: f64,
}

/// Reconstruction loss for a batch through the given charts:
/// `mean ‖x - x̂‖² + λ mean (log|det J_φ(x)| + log|det J_φ⁻¹(u)|)²`.
pub fn recon_loss_on_tape<'t>(
    model: &MultiChartFlow,
    bound: &Bound<'t, '_>,
    x: &Array2<f64>,
    charts: &[usize],
    reg_weight: f64,
) -> Result<(Var<'t>, ReconMetrics)> {
    let tape = bound.tape();
    let xv = tape.constant(x.clone());
    let (z, ld_fwd) = model.chart_forward_on_tape(bound, xv, charts)?;
    let u = z.cols(0..model.latent_dim());
    let (x_hat, ld_inv) = model.decode_on_tape(bound, u, charts)?;
    let mse = (x_hat - xv).square().sum_cols().mean();
    let reg = (ld_fwd + ld_inv).square().mean();
    let loss = mse + reg * reg_weight;
    let metrics = ReconMetrics { mse: mse.value()[[0, 0]], reg: reg.value()[[0, 0]] };
    Ok((loss, metrics))
}

/// Reconstruction loss with encode-selected charts, without gradients.
pub fn recon_loss(model: &MultiChartFlow, x: &Array2<f64>, reg_weight: f64) -> Result<(f64, ReconMetrics)> {
    let charts = model.encode(x)?.chart;
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.store);
    let (loss, m) = recon_loss_on_tape(model, &bound, x, &charts, reg_weight)?;
    let l = loss.value()[[0, 0]];
    Ok((l, m))
}

/// `-mean log p(u)` through the base flow.
pub fn ml_loss_on_tape<'t>(model: &MultiChartFlow, bound: &Bound<'t, '_>, u: &Array2<f64>) -> Result<Var<'t>> {
    let d = u.ncols() as f64;
    let uv = bound.tape().constant(u.clone());
    let (z, ld) = model.base_flow().forward(bound, uv, None)?;
    let log_p = z.square().sum_cols() * -0.5 + ld - 0.5 * d * (2.0 * PI).ln();
    Ok(-log_p.mean())
}

pub fn ml_loss(model: &MultiChartFlow, u: &Array2<f64>) -> Result<f64> {
    Ok(-log_prob_latent(model, u)?.mean().unwrap_or(f64::NAN))
}

/// Where and how to write checkpoints during training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    pub best_val_recon: Option<f64>,
    pub best_val_nll: Option<f64>,
    pub metrics: Vec<MetricRow>,
    pub rng: ChaCha8Rng,
    pub optimizer: Option<Adam>,
    pub checkpoint: Option<PathBuf>,
}

/// Mean squared reconstruction error (no gradients).
pub fn val_recon_error(model: &MultiChartFlow, x: &Array2<f64>) -> Result<f64> {
    let x_hat = model.reconstruct(x)?;
    Ok((x - &x_hat).mapv(|v| v * v).sum_axis(Axis(1)).mean().unwrap_or(f64::NAN))
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Singular { .. })
}

struct PhaseRunner<'a> {
    model: &'a mut MultiChartFlow,
    config: &'a TrainConfig,
    sink: Option<&'a CheckpointSink>,
    state: TrainState,
}

impl PhaseRunner<'_> {
    fn save(&self) -> Result<()> {
        if let Some(sink) = self.sink {
            save_checkpoint(
                &sink.dir,
                &Checkpoint {
                    config: &sink.experiment,
                    model: self.model,
                    optimizer: self.state.optimizer.as_ref(),
                    rng: &self.state.rng,
                    metrics: &self.state.metrics,
                },
            )?;
        }
        Ok(())
    }

    /// Generic epoch loop. `step` computes the loss and gradients for a batch
    /// of row indices; `validate` returns the validation metric.
    fn run<S, V>(&mut self, phase: Phase, n_rows: usize, groups: &[ParamGroup], mut step: S, validate: V) -> Result<()>
    where
        S: FnMut(&MultiChartFlow, &[usize]) -> Result<(f64, Vec<Option<Array2<f64>>>)>,
        V: Fn(&MultiChartFlow) -> Result<f64>,
    {
        let epochs = match phase {
            Phase::Recon => self.config.recon_epochs,
            Phase::Ml => self.config.ml_epochs,
        };
        let clip = match phase {
            Phase::Recon => self.config.recon_clip,
            Phase::Ml => self.config.ml_clip,
        };
        self.state.phase = phase;
        self.state.epoch = 0;
        if epochs == 0 || n_rows == 0 {
            return Ok(());
        }
        let mut opt = Adam::new(self.config.optimizer, self.config.weight_decay, self.model.store.len());
        let mut best: Option<(f64, ParamStore)> = None;
        let mut since_best = 0usize;
        let mut bad = 0usize;
        let mut order: Vec<usize> = (0..n_rows).collect();
        for epoch in 0..epochs {
            let lr = scheduled_lr(self.config.learning_rate, self.config.lr_schedule, epoch, epochs);
            order.shuffle(&mut self.state.rng);
            let mut loss_sum = 0.0;
            let mut loss_n = 0usize;
            for batch in order.chunks(self.config.batch_size) {
                let outcome = match step(self.model, batch) {
                    Ok(r) => Ok(r),
                    Err(e) if is_numeric_failure(&e) => Ok((f64::NAN, Vec::new())),
                    Err(e) => Err(e),
                }?;
                let (loss, mut grads) = outcome;
                let grads_finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
                if !loss.is_finite() || !grads_finite {
                    bad += 1;
                    log::warn!("{} epoch {epoch}: non-finite loss ({bad} in a row)", phase.name());
                    if bad >= MAX_NON_FINITE {
                        if let Some((_, store)) = &best {
                            self.model.store.copy_values_from(store);
                        }
                        self.state.optimizer = Some(opt);
                        self.save()?;
                        return Err(Error::TrainingDiverged { phase: phase.name(), epoch, consecutive: bad });
                    }
                    continue;
                }
                bad = 0;
                if let Some(max) = clip {
                    clip_gradients(&mut grads, max);
                }
                for (g, p) in grads.iter_mut().zip(self.model.store.params()) {
                    if !groups.contains(&p.group) {
                        *g = None;
                    }
                }
                opt.update(&mut self.model.store, &grads, lr)?;
                loss_sum += loss;
                loss_n += 1;
            }
            let train_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
            let val = validate(self.model)?;
            self.state.epoch = epoch + 1;
            self.state.metrics.push(MetricRow {
                epoch: epoch + 1,
                phase: phase.name().to_string(),
                train_loss,
                val_metric: val,
            });
            log::info!("{} epoch {}/{epochs}: train {train_loss:.5} val {val:.5}", phase.name(), epoch + 1);
            let improved = val.is_finite() && best.as_ref().is_none_or(|(b, _)| val < *b);
            if improved {
                best = Some((val, self.model.store.clone()));
                since_best = 0;
                match phase {
                    Phase::Recon => self.state.best_val_recon = Some(val),
                    Phase::Ml => self.state.best_val_nll = Some(val),
                }
                self.state.optimizer = Some(opt.clone());
                self.save()?;
            } else {
                since_best += 1;
                if self.config.patience.is_some_and(|p| since_best >= p) {
                    log::info!("{}: no improvement for {since_best} epochs, stopping", phase.name());
                    break;
                }
            }
        }
        if let Some((_, store)) = best {
            self.model.store.copy_values_from(&store);
        }
        self.state.optimizer = Some(opt);
        Ok(())
    }
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Gradients of a reconstruction batch with respect to the chart groups.
pub fn recon_step(
    model: &MultiChartFlow,
    x: &Array2<f64>,
    reg_weight: f64,
) -> Result<(f64, Vec<Option<Array2<f64>>>, ReconMetrics)> {
    let charts = model.encode(x)?.chart;
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.store, &CHART_GROUPS);
    let (loss, metrics) = recon_loss_on_tape(model, &bound, x, &charts, reg_weight)?;
    let value = loss.value()[[0, 0]];
    if !value.is_finite() {
        return Ok((value, Vec::new(), metrics));
    }
    let grads = tape.backward(loss, Array2::ones((1, 1)));
    Ok((value, bound.param_grads(&grads), metrics))
}

/// Gradients of the maximum-likelihood loss with respect to the base flow.
pub fn ml_step(model: &MultiChartFlow, u: &Array2<f64>) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.store, &BASE_GROUPS);
    let loss = ml_loss_on_tape(model, &bound, u)?;
    let value = loss.value()[[0, 0]];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss, Array2::ones((1, 1)));
    Ok((value, bound.param_grads(&grads)))
}

/// Runs the reconstruction phase (chart flow and embeddings) and then the
/// maximum-likelihood phase (base flow only). The best validation parameters
/// of each phase are restored when it ends.
pub fn train(
    model: &mut MultiChartFlow,
    train_x: &Array2<f64>,
    val_x: &Array2<f64>,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainState> {
    if train_x.ncols() != model.ambient_dim() || val_x.ncols() != model.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: model.ambient_dim(), got: train_x.ncols() });
    }
    let state = TrainState {
        phase: Phase::Recon,
        epoch: 0,
        best_val_recon: None,
        best_val_nll: None,
        metrics: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        optimizer: None,
        checkpoint: sink.map(|s| s.dir.clone()),
    };
    let mut runner = PhaseRunner { model, config, sink, state };
    let reg = config.reg_weight;
    runner.run(
        Phase::Recon,
        train_x.nrows(),
        &CHART_GROUPS,
        |m, rows| recon_step(m, &gather(train_x, rows), reg).map(|(l, g, _)| (l, g)),
        |m| val_recon_error(m, val_x),
    )?;
    if config.ml_epochs > 0 {
        let u_train = runner.model.encode(train_x)?.u;
        let u_val = runner.model.encode(val_x)?.u;
        runner.run(
            Phase::Ml,
            u_train.nrows(),
            &BASE_GROUPS,
            |m, rows| ml_step(m, &gather(&u_train, rows)),
            |m| ml_loss(m, &u_val),
        )?;
    }
    if config.recon_epochs == 0 && config.ml_epochs == 0 {
        runner.save()?;
    }
    Ok(runner.state)
}

/// Per-column mean and standard deviation, used to standardize inputs.
pub fn column_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::OutputInit;
    use ndarray::array;

    #[test]
    fn identity_model_losses() {
        let m = MultiChartFlow::new(&ModelConfig::minimal(3, 2, 2), None, OutputInit::Zero, 0).unwrap();
        let x = array![[0.5, -1.0, 0.0], [2.0, 0.1, 0.0]];
        let (loss, metrics) = recon_loss(&m, &x, 0.5).unwrap();
        assert_eq!((loss, metrics.mse, metrics.reg), (0.0, 0.0, 0.0));
        let x = array![[0.0, 0.0, 1.0]];
        let (loss, _) = recon_loss(&m, &x, 0.0).unwrap();
        assert_eq!(loss, 1.0);
        let u = Array2::zeros((3, 2));
        assert!((ml_loss(&m, &u).unwrap() - (2.0 * PI).ln()).abs() < 1e-12);
    }
}
