//! The multi-chart model: frozen latent chart centers, a chart flow on the
//! ambient space conditioned on a learned per-chart embedding, and a base flow
//! on the latent space.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flows::{Flow, FlowSpec, Layer, Standardize};
use crate::nn::{Bound, ConditionerSpec, OutputInit, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Rows per parallel work item for batched evaluation.
pub const CHUNK_ROWS: usize = 256;

/// Chart-map parameter groups (trained in the reconstruction phase).
pub const CHART_GROUPS: [ParamGroup; 2] = [ParamGroup::ChartFlow, ParamGroup::Embeddings];
pub const BASE_GROUPS: [ParamGroup; 1] = [ParamGroup::BaseFlow];

/// Result of mapping ambient points into the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub u: Array2<f64>,
    pub chart: Vec<usize>,
    /// Norm of the discarded `D - d` padded coordinates.
    pub residual: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiChartFlow {
    pub store: ParamStore,
    config: ModelConfig,
    centers: ParamId,
    embeddings: ParamId,
    chart_flow: Flow,
    base_flow: Flow,
}

/// Splits `0..n` into chunks, evaluates `f` on each in parallel and stacks the
/// row outputs in order.
pub(crate) fn par_rows<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Result<Vec<T>> + Sync + Send,
{
    let chunks: Vec<_> = (0..n).step_by(CHUNK_ROWS.max(1)).map(|a| a..(a + CHUNK_ROWS).min(n)).collect();
    let parts: Vec<Vec<T>> = chunks.into_par_iter().map(f).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub(crate) fn stack_rows(rows: Vec<Array1<f64>>, cols: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.to_vec()).collect();
    Array2::from_shape_vec((n, cols), flat).expect("consistent rows")
}

impl MultiChartFlow {
    /// Builds a model whose flows start at the identity (`OutputInit::Zero`) or
    /// at a random perturbation of it. `standardize` prepends a fixed affine
    /// layer `(x - shift) / scale` to the chart flow.
    pub fn new(
        config: &ModelConfig,
        standardize: Option<(&[f64], &[f64])>,
        init: OutputInit,
        seed: u64,
    ) -> Result<Self> {
        config.validate().map_err(Error::InvalidConfig)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (big_d, d, n, d_a) = (config.ambient_dim, config.latent_dim, config.charts, config.index_dim);
        let centers = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let centers = store.register("atlas.centers", ParamGroup::Fixed, centers);
        let emb = Array2::from_shape_simple_fn((n, d_a), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z
        });
        let embeddings = store.register("atlas.embeddings", ParamGroup::Embeddings, emb);
        let conditioner = |context_dim| ConditionerSpec {
            hidden_layers: config.hidden_layers,
            hidden_units: config.hidden_units,
            activation: config.activation,
            residual_blocks: config.residual_blocks,
            context_dim,
        };
        let chart_spec = FlowSpec {
            dim: big_d,
            layers: config.chart_layers,
            bins: config.chart_bins,
            range_bound: config.spline_range,
            linear: config.linear,
            conditioner: conditioner(d_a),
        };
        let mut chart_flow = Flow::build(&chart_spec, &mut store, "chart", ParamGroup::ChartFlow, init, &mut rng)?;
        if let Some((shift, scale)) = standardize {
            if shift.len() != big_d {
                return Err(Error::DimensionMismatch { expected: big_d, got: shift.len() });
            }
            let layer = Standardize::new(&mut store, "chart.standardize", shift, scale)?;
            chart_flow.prepend(Layer::Standardize(layer));
        }
        let base_spec = FlowSpec {
            dim: d,
            layers: config.base_layers,
            bins: config.base_bins,
            range_bound: config.spline_range,
            linear: config.linear,
            conditioner: conditioner(0),
        };
        let base_flow = Flow::build(&base_spec, &mut store, "base", ParamGroup::BaseFlow, init, &mut rng)?;
        Ok(Self {
            store,
            config: config.clone(),
            centers,
            embeddings,
            chart_flow,
            base_flow,
        })
    }

    /// Identity-initialized model; when the config asks for standardization the
    /// shift and scale are the training data's column means and deviations.
    pub fn for_data(config: &ModelConfig, train: &Array2<f64>, seed: u64) -> Result<Self> {
        if config.standardize {
            let (mean, std) = crate::training::column_stats(train);
            Self::new(config, Some((mean.as_slice().expect("contiguous"), std.as_slice().expect("contiguous"))), OutputInit::Zero, seed)
        } else {
            Self::new(config, None, OutputInit::Zero, seed)
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ambient_dim(&self) -> usize {
        self.config.ambient_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn charts(&self) -> usize {
        self.config.charts
    }

    pub fn centers(&self) -> &Array2<f64> {
        self.store.get(self.centers)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        self.store.get(self.embeddings)
    }

    pub fn chart_flow(&self) -> &Flow {
        &self.chart_flow
    }

    pub fn base_flow(&self) -> &Flow {
        &self.base_flow
    }

    /// Overwrites the chart centers (they are otherwise fixed at construction).
    pub fn set_centers(&mut self, centers: Array2<f64>) -> Result<()> {
        let cur = self.store.get(self.centers);
        if centers.dim() != cur.dim() {
            return Err(Error::DimensionMismatch { expected: cur.nrows(), got: centers.nrows() });
        }
        *self.store.get_mut(self.centers) = centers;
        Ok(())
    }

    pub fn set_embeddings(&mut self, embeddings: Array2<f64>) -> Result<()> {
        let cur = self.store.get(self.embeddings);
        if embeddings.dim() != cur.dim() {
            return Err(Error::DimensionMismatch { expected: cur.nrows(), got: embeddings.nrows() });
        }
        *self.store.get_mut(self.embeddings) = embeddings;
        Ok(())
    }

    fn check(&self, x: &Array2<f64>, cols: usize) -> Result<()> {
        if x.ncols() != cols {
            return Err(Error::DimensionMismatch { expected: cols, got: x.ncols() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input points".into()));
        }
        Ok(())
    }

    /// Appends `D - d` zero columns.
    pub fn pad(&self, u: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((u.nrows(), self.config.ambient_dim));
        out.slice_mut(s![.., ..u.ncols()]).assign(u);
        out
    }

    /// Index of the nearest center; ties go to the smallest index.
    pub fn assign_chart(&self, u: &[f64]) -> usize {
        nearest_center(self.centers(), u)
    }

    pub fn assign_charts(&self, u: &Array2<f64>) -> Vec<usize> {
        u.rows().into_iter().map(|r| self.assign_chart(&r.to_vec())).collect()
    }

    /// Per-row context for the chart flow, on the tape.
    pub fn context<'t>(&self, bound: &Bound<'t, '_>, charts: &[usize]) -> Option<Var<'t>> {
        if self.config.index_dim == 0 {
            return None;
        }
        Some(bound.param(self.embeddings).gather_rows(Rc::new(charts.to_vec())))
    }

    /// Chart-flow inverse at `pad(u)` for the given charts: returns the ambient
    /// points and the inverse log-determinant.
    pub fn decode_on_tape<'t>(
        &self,
        bound: &Bound<'t, '_>,
        u: Var<'t>,
        charts: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (rows, d) = u.shape();
        let tape = bound.tape();
        let padded = if self.config.ambient_dim > d {
            let zeros = tape.constant(Array2::zeros((rows, self.config.ambient_dim - d)));
            crate::tape::concat_cols(&[u, zeros])
        } else {
            u
        };
        let ctx = self.context(bound, charts);
        self.chart_flow.inverse(bound, padded, ctx)
    }

    /// Chart-flow forward for the given charts: returns the full `D`-dimensional
    /// image and the forward log-determinant.
    pub fn chart_forward_on_tape<'t>(
        &self,
        bound: &Bound<'t, '_>,
        x: Var<'t>,
        charts: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let ctx = self.context(bound, charts);
        self.chart_flow.forward(bound, x, ctx)
    }

    /// Decodes with explicitly chosen charts.
    pub fn decode_with_charts(&self, u: &Array2<f64>, charts: &[usize]) -> Result<Array2<f64>> {
        self.check(u, self.config.latent_dim)?;
        if charts.len() != u.nrows() || charts.iter().any(|&k| k >= self.config.charts) {
            return Err(Error::InvalidInput("one valid chart index per row is required".into()));
        }
        let big_d = self.config.ambient_dim;
        let rows = par_rows(u.nrows(), |r| {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, &self.store);
            let uv = tape.constant(u.slice(s![r.clone(), ..]).to_owned());
            let (x, _) = self.decode_on_tape(&bound, uv, &charts[r])?;
            Ok(x.value().rows().into_iter().map(|row| row.to_owned()).collect())
        })?;
        Ok(stack_rows(rows, big_d))
    }

    /// `x = chart_flow^{-1}(pad(u))` using the chart assigned to each `u`.
    pub fn decode(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(u, self.config.latent_dim)?;
        let charts = self.assign_charts(u);
        self.decode_with_charts(u, &charts)
    }

    /// Chart-flow forward images of `x` under every chart: `N` arrays of
    /// shape `M x D`.
    pub fn chart_images(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check(x, self.config.ambient_dim)?;
        (0..self.config.charts)
            .map(|k| {
                let rows = par_rows(x.nrows(), |r| {
                    let tape = Tape::new();
                    let bound = Bound::frozen(&tape, &self.store);
                    let xv = tape.constant(x.slice(s![r.clone(), ..]).to_owned());
                    let (z, _) = self.chart_forward_on_tape(&bound, xv, &vec![k; r.len()])?;
                    Ok(z.value().rows().into_iter().map(|row| row.to_owned()).collect())
                })?;
                Ok(stack_rows(rows, self.config.ambient_dim))
            })
            .collect()
    }

    fn split_image(&self, z: ndarray::ArrayView1<f64>) -> (Array1<f64>, f64) {
        let d = self.config.latent_dim;
        let u = z.slice(s![..d]).to_owned();
        let r = z.slice(s![d..]).iter().map(|v| v * v).sum::<f64>().sqrt();
        (u, r)
    }

    /// Maps each point through the chart flow under every chart and keeps a
    /// chart whose latent falls in its own region (`assign_chart(u_i) == i`),
    /// preferring the smallest padded residual. When no chart is consistent the
    /// one with the smallest `‖u_i - c_i‖²` is used.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Encoded> {
        let images = self.chart_images(x)?;
        let d = self.config.latent_dim;
        let centers = self.centers();
        let mut u = Array2::zeros((x.nrows(), d));
        let mut chart = Vec::with_capacity(x.nrows());
        let mut residual = Array1::zeros(x.nrows());
        for m in 0..x.nrows() {
            let mut best_consistent: Option<(usize, f64)> = None;
            let mut best_dist: Option<(usize, f64)> = None;
            for (i, img) in images.iter().enumerate() {
                let (ui, ri) = self.split_image(img.row(m));
                let dist: f64 = ui.iter().zip(centers.row(i)).map(|(a, c)| (a - c) * (a - c)).sum();
                if best_dist.is_none_or(|(_, b)| dist < b) {
                    best_dist = Some((i, dist));
                }
                if nearest_center(centers, &ui.to_vec()) == i
                    && best_consistent.is_none_or(|(_, b)| ri < b)
                {
                    best_consistent = Some((i, ri));
                }
            }
            let k = best_consistent.or(best_dist).expect("at least one chart").0;
            let (uk, rk) = self.split_image(images[k].row(m));
            u.row_mut(m).assign(&uk);
            chart.push(k);
            residual[m] = rk;
        }
        Ok(Encoded { u, chart, residual })
    }

    /// Encodes through the given charts without selection.
    pub fn encode_with_charts(&self, x: &Array2<f64>, charts: &[usize]) -> Result<Encoded> {
        self.check(x, self.config.ambient_dim)?;
        if charts.len() != x.nrows() || charts.iter().any(|&k| k >= self.config.charts) {
            return Err(Error::InvalidInput("one valid chart index per row is required".into()));
        }
        let rows = par_rows(x.nrows(), |r| {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, &self.store);
            let xv = tape.constant(x.slice(s![r.clone(), ..]).to_owned());
            let (z, _) = self.chart_forward_on_tape(&bound, xv, &charts[r])?;
            Ok(z.value().rows().into_iter().map(|row| row.to_owned()).collect())
        })?;
        let z = stack_rows(rows, self.config.ambient_dim);
        let mut u = Array2::zeros((x.nrows(), self.config.latent_dim));
        let mut residual = Array1::zeros(x.nrows());
        for (m, row) in z.rows().into_iter().enumerate() {
            let (um, rm) = self.split_image(row);
            u.row_mut(m).assign(&um);
            residual[m] = rm;
        }
        Ok(Encoded { u, chart: charts.to_vec(), residual })
    }

    /// Projects points onto the learned manifold: encode, drop the padded
    /// coordinates and decode through the same chart.
    pub fn reconstruct(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let enc = self.encode(x)?;
        self.decode_with_charts(&enc.u, &enc.chart)
    }

    /// `h` forward with log-determinant.
    pub fn base_forward(&self, u: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(u, self.config.latent_dim)?;
        self.base_flow.forward_values(&self.store, u, None)
    }

    pub fn base_inverse(&self, z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(z, self.config.latent_dim)?;
        self.base_flow.inverse_values(&self.store, z, None)
    }

    /// Latents drawn from the model: `u = h^{-1}(z)` with `z ~ N(0, I)`.
    pub fn sample_latent(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_simple_fn((n, self.config.latent_dim), || StandardNormal.sample(&mut rng));
        if n == 0 {
            return Ok(z);
        }
        Ok(self.base_inverse(&z)?.0)
    }

    /// Ambient samples from the generative process.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        let u = self.sample_latent(n, seed)?;
        if n == 0 {
            return Ok(Array2::zeros((0, self.config.ambient_dim)));
        }
        self.decode(&u)
    }

    /// Values of every tensor in the given groups, for freeze checks.
    pub fn group_snapshot(&self, group: ParamGroup) -> Vec<Array2<f64>> {
        self.store.params().iter().filter(|p| p.group == group).map(|p| p.value.clone()).collect()
    }
}

pub fn nearest_center(centers: &Array2<f64>, u: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.axis_iter(Axis(0)).enumerate() {
        let dist: f64 = c.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_d {
            best_d = dist;
            best = i;
        }
    }
    best
}
