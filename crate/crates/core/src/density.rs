//! Log-densities on the learned manifold: the latent change of variables plus
//! a volume correction from the chart Jacobian.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::{par_rows, MultiChartFlow};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tape::Tape;

/// Smallest singular value accepted by the exact log-determinant.
pub const DEGENERATE_SINGULAR_VALUE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMode {
    /// `½ log det(JᵀJ)` from singular values.
    Exact,
    /// `½ log Tr(JᵀJ)`.
    Bound,
    /// `½ log` of a Hutchinson estimate of `Tr(JᵀJ)`.
    Hutchinson,
    /// The chart flow's own inverse log-determinant at `pad(u)`.
    Coarse,
}

impl DensityMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Bound => "bound",
            Self::Hutchinson => "hutchinson",
            Self::Coarse => "coarse",
        }
    }
}

impl std::str::FromStr for DensityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exact" => Self::Exact,
            "bound" => Self::Bound,
            "hutchinson" => Self::Hutchinson,
            "coarse" => Self::Coarse,
            _ => return Err(Error::InvalidInput(format!("unknown density mode `{s}`"))),
        })
    }
}

/// Standard normal log-density of each row.
pub fn std_normal_log_prob(z: &Array2<f64>) -> Array1<f64> {
    let d = z.ncols() as f64;
    z.rows()
        .into_iter()
        .map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * PI).ln())
        .collect()
}

/// `log N(h(u); 0, I) + log |det J_h(u)|` per row.
pub fn log_prob_latent(model: &MultiChartFlow, u: &Array2<f64>) -> Result<Array1<f64>> {
    let (z, ld) = model.base_forward(u)?;
    Ok(std_normal_log_prob(&z) + ld)
}

/// Jacobians of `u -> chart_flow^{-1}(pad(u))` for each row (each `D x d`),
/// computed by forward-mode differentiation, plus the chart flow's inverse
/// log-determinant at `pad(u)`.
pub fn chart_jacobians(
    model: &MultiChartFlow,
    u: &Array2<f64>,
    charts: &[usize],
) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    let d = model.latent_dim();
    let big_d = model.ambient_dim();
    if u.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: u.ncols() });
    }
    if charts.len() != u.nrows() || charts.iter().any(|&k| k >= model.charts()) {
        return Err(Error::InvalidInput("one valid chart index per row is required".into()));
    }
    let rows = par_rows(u.nrows(), |r| {
        let m = r.len();
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &model.store);
        let uv = tape.constant(u.slice(s![r.clone(), ..]).to_owned());
        let (x, ld) = model.decode_on_tape(&bound, uv, &charts[r])?;
        let mut jacs = vec![Array2::zeros((big_d, d)); m];
        for j in 0..d {
            let mut seed = Array2::zeros((m, d));
            seed.column_mut(j).fill(1.0);
            let tangents = tape.jvp(&[(uv, seed)]);
            if let Some(tx) = tangents.get(x) {
                for (row, jac) in jacs.iter_mut().enumerate() {
                    jac.column_mut(j).assign(&tx.row(row));
                }
            }
        }
        let ld = ld.value();
        Ok(jacs.into_iter().zip(ld.column(0).iter().copied()).collect::<Vec<_>>())
    })?;
    let (jacs, lds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((jacs, Array1::from(lds)))
}

pub fn chart_jacobian(model: &MultiChartFlow, u: &[f64], chart: usize) -> Result<Array2<f64>> {
    let u = Array2::from_shape_vec((1, u.len()), u.to_vec()).expect("row");
    Ok(chart_jacobians(model, &u, &[chart])?.0.remove(0))
}

fn to_dmatrix(j: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(j.nrows(), j.ncols(), |r, c| j[[r, c]])
}

pub fn singular_values(j: &Array2<f64>) -> Vec<f64> {
    to_dmatrix(j).singular_values().iter().copied().collect()
}

/// `½ log det(JᵀJ) = Σ log s_i`. Fails when the smallest singular value is
/// below [`DEGENERATE_SINGULAR_VALUE`].
pub fn logdet_metric_exact(j: &Array2<f64>) -> Result<f64> {
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("chart Jacobian".into()));
    }
    let sv = singular_values(j);
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if sv.is_empty() || smallest < DEGENERATE_SINGULAR_VALUE {
        return Err(Error::DegenerateJacobian { smallest: if sv.is_empty() { 0.0 } else { smallest } });
    }
    Ok(sv.iter().map(|s| s.ln()).sum())
}

/// The same quantity through a Cholesky factorization of the Gram matrix.
pub fn logdet_metric_cholesky(j: &Array2<f64>) -> Result<f64> {
    let jm = to_dmatrix(j);
    let gram = jm.transpose() * &jm;
    let chol = gram
        .cholesky()
        .ok_or(Error::DegenerateJacobian { smallest: 0.0 })?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum())
}

/// `½ log Tr(JᵀJ)` via the squared Frobenius norm.
pub fn logdet_metric_bound(j: &Array2<f64>) -> Result<f64> {
    let fro2: f64 = j.iter().map(|v| v * v).sum();
    if !fro2.is_finite() {
        return Err(Error::NonFinite("chart Jacobian".into()));
    }
    if fro2 == 0.0 {
        return Err(Error::DegenerateJacobian { smallest: 0.0 });
    }
    Ok(0.5 * fro2.ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error of the mean across probes (zero for a single probe).
    pub std_error: f64,
}

/// Hutchinson estimate of `Tr(JᵀJ)` as the mean of `‖J v‖²` over standard
/// normal probes `v ∈ R^d`; `jvp` returns `J v`.
pub fn hutchinson_trace<F>(d: usize, mut jvp: F, n_probes: usize, seed: u64) -> Result<TraceEstimate>
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    if n_probes == 0 {
        return Err(Error::InvalidInput("at least one probe is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_probes {
        let v = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        let jv = jvp(&v);
        let q = jv.dot(&jv);
        sum += q;
        sum_sq += q * q;
    }
    let n = n_probes as f64;
    let mean = sum / n;
    let std_error = if n_probes > 1 {
        ((sum_sq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate { mean, std_error })
}

/// Options for the stochastic mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HutchinsonOptions {
    pub probes: usize,
    pub seed: u64,
}

impl Default for HutchinsonOptions {
    fn default() -> Self {
        Self { probes: 1, seed: 0 }
    }
}

/// Per-point log-densities. Points whose exact log-determinant is undefined
/// yield `Err` entries.
#[derive(Debug)]
pub struct ManifoldLogProb {
    pub log_prob: Vec<Result<f64>>,
    pub u: Array2<f64>,
    pub chart: Vec<usize>,
}

impl ManifoldLogProb {
    pub fn degenerate_count(&self) -> usize {
        self.log_prob.iter().filter(|r| r.is_err()).count()
    }

    /// Values with degenerate points as NaN.
    pub fn values_lossy(&self) -> Array1<f64> {
        self.log_prob.iter().map(|r| *r.as_ref().unwrap_or(&f64::NAN)).collect()
    }

    pub fn into_values(self) -> Result<Array1<f64>> {
        self.log_prob.into_iter().collect::<Result<Vec<_>>>().map(Array1::from)
    }
}

/// Log-density of latents `u` (decoded through `charts`) under the given mode.
pub fn log_prob_from_latent(
    model: &MultiChartFlow,
    u: &Array2<f64>,
    charts: &[usize],
    mode: DensityMode,
    hutchinson: HutchinsonOptions,
) -> Result<Vec<Result<f64>>> {
    let lp = log_prob_latent(model, u)?;
    let (jacs, coarse) = chart_jacobians(model, u, charts)?;
    let d = model.latent_dim();
    Ok(jacs
        .iter()
        .enumerate()
        .map(|(m, j)| {
            let t = match mode {
                DensityMode::Exact => logdet_metric_exact(j)?,
                DensityMode::Bound => logdet_metric_bound(j)?,
                DensityMode::Hutchinson => {
                    let seed = hutchinson.seed.wrapping_add(m as u64);
                    let est = hutchinson_trace(d, |v| j.dot(v), hutchinson.probes, seed)?;
                    if !(est.mean > 0.0) {
                        return Err(Error::DegenerateJacobian { smallest: 0.0 });
                    }
                    0.5 * est.mean.ln()
                }
                DensityMode::Coarse => coarse[m],
            };
            Ok(lp[m] - t)
        })
        .collect())
}

/// Encodes `x` and evaluates `log p(u) - T(u)`, with `T` chosen by `mode`.
/// `bound` and `hutchinson` give lower bounds of the exact value whenever the
/// singular values of the chart Jacobian satisfy `Π s_i² <= Σ s_i²`.
pub fn log_prob_manifold(
    model: &MultiChartFlow,
    x: &Array2<f64>,
    mode: DensityMode,
    hutchinson: HutchinsonOptions,
) -> Result<ManifoldLogProb> {
    let enc = model.encode(x)?;
    let log_prob = log_prob_from_latent(model, &enc.u, &enc.chart, mode, hutchinson)?;
    Ok(ManifoldLogProb { log_prob, u: enc.u, chart: enc.chart })
}
