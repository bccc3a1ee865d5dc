//! Evaluation: NLL per density mode, reconstruction error, KDE sample scores
//! and density normalization on S².

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::MultiChartFlow;
use crate::config::EvalConfig;
use crate::datasets::log_sum_exp;
use crate::density::{log_prob_manifold, DensityMode, HutchinsonOptions};
use crate::error::{Error, Result};
use crate::geometry::{PointBatch, SpherePoint};
use crate::training::val_recon_error;

/// Mean log-density of `samples` under a Gaussian KDE fit on `reference`.
pub fn kde_score(samples: &PointBatch, reference: &PointBatch, bandwidth: f64) -> Result<f64> {
    if samples.nrows() == 0 || reference.nrows() == 0 {
        return Err(Error::InvalidInput("KDE needs non-empty sample and reference batches".into()));
    }
    if samples.ncols() != reference.ncols() {
        return Err(Error::DimensionMismatch { expected: reference.ncols(), got: samples.ncols() });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidInput("bandwidth must be positive".into()));
    }
    let dim = reference.ncols() as f64;
    let h2 = bandwidth * bandwidth;
    let norm = -(reference.nrows() as f64).ln() - 0.5 * dim * (2.0 * PI * h2).ln();
    let logs: Vec<f64> = (0..samples.nrows())
        .into_par_iter()
        .map(|i| {
            let s = samples.row(i);
            let terms: Vec<f64> = reference
                .rows()
                .into_iter()
                .map(|r| -0.5 * s.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h2)
                .collect();
            log_sum_exp(&terms) + norm
        })
        .collect();
    Ok(logs.iter().sum::<f64>() / logs.len() as f64)
}

/// Mean of `‖x - reconstruct(x)‖²`.
pub fn recon_error(model: &MultiChartFlow, data: &PointBatch) -> Result<f64> {
    val_recon_error(model, data)
}

/// `-mean log p(x)` in the given mode.
pub fn nll(model: &MultiChartFlow, data: &PointBatch, mode: DensityMode, hutchinson: HutchinsonOptions) -> Result<f64> {
    let lp = log_prob_manifold(model, data, mode, hutchinson)?.into_values()?;
    Ok(-lp.mean().unwrap_or(f64::NAN))
}

/// Midpoint latitude/longitude grid on S² with area weights `cos φ Δφ Δλ`.
pub fn sphere_grid(n_lat: usize, n_lon: usize) -> (PointBatch, Array1<f64>) {
    let d_lat = PI / n_lat as f64;
    let d_lon = 2.0 * PI / n_lon as f64;
    let mut pts = Array2::zeros((n_lat * n_lon, 3));
    let mut w = Array1::zeros(n_lat * n_lon);
    for i in 0..n_lat {
        let phi = -PI / 2.0 + (i as f64 + 0.5) * d_lat;
        for j in 0..n_lon {
            let lam = -PI + (j as f64 + 0.5) * d_lon;
            let k = i * n_lon + j;
            pts[[k, 0]] = phi.cos() * lam.cos();
            pts[[k, 1]] = phi.cos() * lam.sin();
            pts[[k, 2]] = phi.sin();
            w[k] = phi.cos() * d_lat * d_lon;
        }
    }
    (pts, w)
}

/// `Σ exp(log_density(x)) cos φ Δφ Δλ` over the grid.
pub fn quadrature_sphere<F>(log_density: F, n_lat: usize, n_lon: usize) -> f64
where
    F: Fn(&[f64; 3]) -> f64,
{
    let (pts, w) = sphere_grid(n_lat, n_lon);
    pts.rows()
        .into_iter()
        .zip(w.iter())
        .map(|(r, &wi)| (log_density(&[r[0], r[1], r[2]])).exp() * wi)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub integral: f64,
    pub degenerate_points: usize,
}

/// Integrates the model's exact-mode density over a latitude/longitude grid.
/// Grid points are first projected onto the learned manifold; points with a
/// degenerate chart Jacobian contribute nothing and are counted.
pub fn normalization_quadrature_sphere(model: &MultiChartFlow, n_lat: usize, n_lon: usize) -> Result<Normalization> {
    if model.ambient_dim() != 3 || model.latent_dim() != 2 {
        return Err(Error::InvalidInput("normalization quadrature needs a model with D = 3 and d = 2".into()));
    }
    let (pts, w) = sphere_grid(n_lat, n_lon);
    let projected = model.reconstruct(&pts)?;
    let lp = log_prob_manifold(model, &projected, DensityMode::Exact, HutchinsonOptions::default())?;
    let degenerate_points = lp.degenerate_count();
    if degenerate_points > 0 {
        log::warn!("{degenerate_points} grid points have degenerate chart Jacobians");
    }
    let integral = lp.values_lossy().iter().zip(w.iter()).filter(|(v, _)| v.is_finite()).map(|(v, wi)| v.exp() * wi).sum();
    Ok(Normalization { integral, degenerate_points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean NLL keyed by density mode name.
    pub mean_nll: BTreeMap<String, f64>,
    pub mean_recon_error: f64,
    /// Model samples scored under a KDE fit on held-out data.
    pub kde_score: f64,
    /// Held-out data scored under a KDE fit on model samples.
    pub kde_score_transposed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization_integral: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization_degenerate_points: Option<usize>,
    pub n_points: usize,
    pub seed: u64,
}

/// Runs every configured evaluation on held-out data. The normalization
/// quadrature runs when `on_sphere` is set.
pub fn evaluate(model: &MultiChartFlow, data: &PointBatch, config: &EvalConfig, on_sphere: bool) -> Result<EvalReport> {
    let mut mean_nll = BTreeMap::new();
    let hutch = HutchinsonOptions { probes: config.hutchinson_probes, seed: config.seed };
    for &mode in &config.modes {
        mean_nll.insert(mode.name().to_string(), nll(model, data, mode, hutch)?);
    }
    let mean_recon_error = recon_error(model, data)?;
    let samples = model.sample(config.n_samples.max(1), config.seed)?;
    let kde = kde_score(&samples, data, config.bandwidth)?;
    let kde_t = kde_score(data, &samples, config.bandwidth)?;
    let norm = if on_sphere && model.ambient_dim() == 3 && model.latent_dim() == 2 {
        Some(normalization_quadrature_sphere(model, config.grid_lat, config.grid_lon)?)
    } else {
        None
    };
    Ok(EvalReport {
        mean_nll,
        mean_recon_error,
        kde_score: kde,
        kde_score_transposed: kde_t,
        normalization_integral: norm.map(|n| n.integral),
        normalization_degenerate_points: norm.map(|n| n.degenerate_points),
        n_points: data.nrows(),
        seed: config.seed,
    })
}

/// Uniform density on the unit sphere, for baselines.
pub fn uniform_sphere_nll() -> f64 {
    (4.0 * PI).ln()
}

pub fn lat_lon_grid_point(lat_deg: f64, lon_deg: f64) -> Result<[f64; 3]> {
    Ok(SpherePoint::from_lat_lon(lat_deg, lon_deg)?.xyz())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kde_matches_direct_double_sum() {
        let r = array![[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]];
        let h: f64 = 0.3;
        let direct: f64 = r
            .rows()
            .into_iter()
            .map(|s| {
                let p: f64 = r
                    .rows()
                    .into_iter()
                    .map(|q| {
                        let d2: f64 = s.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-0.5 * d2 / (h * h)).exp() / (2.0 * PI * h * h)
                    })
                    .sum::<f64>()
                    / 3.0;
                p.ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((kde_score(&r, &r, h).unwrap() - direct).abs() < 1e-12);
        assert!(kde_score(&Array2::zeros((0, 2)), &r, h).is_err());
    }

    #[test]
    fn uniform_density_integrates_to_one() {
        let i = quadrature_sphere(|_| -uniform_sphere_nll(), 200, 400);
        assert!((i - 1.0).abs() < 1e-4);
    }
}
