//! Synthetic manifold datasets, geolocation CSV ingestion and dataset files.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    hyperboloid_exp, hyperboloid_tangent_basis, sphere_exp, sphere_tangent_basis, to_batch, HyperboloidPoint, PointBatch,
    SpherePoint, Vec3,
};

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;
pub const LORENZ_DT: f64 = 0.01;
pub const LORENZ_BURN_IN: f64 = 10.0;
const LORENZ_BLOWUP: f64 = 1e6;

pub const CHECKERBOARD_LON_BANDS: usize = 8;
pub const CHECKERBOARD_LAT_BANDS: usize = 4;
pub const CHECKERBOARD_Z_MAX: f64 = 0.8;
pub const CHECKERBOARD_H2_CELLS: usize = 4;
pub const CHECKERBOARD_H2_HALF_WIDTH: f64 = 0.5;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    Ok(())
}

/// The four tetrahedral mode directions of the wrapped-normal dataset.
pub fn tetrahedral_modes() -> [SpherePoint; 4] {
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        .map(|v| SpherePoint::normalized(v).expect("nonzero"))
}

/// Mixture of wrapped normals on S²: a mode is chosen uniformly, an isotropic
/// Gaussian with the mode's scale is drawn in its tangent plane and pushed
/// through the exponential map.
pub fn sample_wrapped_normals_sphere(n: usize, modes: &[(Vec3, f64)], seed: u64) -> Result<PointBatch> {
    check_n(n)?;
    if modes.is_empty() {
        return Err(Error::InvalidInput("at least one mode is required".into()));
    }
    let mut prepared = Vec::with_capacity(modes.len());
    for (mu, scale) in modes {
        let p = SpherePoint::new(*mu)?;
        if !(scale.is_finite() && *scale >= 0.0) {
            return Err(Error::InvalidInput(format!("mode scale {scale} must be finite and non-negative")));
        }
        prepared.push((p, sphere_tangent_basis(&p), *scale));
    }
    let mut rng = rng_for(seed);
    let pts = (0..n).map(|_| {
        let (p, (e1, e2), s) = &prepared[rng.random_range(0..prepared.len())];
        let (z1, z2) = (normal(&mut rng) * s, normal(&mut rng) * s);
        let v = [0, 1, 2].map(|j| z1 * e1[j] + z2 * e2[j]);
        sphere_exp(p, &v).xyz()
    });
    Ok(to_batch(pts.collect::<Vec<_>>()))
}

/// Cell of the spherical checkerboard, or `None` for points outside the band
/// `|z| <= 0.8`.
pub fn checkerboard_sphere_cell(p: &Vec3) -> Option<(usize, usize)> {
    let z = p[2];
    if z.abs() > CHECKERBOARD_Z_MAX {
        return None;
    }
    let lon = p[1].atan2(p[0]);
    let i = (((lon + PI) / (2.0 * PI)) * CHECKERBOARD_LON_BANDS as f64).floor() as usize;
    let j = (((z + CHECKERBOARD_Z_MAX) / (2.0 * CHECKERBOARD_Z_MAX)) * CHECKERBOARD_LAT_BANDS as f64).floor() as usize;
    Some((i.min(CHECKERBOARD_LON_BANDS - 1), j.min(CHECKERBOARD_LAT_BANDS - 1)))
}

pub fn checkerboard_sphere_on(p: &Vec3) -> bool {
    matches!(checkerboard_sphere_cell(p), Some((i, j)) if (i + j) % 2 == 0)
}

/// Uniform sphere samples kept only in the "on" cells of an 8 × 4 checkerboard
/// of longitude bands and equal-area latitude bands over `|z| <= 0.8`.
pub fn sample_checkerboard_sphere(n: usize, seed: u64) -> Result<PointBatch> {
    check_n(n)?;
    let mut rng = rng_for(seed);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let v = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let Ok(p) = SpherePoint::normalized(v) else { continue };
        if checkerboard_sphere_on(&p.xyz()) {
            pts.push(p.xyz());
        }
    }
    Ok(to_batch(pts))
}

/// Apex plus four modes at hyperbolic distance `distance` along the spatial
/// axes.
pub fn five_gaussian_modes(distance: f64) -> [HyperboloidPoint; 5] {
    let apex = HyperboloidPoint::APEX;
    let (e1, e2) = hyperboloid_tangent_basis(&apex);
    let dir = |a: f64, b: f64| [0, 1, 2].map(|j| distance * (a * e1[j] + b * e2[j]));
    [
        apex,
        hyperboloid_exp(&apex, &dir(1.0, 0.0)),
        hyperboloid_exp(&apex, &dir(0.0, 1.0)),
        hyperboloid_exp(&apex, &dir(-1.0, 0.0)),
        hyperboloid_exp(&apex, &dir(0.0, -1.0)),
    ]
}

/// Wrapped normals on H² at the five modes of [`five_gaussian_modes`].
pub fn sample_five_gaussians_hyperbolic(n: usize, distance: f64, scale: f64, seed: u64) -> Result<PointBatch> {
    check_n(n)?;
    if !(scale.is_finite() && scale >= 0.0 && distance.is_finite()) {
        return Err(Error::InvalidInput("five-Gaussian scale and distance must be finite".into()));
    }
    let modes = five_gaussian_modes(distance);
    let bases: Vec<_> = modes.iter().map(hyperboloid_tangent_basis).collect();
    let mut rng = rng_for(seed);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..modes.len());
        let (e1, e2) = bases[k];
        let (z1, z2) = (normal(&mut rng) * scale, normal(&mut rng) * scale);
        let v = [0, 1, 2].map(|j| z1 * e1[j] + z2 * e2[j]);
        pts.push(hyperboloid_exp(&modes[k], &v).xyz());
    }
    Ok(to_batch(pts))
}

/// Cell of the hyperbolic checkerboard in Poincaré coordinates.
pub fn checkerboard_hyperbolic_cell(poincare: [f64; 2]) -> Option<(usize, usize)> {
    let w = CHECKERBOARD_H2_HALF_WIDTH;
    if poincare.iter().any(|c| !(c.abs() <= w)) {
        return None;
    }
    let cells = CHECKERBOARD_H2_CELLS as f64;
    let idx = |c: f64| ((((c + w) / (2.0 * w)) * cells).floor() as usize).min(CHECKERBOARD_H2_CELLS - 1);
    Some((idx(poincare[0]), idx(poincare[1])))
}

/// Points drawn uniformly in Poincaré coordinates over the "on" cells of a
/// 4 × 4 checkerboard covering `[-0.5, 0.5]²`, lifted to the hyperboloid.
pub fn sample_checkerboard_hyperbolic(n: usize, seed: u64) -> Result<PointBatch> {
    check_n(n)?;
    let mut rng = rng_for(seed);
    let w = CHECKERBOARD_H2_HALF_WIDTH;
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = [rng.random_range(-w..w), rng.random_range(-w..w)];
        if let Some((i, j)) = checkerboard_hyperbolic_cell(p) {
            if (i + j) % 2 == 0 {
                pts.push(HyperboloidPoint::from_poincare(p)?.xyz());
            }
        }
    }
    Ok(to_batch(pts))
}

/// Cosine of the angle to the mode for a von Mises–Fisher draw on S² (Wood's
/// method, closed form in three dimensions).
fn vmf_cosine<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if kappa == f64::INFINITY {
        1.0
    } else if kappa == 0.0 {
        2.0 * u - 1.0
    } else {
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    }
}

/// Equal-weight mixture of von Mises–Fisher distributions on S². `kappa` may be
/// `f64::INFINITY` (point mass at the mode).
pub fn sample_vmf_mixture(n: usize, modes: &[Vec3], kappas: &[f64], seed: u64) -> Result<PointBatch> {
    check_n(n)?;
    if modes.is_empty() || modes.len() != kappas.len() {
        return Err(Error::InvalidInput("need one concentration per mode".into()));
    }
    if kappas.iter().any(|k| !(*k >= 0.0)) {
        return Err(Error::InvalidInput("concentrations must be non-negative".into()));
    }
    let prepared: Vec<_> = modes
        .iter()
        .map(|m| SpherePoint::new(*m).map(|p| (p, sphere_tangent_basis(&p))))
        .collect::<Result<_>>()?;
    let mut rng = rng_for(seed);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..prepared.len());
        let (mu, (e1, e2)) = &prepared[k];
        let w = vmf_cosine(kappas[k], &mut rng);
        let angle = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - w * w).max(0.0).sqrt();
        let m = mu.xyz();
        let x = [0, 1, 2].map(|j| w * m[j] + r * (angle.cos() * e1[j] + angle.sin() * e2[j]));
        pts.push(SpherePoint::normalized(x)?.xyz());
    }
    Ok(to_batch(pts))
}

/// Log-density of an equal-weight vMF mixture on S² with respect to area.
pub fn vmf_mixture_log_density(x: &Vec3, modes: &[Vec3], kappas: &[f64]) -> f64 {
    let terms: Vec<f64> = modes
        .iter()
        .zip(kappas)
        .map(|(m, &k)| {
            let c = crate::geometry::dot(x, m);
            if k == 0.0 {
                -(4.0 * PI).ln()
            } else {
                // k / (4π sinh k) · exp(k c), written stably.
                k.ln() - (2.0 * PI).ln() - (1.0 - (-2.0 * k).exp()).ln() + k * (c - 1.0)
            }
        })
        .collect();
    log_sum_exp(&terms) - (modes.len() as f64).ln()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn lorenz_rhs(s: &Vec3) -> Vec3 {
    [
        LORENZ_SIGMA * (s[1] - s[0]),
        s[0] * (LORENZ_RHO - s[2]) - s[1],
        s[0] * s[1] - LORENZ_BETA * s[2],
    ]
}

pub fn rk4_step(s: &Vec3, h: f64) -> Vec3 {
    let add = |a: &Vec3, b: &Vec3, f: f64| [a[0] + f * b[0], a[1] + f * b[1], a[2] + f * b[2]];
    let k1 = lorenz_rhs(s);
    let k2 = lorenz_rhs(&add(s, &k1, h / 2.0));
    let k3 = lorenz_rhs(&add(s, &k2, h / 2.0));
    let k4 = lorenz_rhs(&add(s, &k3, h));
    [0, 1, 2].map(|j| s[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
}

fn check_state(s: &Vec3, t: f64) -> Result<()> {
    if s.iter().any(|v| !v.is_finite() || v.abs() > LORENZ_BLOWUP) {
        return Err(Error::IntegrationDiverged { time: t, state: *s });
    }
    Ok(())
}

/// Integrates one trajectory with fixed-step RK4 and records the state at each
/// (sorted) requested time. Off-grid times are reached by a partial step from
/// the preceding grid point, so the grid itself is unaffected.
pub fn integrate_lorenz(initial: Vec3, times: &[f64], dt: f64, burn_in: f64) -> Result<Vec<Vec3>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput("integration step must be positive".into()));
    }
    let mut s = initial;
    let burn_steps = (burn_in / dt).round() as usize;
    for k in 0..burn_steps {
        s = rk4_step(&s, dt);
        check_state(&s, (k + 1) as f64 * dt - burn_in)?;
    }
    let mut out = Vec::with_capacity(times.len());
    let mut k = 0usize;
    for &t in times {
        while (k + 1) as f64 * dt <= t {
            s = rk4_step(&s, dt);
            k += 1;
            check_state(&s, k as f64 * dt)?;
        }
        let rem = t - k as f64 * dt;
        let p = if rem > 0.0 { rk4_step(&s, rem) } else { s };
        check_state(&p, t)?;
        out.push(p);
    }
    Ok(out)
}

/// Positions sampled uniformly in time over `[0, t_span]` from `n_trajectories`
/// Lorenz trajectories with the classical parameters, after a burn-in.
pub fn sample_lorenz(n_points: usize, n_trajectories: usize, t_span: f64, seed: u64) -> Result<PointBatch> {
    sample_lorenz_with_step(n_points, n_trajectories, t_span, LORENZ_DT, seed)
}

pub fn sample_lorenz_with_step(
    n_points: usize,
    n_trajectories: usize,
    t_span: f64,
    dt: f64,
    seed: u64,
) -> Result<PointBatch> {
    check_n(n_points)?;
    if n_trajectories == 0 || !(t_span > 0.0 && t_span.is_finite()) {
        return Err(Error::InvalidInput("need at least one trajectory and a positive time span".into()));
    }
    let mut rng = rng_for(seed);
    let initial: Vec<Vec3> = (0..n_trajectories)
        .map(|_| [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), rng.random_range(5.0..45.0)])
        .collect();
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); n_trajectories];
    for _ in 0..n_points {
        let k = rng.random_range(0..n_trajectories);
        times[k].push(rng.random_range(0.0..=t_span));
    }
    for t in &mut times {
        t.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    }
    let parts: Vec<Vec<Vec3>> = initial
        .par_iter()
        .zip(times.par_iter())
        .map(|(s0, ts)| integrate_lorenz(*s0, ts, dt, LORENZ_BURN_IN))
        .collect::<Result<_>>()?;
    let mut pts: Vec<Vec3> = parts.into_iter().flatten().collect();
    pts.shuffle(&mut rng);
    Ok(to_batch(pts))
}

/// Points parsed from a geolocation CSV and the number of rows dropped.
#[derive(Debug, Clone)]
pub struct GeoPoints {
    pub points: PointBatch,
    pub dropped: usize,
}

/// Reads decimal-degree latitude/longitude columns and maps each row to the
/// unit sphere. Rows with missing, non-numeric or out-of-range coordinates are
/// dropped and counted.
pub fn parse_geo_csv<R: Read>(reader: R, lat_column: &str, lon_column: &str) -> Result<GeoPoints> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.byte_headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| std::str::from_utf8(h).map(|s| s.trim() == name).unwrap_or(false))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (lat_idx, lon_idx) = (find(lat_column)?, find(lon_column)?);
    let parse = |field: Option<&[u8]>| -> Option<f64> { std::str::from_utf8(field?).ok()?.trim().parse().ok() };
    let mut pts = Vec::new();
    let mut dropped = 0usize;
    let mut record = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                dropped += 1;
                continue;
            }
        }
        let p = parse(record.get(lat_idx))
            .zip(parse(record.get(lon_idx)))
            .and_then(|(lat, lon)| SpherePoint::from_lat_lon(lat, lon).ok());
        match p {
            Some(p) => pts.push(p.xyz()),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing or invalid coordinates");
    }
    Ok(GeoPoints { points: to_batch(pts), dropped })
}

pub fn load_geo_csv(path: &Path, lat_column: &str, lon_column: &str) -> Result<GeoPoints> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_geo_csv(std::io::BufReader::new(file), lat_column, lon_column)
}

/// Shuffled split with `floor(fraction * n)` training rows.
pub fn split_train_val(points: &PointBatch, train_fraction: f64, seed: u64) -> Result<(PointBatch, PointBatch)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let n = points.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let train = points.select(Axis(0), &idx[..n_train]);
    let val = points.select(Axis(0), &idx[n_train..]);
    Ok((train, val))
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Four wrapped normals on S² at the tetrahedral directions.
    WrappedNormalsSphere { scale: f64 },
    CheckerboardSphere,
    FiveGaussiansHyperbolic { distance: f64, scale: f64 },
    CheckerboardHyperbolic,
    VmfSphere { modes: Vec<Vec3>, kappas: Vec<f64> },
    Lorenz { trajectories: usize, t_span: f64 },
    GeoCsv {
        path: PathBuf,
        lat_column: String,
        lon_column: String,
        train_fraction: f64,
    },
}

impl DatasetSource {
    pub fn generator_name(&self) -> &'static str {
        match self {
            Self::WrappedNormalsSphere { .. } => "wrapped_normals_sphere",
            Self::CheckerboardSphere => "checkerboard_sphere",
            Self::FiveGaussiansHyperbolic { .. } => "five_gaussians_hyperbolic",
            Self::CheckerboardHyperbolic => "checkerboard_hyperbolic",
            Self::VmfSphere { .. } => "vmf_sphere",
            Self::Lorenz { .. } => "lorenz",
            Self::GeoCsv { .. } => "geo_csv",
        }
    }

    /// Whether points lie on S² (as opposed to H² or in R³).
    pub fn is_sphere(&self) -> bool {
        matches!(
            self,
            Self::WrappedNormalsSphere { .. } | Self::CheckerboardSphere | Self::VmfSphere { .. } | Self::GeoCsv { .. }
        )
    }

    pub fn is_hyperbolic(&self) -> bool {
        matches!(self, Self::FiveGaussiansHyperbolic { .. } | Self::CheckerboardHyperbolic)
    }

    fn layout(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Self::WrappedNormalsSphere { scale } => json!({
                "modes": tetrahedral_modes().map(|p| p.xyz()),
                "scale": scale,
            }),
            Self::CheckerboardSphere => json!({
                "longitude_bands": CHECKERBOARD_LON_BANDS,
                "latitude_bands": CHECKERBOARD_LAT_BANDS,
                "z_range": [-CHECKERBOARD_Z_MAX, CHECKERBOARD_Z_MAX],
                "latitude_spacing": "equal_area",
                "on_cells": "(lon_band + lat_band) even",
            }),
            Self::FiveGaussiansHyperbolic { distance, scale } => json!({
                "modes": five_gaussian_modes(*distance).map(|p| p.xyz()),
                "scale": scale,
            }),
            Self::CheckerboardHyperbolic => json!({
                "grid": [CHECKERBOARD_H2_CELLS, CHECKERBOARD_H2_CELLS],
                "poincare_range": [-CHECKERBOARD_H2_HALF_WIDTH, CHECKERBOARD_H2_HALF_WIDTH],
                "on_cells": "(i + j) even",
            }),
            Self::VmfSphere { modes, kappas } => json!({ "modes": modes, "kappas": kappas }),
            Self::Lorenz { trajectories, t_span } => json!({
                "sigma": LORENZ_SIGMA,
                "rho": LORENZ_RHO,
                "beta": LORENZ_BETA,
                "dt": LORENZ_DT,
                "burn_in": LORENZ_BURN_IN,
                "trajectories": trajectories,
                "t_span": t_span,
            }),
            Self::GeoCsv { path, lat_column, lon_column, train_fraction } => json!({
                "path": path,
                "lat_column": lat_column,
                "lon_column": lon_column,
                "train_fraction": train_fraction,
            }),
        }
    }
}

/// Sidecar metadata written next to the dataset arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub generator: String,
    pub seed: u64,
    pub ambient_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub dropped_rows: usize,
    pub layout: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: PointBatch,
    pub val: PointBatch,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn ambient_dim(&self) -> usize {
        self.meta.ambient_dim
    }
}

/// Generates or loads a dataset. Synthetic sources draw `n_train + n_val`
/// points in one stream and split them in order; geo sources use the
/// configured train fraction.
pub fn build_dataset(name: &str, source: &DatasetSource, n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    let total = n_train + n_val;
    let mut dropped = 0;
    let (train, val) = if let DatasetSource::GeoCsv { path, lat_column, lon_column, train_fraction } = source {
        let geo = load_geo_csv(path, lat_column, lon_column)?;
        dropped = geo.dropped;
        if geo.points.nrows() < 2 {
            return Err(Error::InvalidInput(format!("{} holds fewer than two valid rows", path.display())));
        }
        split_train_val(&geo.points, *train_fraction, seed)?
    } else {
        if n_train == 0 || n_val == 0 {
            return Err(Error::InvalidInput("train and validation sizes must be positive".into()));
        }
        let all = match source {
            DatasetSource::WrappedNormalsSphere { scale } => {
                let modes: Vec<_> = tetrahedral_modes().iter().map(|p| (p.xyz(), *scale)).collect();
                sample_wrapped_normals_sphere(total, &modes, seed)?
            }
            DatasetSource::CheckerboardSphere => sample_checkerboard_sphere(total, seed)?,
            DatasetSource::FiveGaussiansHyperbolic { distance, scale } => {
                sample_five_gaussians_hyperbolic(total, *distance, *scale, seed)?
            }
            DatasetSource::CheckerboardHyperbolic => sample_checkerboard_hyperbolic(total, seed)?,
            DatasetSource::VmfSphere { modes, kappas } => sample_vmf_mixture(total, modes, kappas, seed)?,
            DatasetSource::Lorenz { trajectories, t_span } => sample_lorenz(total, *trajectories, *t_span, seed)?,
            DatasetSource::GeoCsv { .. } => unreachable!(),
        };
        (all.slice(s![..n_train, ..]).to_owned(), all.slice(s![n_train.., ..]).to_owned())
    };
    let meta = DatasetMeta {
        name: name.to_string(),
        generator: source.generator_name().to_string(),
        seed,
        ambient_dim: train.ncols(),
        n_train: train.nrows(),
        n_val: val.nrows(),
        dropped_rows: dropped,
        layout: source.layout(),
    };
    Ok(Dataset { train, val, meta })
}

const DATASET_MAGIC: &[u8; 4] = b"MCFD";
const DATASET_VERSION: u32 = 1;

pub const DATASET_BIN: &str = "dataset.bin";
pub const TRAIN_CSV: &str = "train.csv";
pub const VAL_CSV: &str = "val.csv";
pub const META_JSON: &str = "meta.json";

/// Binary layout: magic, version (u32), n_train, n_val, dim (u64 each), then
/// train and val values as little-endian f64 in row-major order.
pub fn encode_dataset_bin(train: &PointBatch, val: &PointBatch) -> Result<Vec<u8>> {
    if train.ncols() != val.ncols() {
        return Err(Error::DimensionMismatch { expected: train.ncols(), got: val.ncols() });
    }
    let mut out = Vec::with_capacity(32 + 8 * (train.len() + val.len()));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [train.nrows(), val.nrows(), train.ncols()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in train.iter().chain(val.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset_bin(bytes: &[u8]) -> Result<(PointBatch, PointBatch)> {
    let bad = |reason: &str| Error::Malformed { what: "dataset file", reason: reason.to_string() };
    if bytes.len() < 32 || &bytes[..4] != DATASET_MAGIC {
        return Err(bad("missing MCFD header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
    let (n_train, n_val, dim) = (word(0), word(1), word(2));
    let count = |rows: u64| rows.checked_mul(dim).and_then(|c| usize::try_from(c).ok());
    let (Some(c_train), Some(c_val)) = (count(n_train), count(n_val)) else {
        return Err(bad("array sizes overflow"));
    };
    let expected = c_train
        .checked_add(c_val)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(32))
        .ok_or_else(|| bad("array sizes overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let dim = dim as usize;
    let train = Array2::from_shape_vec((n_train as usize, dim), values[..c_train].to_vec()).map_err(|e| bad(&e.to_string()))?;
    let val = Array2::from_shape_vec((n_val as usize, dim), values[c_train..].to_vec()).map_err(|e| bad(&e.to_string()))?;
    Ok((train, val))
}

/// CSV with header `x0,x1,...`; values use the shortest round-trip decimal form.
pub fn write_points_csv<W: std::io::Write>(writer: W, points: &PointBatch) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((0..points.ncols()).map(|j| format!("x{j}")))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_points_csv<R: Read>(reader: R) -> Result<PointBatch> {
    let mut rdr = csv::Reader::from_reader(reader);
    let dim = rdr.headers()?.len();
    if dim == 0 {
        return Err(Error::Malformed { what: "points CSV", reason: "missing header".into() });
    }
    let mut flat = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim {
            return Err(Error::Malformed { what: "points CSV", reason: format!("row {} has {} fields", i + 1, rec.len()) });
        }
        for f in rec.iter() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Malformed {
                what: "points CSV",
                reason: format!("row {}: `{f}` is not a number", i + 1),
            })?;
            flat.push(v);
        }
    }
    let n = flat.len() / dim;
    Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::Malformed { what: "points CSV", reason: e.to_string() })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `dataset.bin`, `train.csv`, `val.csv` and `meta.json` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(DATASET_BIN), &encode_dataset_bin(&dataset.train, &dataset.val)?)?;
    for (name, pts) in [(TRAIN_CSV, &dataset.train), (VAL_CSV, &dataset.val)] {
        let mut buf = Vec::new();
        write_points_csv(&mut buf, pts)?;
        write_file(&dir.join(name), &buf)?;
    }
    let meta = serde_json::to_vec_pretty(&dataset.meta)?;
    write_file(&dir.join(META_JSON), &meta)
}

/// Loads a dataset directory from its CSV files and metadata.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::open(&p).map(std::io::BufReader::new).map_err(|e| Error::io(p, e))
    };
    let train = read_points_csv(open(TRAIN_CSV)?)?;
    let val = read_points_csv(open(VAL_CSV)?)?;
    let meta: DatasetMeta = serde_json::from_reader(open(META_JSON)?)?;
    if meta.n_train != train.nrows() || meta.n_val != val.nrows() || train.ncols() != val.ncols() {
        return Err(Error::Malformed { what: "dataset directory", reason: "metadata does not match the CSV files".into() });
    }
    Ok(Dataset { train, val, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_wrapped_normal_collapses() {
        let x = sample_wrapped_normals_sphere(4, &[([0.0, 0.0, 1.0], 0.0)], 1).unwrap();
        for r in x.rows() {
            assert_eq!(r.to_vec(), vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn non_unit_modes_rejected() {
        assert!(sample_wrapped_normals_sphere(4, &[([0.0, 0.0, 2.0], 0.1)], 1).is_err());
        assert!(sample_vmf_mixture(4, &[[0.0, 1.1, 0.0]], &[1.0], 1).is_err());
    }

    #[test]
    fn vmf_infinite_kappa_is_mode() {
        let x = sample_vmf_mixture(5, &[[0.0, 1.0, 0.0]], &[f64::INFINITY], 2).unwrap();
        for r in x.rows() {
            assert!((r[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dataset_bin_round_trip_and_truncation() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 + 0.5 * j as f64);
        let b = Array2::from_shape_fn((1, 2), |(_, j)| -(j as f64));
        let bytes = encode_dataset_bin(&a, &b).unwrap();
        let (a2, b2) = decode_dataset_bin(&bytes).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(decode_dataset_bin(&bytes[..bytes.len() - 1]).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_dataset_bin(&huge).is_err());
    }

    #[test]
    fn lorenz_partial_steps_match_grid() {
        let s0 = [1.0, 1.0, 20.0];
        let on_grid = integrate_lorenz(s0, &[0.5], 0.01, 0.0).unwrap()[0];
        let mut s = s0;
        for _ in 0..50 {
            s = rk4_step(&s, 0.01);
        }
        for j in 0..3 {
            assert!((on_grid[j] - s[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn lorenz_divergence_reported() {
        let r = integrate_lorenz([1.0, 1.0, 1.0], &[20.0], 0.5, 0.0);
        assert!(matches!(r, Err(Error::IntegrationDiverged { .. })));
    }
}
