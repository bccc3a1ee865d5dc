//! Static raster plots: Mollweide and Poincaré-disk maps and a rotated 3-D
//! scatter.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};
use image::{Rgb, RgbImage};
use multichart::atlas::MultiChartFlow;
use multichart::density::{log_prob_manifold, DensityMode, HutchinsonOptions};
use multichart::geometry::{
    inverse_mollweide, project_mollweide, project_poincare, HyperboloidPoint, PointBatch, SpherePoint,
};
use ndarray::Array2;

const SQRT2: f64 = std::f64::consts::SQRT_2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const OUTSIDE: Rgb<u8> = Rgb([235, 235, 235]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Mollweide,
    Poincare,
    Scatter3d,
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mollweide" => Ok(Self::Mollweide),
            "poincare" => Ok(Self::Poincare),
            "scatter3d" => Ok(Self::Scatter3d),
            other => Err(format!("unknown projection `{other}` (mollweide, poincare, scatter3d)")),
        }
    }
}

/// Five-stop approximation of the viridis colormap, `t` in [0, 1].
pub fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Maps values to [0, 1] between their 1st and 99th percentiles; non-finite
/// values map to NaN.
fn normalize(values: &[f64]) -> Vec<f64> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return vec![f64::NAN; values.len()];
    }
    finite.sort_by(f64::total_cmp);
    let lo = finite[finite.len() / 100];
    let hi = finite[(finite.len() * 99 / 100).min(finite.len() - 1)];
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|&v| if v.is_finite() { (v - lo) / span } else { f64::NAN }).collect()
}

fn check_dim(batch: &PointBatch) -> Result<()> {
    if batch.ncols() != 3 {
        bail!("plots need 3-dimensional points, got {}", batch.ncols());
    }
    Ok(())
}

fn plot_xy(projection: Projection, p: [f64; 3]) -> Result<[f64; 2]> {
    Ok(match projection {
        Projection::Mollweide => {
            let s = SpherePoint::new(p).map_err(|_| anyhow::anyhow!("point {p:?} is not on the unit sphere"))?;
            let [x, y] = project_mollweide(&s)?;
            [x / (2.0 * SQRT2), y / SQRT2]
        }
        Projection::Poincare => {
            let h = HyperboloidPoint::new(p).map_err(|_| anyhow::anyhow!("point {p:?} is not on the hyperboloid"))?;
            project_poincare(&h)
        }
        Projection::Scatter3d => unreachable!("3-D scatter uses its own camera"),
    })
}

fn canvas(projection: Projection, size: u32) -> RgbImage {
    let (w, h) = match projection {
        Projection::Mollweide => (2 * size, size),
        _ => (size, size),
    };
    RgbImage::from_pixel(w, h, BACKGROUND)
}

/// Pixel centre in normalized plot coordinates `[-1, 1]²`.
fn pixel_to_plot(img: &RgbImage, px: u32, py: u32) -> [f64; 2] {
    let (w, h) = img.dimensions();
    [2.0 * (px as f64 + 0.5) / w as f64 - 1.0, 1.0 - 2.0 * (py as f64 + 0.5) / h as f64]
}

fn plot_to_pixel(img: &RgbImage, xy: [f64; 2]) -> Option<(u32, u32)> {
    let (w, h) = img.dimensions();
    let px = ((xy[0] + 1.0) * 0.5 * w as f64).floor();
    let py = ((1.0 - xy[1]) * 0.5 * h as f64).floor();
    (px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64).then_some((px as u32, py as u32))
}

fn put_dot(img: &mut RgbImage, px: u32, py: u32, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for dy in 0..2 {
        for dx in 0..2 {
            if px + dx < w && py + dy < h {
                img.put_pixel(px + dx, py + dy, color);
            }
        }
    }
}

/// Fixed oblique orthographic camera for 3-D scatters.
fn camera(points: &PointBatch) -> impl Fn(&[f64]) -> [f64; 2] {
    let mean = points.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| ndarray::Array1::zeros(3));
    let (az, el) = (0.6_f64, 0.35_f64);
    let project = move |p: &[f64]| {
        let (x, y, z) = (p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        let xr = x * az.cos() - y * az.sin();
        let yr = x * az.sin() + y * az.cos();
        [xr, z * el.cos() - yr * el.sin()]
    };
    let extent = points
        .rows()
        .into_iter()
        .map(|r| {
            let [a, b] = project(&r.to_vec());
            a.abs().max(b.abs())
        })
        .fold(1e-12, f64::max)
        * 1.05;
    move |p| {
        let [a, b] = project(p);
        [a / extent, b / extent]
    }
}

/// Scatter plot of `points`, colored by `values` when given.
pub fn scatter(points: &PointBatch, values: Option<&[f64]>, projection: Projection, size: u32) -> Result<RgbImage> {
    check_dim(points)?;
    let mut img = canvas(projection, size);
    let colors: Vec<Rgb<u8>> = match values {
        Some(v) => normalize(v).into_iter().map(colormap).collect(),
        None => vec![Rgb([40, 70, 160]); points.nrows()],
    };
    if projection == Projection::Scatter3d {
        let cam = camera(points);
        let mut order: Vec<usize> = (0..points.nrows()).collect();
        if let Some(v) = values {
            order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        }
        for i in order {
            if let Some((px, py)) = plot_to_pixel(&img, cam(&points.row(i).to_vec())) {
                put_dot(&mut img, px, py, colors[i]);
            }
        }
        return Ok(img);
    }
    for (i, r) in points.rows().into_iter().enumerate() {
        let xy = plot_xy(projection, [r[0], r[1], r[2]])?;
        if let Some((px, py)) = plot_to_pixel(&img, xy) {
            put_dot(&mut img, px, py, colors[i]);
        }
    }
    Ok(img)
}

/// Grid points on the manifold behind every pixel of a map projection, with
/// their pixel coordinates.
fn map_grid(img: &RgbImage, projection: Projection) -> Result<(Vec<(u32, u32)>, PointBatch)> {
    let (w, h) = img.dimensions();
    let mut pixels = Vec::new();
    let mut pts = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let [x, y] = pixel_to_plot(img, px, py);
            let p = match projection {
                Projection::Mollweide => inverse_mollweide([x * 2.0 * SQRT2, y * SQRT2]).map(|s| s.xyz()),
                Projection::Poincare => {
                    if x * x + y * y < 0.999 {
                        Some(HyperboloidPoint::from_poincare([x, y])?.xyz())
                    } else {
                        None
                    }
                }
                Projection::Scatter3d => bail!("density maps need a mollweide or poincare projection"),
            };
            if let Some(p) = p {
                pixels.push((px, py));
                pts.push(p);
            }
        }
    }
    let mut batch = Array2::zeros((pts.len(), 3));
    for (i, p) in pts.iter().enumerate() {
        batch.row_mut(i).assign(&ndarray::arr1(p));
    }
    Ok((pixels, batch))
}

/// Heatmap of the model's log-density over a map projection. Grid points are
/// projected onto the learned manifold before evaluation.
pub fn density_map(model: &MultiChartFlow, projection: Projection, mode: DensityMode, size: u32) -> Result<RgbImage> {
    if model.ambient_dim() != 3 || model.latent_dim() != 2 {
        bail!("density maps need a model with D = 3 and d = 2");
    }
    let mut img = canvas(projection, size);
    let (pixels, grid) = map_grid(&img, projection)?;
    let snapped = model.reconstruct(&grid)?;
    let lp = log_prob_manifold(model, &snapped, mode, HutchinsonOptions::default())?.values_lossy();
    let t = normalize(lp.as_slice().expect("contiguous"));
    for p in img.pixels_mut() {
        *p = OUTSIDE;
    }
    for ((px, py), v) in pixels.into_iter().zip(t) {
        img.put_pixel(px, py, colormap(v));
    }
    Ok(img)
}

/// Model samples in 3-D colored by their estimated log-density.
pub fn density_scatter(model: &MultiChartFlow, n: usize, seed: u64, mode: DensityMode, size: u32) -> Result<RgbImage> {
    let x = model.sample(n, seed)?;
    let lp = log_prob_manifold(model, &x, mode, HutchinsonOptions::default())?.values_lossy();
    scatter(&x, Some(lp.as_slice().expect("contiguous")), Projection::Scatter3d, size)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn mollweide_scatter_rejects_off_sphere_points() {
        let pts = ndarray::array![[0.0, 0.0, 2.0]];
        assert!(scatter(&pts, None, Projection::Mollweide, 50).is_err());
        let pts = ndarray::array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert!(scatter(&pts, None, Projection::Mollweide, 50).is_ok());
    }
}
