//! Points, exponential/logarithm maps and plot projections for the unit sphere
//! S² and the hyperboloid model of H².

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use ndarray::Array2;

use crate::error::{Error, Result};

/// A batch of points, one per row.
pub type PointBatch = Array2<f64>;

pub type Vec3 = [f64; 3];

const MANIFOLD_TOL: f64 = 1e-9;
const MOLLWEIDE_TOL: f64 = 1e-10;
const MOLLWEIDE_MAX_ITER: usize = 100;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &Vec3, y: &Vec3) -> Vec3 {
    [alpha * x[0] + y[0], alpha * x[1] + y[1], alpha * x[2] + y[2]]
}

fn scale(alpha: f64, x: &Vec3) -> Vec3 {
    [alpha * x[0], alpha * x[1], alpha * x[2]]
}

/// `-a0 b0 + a1 b1 + a2 b2`.
pub fn minkowski(a: &Vec3, b: &Vec3) -> f64 {
    -a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    pub fn new(xyz: Vec3) -> Result<Self> {
        if xyz.iter().any(|v| !v.is_finite()) || (norm(&xyz) - 1.0).abs() > MANIFOLD_TOL {
            return Err(Error::InvalidInput(format!("{xyz:?} is not on the unit sphere")));
        }
        Ok(Self(xyz))
    }

    /// Normalizes a nonzero vector onto the sphere.
    pub fn normalized(xyz: Vec3) -> Result<Self> {
        let n = norm(&xyz);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidInput("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(scale(1.0 / n, &xyz)))
    }

    /// Latitude and longitude in degrees.
    pub fn from_lat_lon(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(lat_deg.is_finite() && lon_deg.is_finite()) || lat_deg.abs() > 90.0 || lon_deg.abs() > 180.0 {
            return Err(Error::InvalidInput(format!("latitude {lat_deg} / longitude {lon_deg} out of range")));
        }
        let (phi, lam) = (lat_deg.to_radians(), lon_deg.to_radians());
        Ok(Self([lam.cos() * phi.cos(), lam.sin() * phi.cos(), phi.sin()]))
    }

    pub fn xyz(&self) -> Vec3 {
        self.0
    }

    /// Latitude and longitude in radians.
    pub fn lat_lon(&self) -> (f64, f64) {
        let [x, y, z] = self.0;
        (z.clamp(-1.0, 1.0).asin(), y.atan2(x))
    }
}

/// A point on the upper sheet of the hyperboloid `<x, x>_L = -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperboloidPoint(Vec3);

impl HyperboloidPoint {
    pub const APEX: Self = Self([1.0, 0.0, 0.0]);

    pub fn new(xyz: Vec3) -> Result<Self> {
        if xyz.iter().any(|v| !v.is_finite()) || xyz[0] <= 0.0 {
            return Err(Error::InvalidInput(format!("{xyz:?} is not on the upper hyperboloid sheet")));
        }
        let m = minkowski(&xyz, &xyz);
        if (m + 1.0).abs() > MANIFOLD_TOL * xyz[0].max(1.0).powi(2) {
            return Err(Error::InvalidInput(format!("{xyz:?} violates the Minkowski constraint")));
        }
        Ok(Self(xyz))
    }

    /// Lifts spatial coordinates `(x1, x2)` to the sheet.
    pub fn from_spatial(x1: f64, x2: f64) -> Self {
        Self([(1.0 + x1 * x1 + x2 * x2).sqrt(), x1, x2])
    }

    pub fn from_poincare(p: [f64; 2]) -> Result<Self> {
        let r2 = p[0] * p[0] + p[1] * p[1];
        if !(r2 < 1.0) {
            return Err(Error::InvalidInput("Poincaré coordinates must lie inside the unit disk".into()));
        }
        let f = 2.0 / (1.0 - r2);
        Ok(Self::from_spatial(f * p[0], f * p[1]))
    }

    pub fn xyz(&self) -> Vec3 {
        self.0
    }
}

/// Orthonormal basis of the tangent plane at `base` by Gram–Schmidt over the
/// coordinate axes, skipping the axis most aligned with `base`.
pub fn sphere_tangent_basis(base: &SpherePoint) -> (Vec3, Vec3) {
    let p = base.0;
    let skip = (0..3)
        .max_by(|&a, &b| p[a].abs().partial_cmp(&p[b].abs()).expect("finite"))
        .expect("three axes");
    let mut basis = Vec::with_capacity(2);
    for axis in (0..3).filter(|&a| a != skip) {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let mut v = axpy(-dot(&e, &p), &p, &e);
        for b in &basis {
            v = axpy(-dot(&v, b), b, &v);
        }
        basis.push(scale(1.0 / norm(&v), &v));
    }
    (basis[0], basis[1])
}

/// Minkowski-orthonormal tangent basis at `base` from the spatial axes.
pub fn hyperboloid_tangent_basis(base: &HyperboloidPoint) -> (Vec3, Vec3) {
    let p = base.0;
    let mut basis: Vec<Vec3> = Vec::with_capacity(2);
    for axis in 1..3 {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        // Projection onto the tangent space: v + <v, p>_L p.
        let mut v = axpy(minkowski(&e, &p), &p, &e);
        for b in &basis {
            v = axpy(-minkowski(&v, b), b, &v);
        }
        basis.push(scale(1.0 / minkowski(&v, &v).sqrt(), &v));
    }
    (basis[0], basis[1])
}

pub fn sphere_exp(base: &SpherePoint, v: &Vec3) -> SpherePoint {
    let p = base.0;
    let t = norm(v);
    if t == 0.0 {
        return *base;
    }
    let x = axpy(t.sin() / t, v, &scale(t.cos(), &p));
    // Renormalize to remove rounding drift.
    let n = norm(&x);
    SpherePoint(scale(1.0 / n, &x))
}

pub fn sphere_log(base: &SpherePoint, x: &SpherePoint) -> Result<Vec3> {
    let (p, q) = (base.0, x.0);
    let c = dot(&p, &q);
    let w = axpy(-c, &p, &q);
    let s = norm(&w);
    if s < 1e-15 {
        if c > 0.0 {
            return Ok([0.0; 3]);
        }
        return Err(Error::Antipodal);
    }
    let theta = s.atan2(c);
    Ok(scale(theta / s, &w))
}

pub fn sphere_distance(a: &SpherePoint, b: &SpherePoint) -> f64 {
    let c = dot(&a.0, &b.0);
    let w = axpy(-c, &a.0, &b.0);
    norm(&w).atan2(c)
}

pub fn hyperboloid_exp(base: &HyperboloidPoint, v: &Vec3) -> HyperboloidPoint {
    let p = base.0;
    let t = minkowski(v, v).max(0.0).sqrt();
    if t == 0.0 {
        return *base;
    }
    let x = axpy(t.sinh() / t, v, &scale(t.cosh(), &p));
    HyperboloidPoint::from_spatial(x[1], x[2])
}

pub fn hyperboloid_log(base: &HyperboloidPoint, x: &HyperboloidPoint) -> Vec3 {
    let (p, q) = (base.0, x.0);
    let c = -minkowski(&p, &q);
    let w = axpy(-c, &p, &q);
    let s = minkowski(&w, &w).max(0.0).sqrt();
    if s == 0.0 {
        return [0.0; 3];
    }
    scale(s.asinh() / s, &w)
}

pub fn hyperbolic_distance(a: &HyperboloidPoint, b: &HyperboloidPoint) -> f64 {
    let c = -minkowski(&a.0, &b.0);
    let w = axpy(-c, &a.0, &b.0);
    minkowski(&w, &w).max(0.0).sqrt().asinh()
}

/// Mollweide projection with unit sphere radius: `x` in `[-2√2, 2√2]`,
/// `y` in `[-√2, √2]`.
pub fn project_mollweide(p: &SpherePoint) -> Result<[f64; 2]> {
    let (phi, lam) = p.lat_lon();
    let theta = if (FRAC_PI_2 - phi.abs()) < 1e-15 {
        phi
    } else {
        let target = PI * phi.sin();
        let mut t = phi;
        let mut converged = false;
        for _ in 0..MOLLWEIDE_MAX_ITER {
            let f = 2.0 * t + (2.0 * t).sin() - target;
            let df = 2.0 + 2.0 * (2.0 * t).cos();
            if df == 0.0 {
                break;
            }
            let step = f / df;
            t -= step;
            t = t.clamp(-FRAC_PI_2, FRAC_PI_2);
            if step.abs() < MOLLWEIDE_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::ProjectionDiverged { latitude: phi });
        }
        t
    };
    Ok([2.0 * SQRT_2 / PI * lam * theta.cos(), SQRT_2 * theta.sin()])
}

/// Inverse Mollweide projection; `None` outside the map ellipse.
pub fn inverse_mollweide(xy: [f64; 2]) -> Option<SpherePoint> {
    let [x, y] = xy;
    let s = y / SQRT_2;
    if s.abs() > 1.0 {
        return None;
    }
    let theta = s.asin();
    let lam = if theta.cos() == 0.0 { 0.0 } else { PI * x / (2.0 * SQRT_2 * theta.cos()) };
    if lam.abs() > PI {
        return None;
    }
    let phi = ((2.0 * theta + (2.0 * theta).sin()) / PI).clamp(-1.0, 1.0).asin();
    SpherePoint::from_lat_lon(phi.to_degrees(), lam.to_degrees()).ok()
}

pub fn project_poincare(p: &HyperboloidPoint) -> [f64; 2] {
    let [x0, x1, x2] = p.0;
    [x1 / (1.0 + x0), x2 / (1.0 + x0)]
}

pub fn sphere_points(batch: &PointBatch) -> Result<Vec<SpherePoint>> {
    check_cols(batch, 3)?;
    batch.rows().into_iter().map(|r| SpherePoint::new([r[0], r[1], r[2]])).collect()
}

pub fn hyperboloid_points(batch: &PointBatch) -> Result<Vec<HyperboloidPoint>> {
    check_cols(batch, 3)?;
    batch.rows().into_iter().map(|r| HyperboloidPoint::new([r[0], r[1], r[2]])).collect()
}

pub(crate) fn check_cols(batch: &PointBatch, cols: usize) -> Result<()> {
    if batch.ncols() != cols {
        return Err(Error::DimensionMismatch { expected: cols, got: batch.ncols() });
    }
    Ok(())
}

pub fn to_batch(points: impl IntoIterator<Item = Vec3>) -> PointBatch {
    let flat: Vec<f64> = points.into_iter().flatten().collect();
    let n = flat.len() / 3;
    Array2::from_shape_vec((n, 3), flat).expect("rows of three")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_great_circle() {
        let north = SpherePoint::new([0.0, 0.0, 1.0]).unwrap();
        let x = sphere_exp(&north, &[FRAC_PI_2, 0.0, 0.0]);
        let e = x.xyz();
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15 && e[2].abs() < 1e-15);
    }

    #[test]
    fn antipodal_log_fails() {
        let a = SpherePoint::new([0.0, 0.0, 1.0]).unwrap();
        let b = SpherePoint::new([0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(sphere_log(&a, &b), Err(Error::Antipodal)));
        assert_eq!(sphere_log(&a, &a).unwrap(), [0.0; 3]);
    }

    #[test]
    fn tangent_bases_are_orthonormal() {
        let p = SpherePoint::normalized([0.3, -0.2, 0.9]).unwrap();
        let (a, b) = sphere_tangent_basis(&p);
        for (u, v, want) in [(a, a, 1.0), (b, b, 1.0), (a, b, 0.0), (a, p.0, 0.0), (b, p.0, 0.0)] {
            assert!((dot(&u, &v) - want).abs() < 1e-14);
        }
        let h = HyperboloidPoint::from_spatial(0.7, -1.2);
        let (a, b) = hyperboloid_tangent_basis(&h);
        for (u, v, want) in [(a, a, 1.0), (b, b, 1.0), (a, b, 0.0), (a, h.0, 0.0), (b, h.0, 0.0)] {
            assert!((minkowski(&u, &v) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mollweide_center_and_poles() {
        let c = project_mollweide(&SpherePoint::new([1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(c[0].abs() < 1e-15 && c[1].abs() < 1e-15);
        let n = project_mollweide(&SpherePoint::new([0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!((n[1] - SQRT_2).abs() < 1e-12);
        let p = SpherePoint::from_lat_lon(89.9999, 45.0).unwrap();
        assert!(project_mollweide(&p).is_ok());
    }

    #[test]
    fn mollweide_inverse_round_trip() {
        for &(lat, lon) in &[(10.0, 20.0), (-63.0, 170.0), (80.0, -120.0), (0.0, 0.0)] {
            let p = SpherePoint::from_lat_lon(lat, lon).unwrap();
            let q = inverse_mollweide(project_mollweide(&p).unwrap()).unwrap();
            assert!(sphere_distance(&p, &q) < 1e-9);
        }
        assert!(inverse_mollweide([3.0, 0.0]).is_none());
    }

    #[test]
    fn poincare_apex_and_radius() {
        assert_eq!(project_poincare(&HyperboloidPoint::APEX), [0.0, 0.0]);
        let (e1, _) = hyperboloid_tangent_basis(&HyperboloidPoint::APEX);
        let r = 1.7;
        let x = hyperboloid_exp(&HyperboloidPoint::APEX, &scale(r, &e1));
        let p = project_poincare(&x);
        assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - (r / 2.0).tanh()).abs() < 1e-12);
        let back = HyperboloidPoint::from_poincare(p).unwrap();
        assert!(hyperbolic_distance(&back, &x) < 1e-7);
    }

    #[test]
    fn lat_lon_rejects_out_of_range() {
        assert!(SpherePoint::from_lat_lon(90.5, 0.0).is_err());
        assert!(SpherePoint::from_lat_lon(0.0, -180.5).is_err());
        assert!(SpherePoint::from_lat_lon(f64::NAN, 0.0).is_err());
    }
}
