use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::Var;

/// Smallest admissible `|U_ii|` for an LU layer.
pub const LU_SINGULAR_THRESHOLD: f64 = 1e-12;

fn perm_to_param(perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((1, perm.len()), |(_, j)| perm[j] as f64)
}

fn param_to_perm(values: &Array2<f64>) -> Vec<usize> {
    values.iter().map(|&v| v as usize).collect()
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn is_permutation(values: &Array2<f64>, n: usize) -> bool {
    if values.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &v in values.iter() {
        if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < n) || seen[v as usize] {
            return false;
        }
        seen[v as usize] = true;
    }
    true
}

/// Fixed coordinate permutation: `y_j = x_{perm[j]}`.
#[derive(Debug, Clone)]
pub struct Permutation {
    pub perm: ParamId,
}

impl Permutation {
    pub fn random<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::from_indices(store, name, &perm)
    }

    pub fn from_indices(store: &mut ParamStore, name: &str, perm: &[usize]) -> Self {
        Self {
            perm: store.register(format!("{name}.perm"), ParamGroup::Fixed, perm_to_param(perm)),
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>, inverse: bool) -> (Var<'t>, Var<'t>) {
        let perm = param_to_perm(bound.store().get(self.perm));
        let cols = if inverse { invert(&perm) } else { perm };
        let rows = x.shape().0;
        let zeros = x.tape().constant(Array2::zeros((rows, 1)));
        (x.select_cols(Rc::new(cols)), zeros)
    }
}

/// Invertible linear map `y = P L U x` with `P` a fixed permutation, `L` unit
/// lower triangular and `U` upper triangular.
#[derive(Debug, Clone)]
pub struct LuLinear {
    dim: usize,
    pub lower: ParamId,
    pub upper: ParamId,
    pub perm: ParamId,
}

impl LuLinear {
    /// Starts at the identity when `random_scale` is zero; otherwise draws
    /// off-diagonal entries with that scale and diagonal magnitudes in `[0.5, 1.5]`
    /// with random signs.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        random_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut lower = Array2::zeros((dim, dim));
        let mut upper = Array2::eye(dim);
        if random_scale > 0.0 {
            perm.shuffle(rng);
            for i in 0..dim {
                for j in 0..dim {
                    let z: f64 = StandardNormal.sample(rng);
                    if j < i {
                        lower[[i, j]] = z * random_scale;
                    } else if j > i {
                        upper[[i, j]] = z * random_scale;
                    } else {
                        let mag = rng.random_range(0.5..1.5);
                        upper[[i, i]] = if rng.random_bool(0.5) { mag } else { -mag };
                    }
                }
            }
        }
        Self::from_parts(store, name, group, &perm, lower, upper)
    }

    pub fn from_parts(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        perm: &[usize],
        lower: Array2<f64>,
        upper: Array2<f64>,
    ) -> Self {
        let dim = perm.len();
        Self {
            dim,
            lower: store.register(format!("{name}.lower"), group, lower),
            upper: store.register(format!("{name}.upper"), group, upper),
            perm: store.register(format!("{name}.perm"), ParamGroup::Fixed, perm_to_param(perm)),
        }
    }

    /// The dense matrix `P L U`.
    pub fn matrix(&self, store: &ParamStore) -> Array2<f64> {
        let (l, u) = self.factors(store);
        let perm = param_to_perm(store.get(self.perm));
        let lu = l.dot(&u);
        // Row j of P L U is row perm[j] of L U.
        lu.select(ndarray::Axis(0), &perm)
    }

    fn factors(&self, store: &ParamStore) -> (Array2<f64>, Array2<f64>) {
        let n = self.dim;
        let l = Array2::from_shape_fn((n, n), |(i, j)| match i.cmp(&j) {
            std::cmp::Ordering::Greater => store.get(self.lower)[[i, j]],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        });
        let u = Array2::from_shape_fn((n, n), |(i, j)| if j >= i { store.get(self.upper)[[i, j]] } else { 0.0 });
        (l, u)
    }

    pub fn apply<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>, inverse: bool) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.dim;
        let (rows, cols) = x.shape();
        if cols != n {
            return Err(Error::DimensionMismatch { expected: n, got: cols });
        }
        let upper_val = bound.store().get(self.upper);
        for i in 0..n {
            let v = upper_val[[i, i]];
            if !v.is_finite() || v.abs() < LU_SINGULAR_THRESHOLD {
                return Err(Error::Singular { index: i, value: v });
            }
        }
        let tape = x.tape();
        let strict_lower = tape.constant(Array2::from_shape_fn((n, n), |(i, j)| if i > j { 1.0 } else { 0.0 }));
        let upper_mask = tape.constant(Array2::from_shape_fn((n, n), |(i, j)| if j >= i { 1.0 } else { 0.0 }));
        let eye = tape.constant(Array2::eye(n));
        let l = bound.param(self.lower) * strict_lower + eye;
        let u = bound.param(self.upper) * upper_mask;
        let perm = param_to_perm(bound.store().get(self.perm));
        let logdet = u.diag().abs().ln().sum().broadcast_rows(rows);
        if !inverse {
            // Row form of y = P L U x.
            let y = x
                .matmul(u.transpose())
                .matmul(l.transpose())
                .select_cols(Rc::new(perm));
            Ok((y, logdet))
        } else {
            let y = x
                .select_cols(Rc::new(invert(&perm)))
                .matmul(l.tri_inverse().transpose())
                .matmul(u.tri_inverse().transpose());
            Ok((y, -logdet))
        }
    }
}

/// Fixed elementwise affine map `y = (x - shift) / scale`, used to bring raw data
/// into the spline range.
#[derive(Debug, Clone)]
pub struct Standardize {
    pub shift: ParamId,
    pub scale: ParamId,
}

impl Standardize {
    pub fn new(store: &mut ParamStore, name: &str, shift: &[f64], scale: &[f64]) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::DimensionMismatch { expected: shift.len(), got: scale.len() });
        }
        if scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) || shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("standardization needs finite shifts and positive scales".into()));
        }
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        Ok(Self {
            shift: store.register(format!("{name}.shift"), ParamGroup::Fixed, row(shift)),
            scale: store.register(format!("{name}.scale"), ParamGroup::Fixed, row(scale)),
        })
    }

    pub fn apply<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>, inverse: bool) -> (Var<'t>, Var<'t>) {
        let rows = x.shape().0;
        let shift = bound.param(self.shift);
        let scale = bound.param(self.scale);
        let logdet = scale.ln().sum().broadcast_rows(rows);
        if !inverse {
            let y = (x.add_row(-shift)) / scale.broadcast_rows(rows);
            (y, -logdet)
        } else {
            let y = (x * scale.broadcast_rows(rows)).add_row(shift);
            (y, logdet)
        }
    }
}
