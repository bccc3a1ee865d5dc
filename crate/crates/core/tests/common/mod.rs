#![allow(dead_code)]

use multichart::flows::{Flow, FlowSpec, LinearKind};
use multichart::nn::{Activation, ConditionerSpec, OutputInit, ParamGroup, ParamStore};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(&mut r);
        scale * z
    })
}

pub fn spec(dim: usize, layers: usize, linear: LinearKind, context_dim: usize) -> FlowSpec {
    FlowSpec {
        dim,
        layers,
        bins: 8,
        range_bound: 3.0,
        linear,
        conditioner: ConditionerSpec {
            hidden_layers: 2,
            hidden_units: 16,
            activation: Activation::Tanh,
            residual_blocks: None,
            context_dim,
        },
    }
}

/// A flow with randomly initialized conditioners, so it is far from the identity.
pub fn random_flow(spec: &FlowSpec, seed: u64) -> (Flow, ParamStore) {
    random_flow_scaled(spec, seed, 0.5)
}

pub fn random_flow_scaled(spec: &FlowSpec, seed: u64, scale: f64) -> (Flow, ParamStore) {
    let mut store = ParamStore::new();
    let flow = Flow::build(spec, &mut store, "f", ParamGroup::ChartFlow, OutputInit::Random(scale), &mut rng(seed)).unwrap();
    (flow, store)
}

/// `log |det J|` of `f` at `x` from a central-difference Jacobian and a dense
/// LU determinant.
pub fn fd_logdet<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..n {
            j[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    j.determinant().abs().ln()
}

pub fn row_matrix(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &Array1<f64>) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}
