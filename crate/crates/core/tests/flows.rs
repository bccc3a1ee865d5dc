mod common;

use common::*;
use multichart::flows::{alternating_mask, rq_spline_apply, Coupling, Flow, Layer, LinearKind, LuLinear, Permutation, SplineParams, Standardize};
use multichart::nn::{Activation, ConditionerSpec, OutputInit, ParamGroup, ParamStore};
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;

fn single_layer(kind: &str, n: usize, seed: u64) -> (Flow, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = match kind {
        "coupling" => {
            let spec = ConditionerSpec {
                hidden_layers: 2,
                hidden_units: 16,
                activation: Activation::Relu,
                residual_blocks: None,
                context_dim: 0,
            };
            let c = Coupling::new(&mut store, "c", ParamGroup::ChartFlow, &alternating_mask(n, 1), 6, 3.0, &spec, OutputInit::Random(0.5), &mut r)
                .unwrap();
            Layer::Coupling(c)
        }
        "permutation" => Layer::Permutation(Permutation::random(&mut store, "p", n, &mut r)),
        "lu" => Layer::Lu(LuLinear::new(&mut store, "lu", ParamGroup::ChartFlow, n, 0.5, &mut r)),
        "standardize" => {
            let shift: Vec<f64> = (0..n).map(|i| i as f64 - 1.0).collect();
            let scale: Vec<f64> = (0..n).map(|i| 0.5 + 0.25 * i as f64).collect();
            Layer::Standardize(Standardize::new(&mut store, "s", &shift, &scale).unwrap())
        }
        _ => unreachable!(),
    };
    let mut flow = Flow::empty(n, 0);
    flow.push(layer);
    (flow, store)
}

#[test]
fn every_layer_round_trips() {
    for kind in ["coupling", "permutation", "lu", "standardize"] {
        for n in [2, 3, 14] {
            let (flow, store) = single_layer(kind, n, n as u64);
            let x = normal(500, n, 2.0, 7);
            let (y, ld_f) = flow.forward_values(&store, &x, None).unwrap();
            let (back, ld_i) = flow.inverse_values(&store, &y, None).unwrap();
            assert!(max_abs_diff(&x, &back) < 1e-8, "{kind} n={n}");
            assert!(max_abs(&(&ld_f + &ld_i)) < 1e-9, "{kind} n={n}");
        }
    }
}

#[test]
fn lu_logdet_matches_dense_determinant() {
    let n = 5;
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let lu = LuLinear::new(&mut store, "lu", ParamGroup::ChartFlow, n, 0.7, &mut r);
    let mut flow = Flow::empty(n, 0);
    flow.push(Layer::Lu(lu.clone()));
    // Dense matrix built here from the raw factors.
    let lower = store.get(lu.lower);
    let upper = store.get(lu.upper);
    let perm: Vec<usize> = store.get(lu.perm).iter().map(|&v| v as usize).collect();
    let l = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else if i > j { lower[[i, j]] } else { 0.0 });
    let u = DMatrix::from_fn(n, n, |i, j| if j >= i { upper[[i, j]] } else { 0.0 });
    let lu_dense = &l * &u;
    let m = DMatrix::from_fn(n, n, |i, j| lu_dense[(perm[i], j)]);
    let x = normal(4, n, 1.0, 9);
    let (y, ld) = flow.forward_values(&store, &x, None).unwrap();
    for row in 0..4 {
        let xv = nalgebra::DVector::from_iterator(n, x.row(row).iter().copied());
        let yv = &m * xv;
        for i in 0..n {
            assert!((yv[i] - y[[row, i]]).abs() < 1e-12);
        }
        assert!((ld[row] - m.determinant().abs().ln()).abs() < 1e-10);
    }
}

#[test]
fn composed_flow_logdet_matches_finite_differences() {
    for n in 2..=5 {
        for linear in [LinearKind::None, LinearKind::Permutation, LinearKind::Lu] {
            let (flow, store) = random_flow(&spec(n, 4, linear, 0), 11 + n as u64);
            let x = normal(20, n, 1.5, 5);
            let (_, ld) = flow.forward_values(&store, &x, None).unwrap();
            for row in 0..x.nrows() {
                let f = |p: &[f64]| flow.forward_values(&store, &row_matrix(p), None).unwrap().0.row(0).to_vec();
                let fd = fd_logdet(f, x.row(row).as_slice().unwrap(), 1e-6);
                assert!(((ld[row] - fd).exp() - 1.0).abs() < 1e-5, "n={n} {linear:?}: {} vs {fd}", ld[row]);
            }
        }
    }
}

#[test]
fn context_changes_the_map_but_not_invertibility() {
    let (flow, store) = random_flow(&spec(3, 4, LinearKind::Lu, 2), 21);
    let x = normal(200, 3, 1.0, 1);
    let c1 = normal(200, 2, 1.0, 2);
    let c2 = normal(200, 2, 1.0, 3);
    let (y1, _) = flow.forward_values(&store, &x, Some(&c1)).unwrap();
    let (y2, _) = flow.forward_values(&store, &x, Some(&c2)).unwrap();
    assert!(max_abs_diff(&y1, &y2) > 1e-3);
    let (back, _) = flow.inverse_values(&store, &y1, Some(&c1)).unwrap();
    assert!(max_abs_diff(&x, &back) < 1e-8);
}

#[test]
fn spline_tails_are_identity() {
    let params = SplineParams::from_unnormalized(&[0.3, -1.0, 0.4], &[1.0, 0.2, -0.5], &[0.7, -0.2], 2.0).unwrap();
    let (y, ld) = rq_spline_apply(&[-5.0, 2.5, 100.0], &params, false).unwrap();
    assert_eq!(y, vec![-5.0, 2.5, 100.0]);
    assert!(ld.iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_splines_are_monotone_bijections(
        w in prop::collection::vec(-3.0..3.0f64, 5),
        h in prop::collection::vec(-3.0..3.0f64, 5),
        d in prop::collection::vec(-3.0..3.0f64, 4),
        xs in prop::collection::vec(-4.0..4.0f64, 1..20),
    ) {
        let params = SplineParams::from_unnormalized(&w, &h, &d, 3.0).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let (y, ld) = rq_spline_apply(&sorted, &params, false).unwrap();
        for k in 1..y.len() {
            prop_assert!(y[k] >= y[k - 1]);
        }
        let (back, ld_inv) = rq_spline_apply(&y, &params, true).unwrap();
        for k in 0..y.len() {
            prop_assert!((back[k] - sorted[k]).abs() < 1e-9);
            prop_assert!((ld[k] + ld_inv[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn composed_flows_round_trip(seed in 0u64..1000, n in 2usize..6) {
        let (flow, store) = random_flow(&spec(n, 3, LinearKind::Lu, 0), seed);
        let x = normal(16, n, 2.0, seed + 1);
        let (y, _) = flow.forward_values(&store, &x, None).unwrap();
        let (back, _) = flow.inverse_values(&store, &y, None).unwrap();
        prop_assert!(max_abs_diff(&x, &back) < 1e-7);
    }
}

#[test]
fn non_finite_input_is_reported() {
    let (flow, store) = random_flow(&spec(2, 2, LinearKind::None, 0), 0);
    let mut x = Array2::zeros((2, 2));
    x[[1, 0]] = f64::NAN;
    assert!(flow.forward_values(&store, &x, None).is_err());
}
