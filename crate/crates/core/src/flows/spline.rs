//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! The spline is built from `K` bins with positive widths and heights and
//! `K + 1` positive knot derivatives. The outer derivatives are pinned to 1 so
//! the map joins the identity tails with a continuous first derivative.

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{concat_cols, Tape, Var};

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Normalized spline parameters for a single scalar transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineParams {
    pub widths: Vec<f64>,
    pub heights: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub range_bound: f64,
}

impl SplineParams {
    /// The identity spline with `bins` equal bins.
    pub fn identity(bins: usize, range_bound: f64) -> Self {
        let w = 2.0 * range_bound / bins as f64;
        Self {
            widths: vec![w; bins],
            heights: vec![w; bins],
            derivatives: vec![1.0; bins + 1],
            range_bound,
        }
    }

    /// Normalizes unconstrained values the same way coupling layers do.
    pub fn from_unnormalized(
        raw_widths: &[f64],
        raw_heights: &[f64],
        raw_derivatives: &[f64],
        range_bound: f64,
    ) -> Result<Self> {
        let k = raw_widths.len();
        if raw_heights.len() != k || raw_derivatives.len() + 1 != k {
            return Err(Error::InvalidInput(format!(
                "expected {k} widths/heights and {} interior derivatives",
                k.saturating_sub(1)
            )));
        }
        let tape = Tape::new();
        let row = |v: &[f64]| tape.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
        let knots = Knots::from_raw(row(raw_widths), row(raw_heights), row(raw_derivatives), range_bound);
        let cw = knots.cw.value();
        let ch = knots.ch.value();
        let d = knots.d.value();
        Ok(Self {
            widths: (0..k).map(|i| cw[[0, i + 1]] - cw[[0, i]]).collect(),
            heights: (0..k).map(|i| ch[[0, i + 1]] - ch[[0, i]]).collect(),
            derivatives: d.row(0).to_vec(),
            range_bound,
        })
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.widths.len();
        let all = self
            .widths
            .iter()
            .chain(&self.heights)
            .chain(&self.derivatives)
            .chain(std::iter::once(&self.range_bound));
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spline parameters".into()));
        }
        if k == 0 || self.heights.len() != k || self.derivatives.len() != k + 1 {
            return Err(Error::InvalidInput(format!(
                "spline needs K widths, K heights and K+1 derivatives (got {}, {}, {})",
                k,
                self.heights.len(),
                self.derivatives.len()
            )));
        }
        if self.range_bound <= 0.0 {
            return Err(Error::InvalidInput("spline range bound must be positive".into()));
        }
        if self.widths.iter().chain(&self.heights).chain(&self.derivatives).any(|&v| v <= 0.0) {
            return Err(Error::InvalidInput("spline bins and derivatives must be positive".into()));
        }
        let span = 2.0 * self.range_bound;
        for (name, v) in [("widths", &self.widths), ("heights", &self.heights)] {
            let total: f64 = v.iter().sum();
            if (total - span).abs() > 1e-9 * span {
                return Err(Error::InvalidInput(format!("spline {name} sum to {total}, expected {span}")));
            }
        }
        Ok(())
    }
}

/// Knot positions and derivatives for a batch of splines (one per row).
pub struct Knots<'t> {
    /// Cumulative knot abscissae, `R x (K+1)`, from `-B` to `B`.
    pub cw: Var<'t>,
    /// Cumulative knot ordinates, `R x (K+1)`.
    pub ch: Var<'t>,
    /// Knot derivatives, `R x (K+1)`.
    pub d: Var<'t>,
    pub bound: f64,
}

impl<'t> Knots<'t> {
    /// Softmax-normalized bins (floored at [`MIN_BIN_WIDTH`] of the range) and
    /// softplus derivatives (floored at [`MIN_DERIVATIVE`]). Zero inputs give the identity.
    pub fn from_raw(raw_w: Var<'t>, raw_h: Var<'t>, raw_d: Var<'t>, bound: f64) -> Self {
        let tape = raw_w.tape();
        let (rows, k) = raw_w.shape();
        let span = 2.0 * bound;
        let cumulative = |raw: Var<'t>, min: f64| {
            let frac = raw.softmax_rows() * (1.0 - min * k as f64) + min;
            frac.cumsum_pad() * span - bound
        };
        let cw = cumulative(raw_w, MIN_BIN_WIDTH);
        let ch = cumulative(raw_h, MIN_BIN_HEIGHT);
        let shift = ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln();
        let inner = (raw_d + shift).softplus() + MIN_DERIVATIVE;
        let ones = tape.constant(Array2::ones((rows, 1)));
        let d = if k > 1 {
            concat_cols(&[ones, inner, ones])
        } else {
            concat_cols(&[ones, ones])
        };
        Self { cw, ch, d, bound }
    }

    /// Knots from explicit parameters, repeated over `rows`.
    pub fn from_params(tape: &'t Tape, params: &SplineParams, rows: usize) -> Self {
        let k = params.bins();
        let b = params.range_bound;
        let cumulative = |v: &[f64]| {
            let mut out = Array2::zeros((rows, k + 1));
            for r in 0..rows {
                let mut acc = -b;
                out[[r, 0]] = acc;
                for (i, x) in v.iter().enumerate() {
                    acc += x;
                    out[[r, i + 1]] = acc;
                }
                out[[r, k]] = b;
            }
            tape.constant(out)
        };
        let d = Array2::from_shape_fn((rows, k + 1), |(_, i)| params.derivatives[i]);
        Self {
            cw: cumulative(&params.widths),
            ch: cumulative(&params.heights),
            d: tape.constant(d),
            bound: b,
        }
    }
}

/// Index of the bin containing `v` given the row of cumulative knots.
fn search_bin(knots: ndarray::ArrayView1<f64>, v: f64) -> usize {
    let k = knots.len() - 1;
    let mut idx = 0;
    for j in 1..k {
        if v >= knots[j] {
            idx = j;
        } else {
            break;
        }
    }
    idx
}

/// Applies the spline to an `R x 1` column (one spline per row). Returns the
/// transformed column and `log |dy/dx|` (negated for the inverse direction).
pub fn apply<'t>(x: Var<'t>, knots: &Knots<'t>, inverse: bool) -> (Var<'t>, Var<'t>) {
    let tape = x.tape();
    let xv = x.value();
    let rows = xv.nrows();
    let b = knots.bound;
    let inside: Rc<Vec<bool>> = Rc::new(xv.column(0).iter().map(|&v| v >= -b && v <= b).collect());
    let zeros = tape.constant(Array2::zeros((rows, 1)));
    let xs = x.where_rows(Rc::clone(&inside), zeros);
    let xsv = xs.value();

    let search = if inverse { knots.ch.value() } else { knots.cw.value() };
    let idx: Vec<usize> = (0..rows).map(|r| search_bin(search.row(r), xsv[[r, 0]])).collect();
    let idx1: Rc<Vec<usize>> = Rc::new(idx.iter().map(|i| i + 1).collect());
    let idx = Rc::new(idx);

    let xk = knots.cw.gather_per_row(Rc::clone(&idx));
    let w = knots.cw.gather_per_row(Rc::clone(&idx1)) - xk;
    let yk = knots.ch.gather_per_row(Rc::clone(&idx));
    let h = knots.ch.gather_per_row(Rc::clone(&idx1)) - yk;
    let dk = knots.d.gather_per_row(idx);
    let dk1 = knots.d.gather_per_row(idx1);
    let delta = h / w;
    let slope_sum = dk + dk1 - delta * 2.0;

    let (out, logdet) = if !inverse {
        let theta = (xs - xk) / w;
        let t1mt = theta * (1.0 - theta);
        let num = h * (delta * theta.square() + dk * t1mt);
        let den = delta + slope_sum * t1mt;
        let y = yk + num / den;
        let dnum = delta.square() * (dk1 * theta.square() + delta * t1mt * 2.0 + dk * (1.0 - theta).square());
        (y, dnum.ln() - den.ln() * 2.0)
    } else {
        let yd = xs - yk;
        let a = yd * slope_sum + h * (delta - dk);
        let bq = h * dk - yd * slope_sum;
        let c = -(delta * yd);
        let disc = (bq.square() - a * c * 4.0).relu();
        let root = (c * 2.0) / (-bq - disc.sqrt());
        let xo = root * w + xk;
        let t1mt = root * (1.0 - root);
        let den = delta + slope_sum * t1mt;
        let dnum = delta.square() * (dk1 * root.square() + delta * t1mt * 2.0 + dk * (1.0 - root).square());
        (xo, den.ln() * 2.0 - dnum.ln())
    };
    let y = out.where_rows(Rc::clone(&inside), x);
    let ld = logdet.where_rows(inside, zeros);
    (y, ld)
}

/// Evaluates one spline on a batch of scalars.
pub fn rq_spline_apply(x: &[f64], params: &SplineParams, inverse: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline input".into()));
    }
    if x.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let tape = Tape::new();
    let knots = Knots::from_params(&tape, params, x.len());
    let xv = tape.constant(Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column"));
    let (y, ld) = apply(xv, &knots, inverse);
    Ok((y.value().iter().copied().collect(), ld.value().iter().copied().collect()))
}
