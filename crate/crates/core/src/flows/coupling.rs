use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use super::spline::{self, Knots};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conditioner, ConditionerSpec, OutputInit, ParamGroup, ParamStore};
use crate::tape::{concat_cols, Var};

/// Binary mask for coupling layer `layer` over `dim` coordinates: coordinates
/// with `(j + layer)` odd are transformed, the rest pass through. A single
/// coordinate is always transformed.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<bool> {
    if dim == 1 {
        return vec![true];
    }
    (0..dim).map(|j| (j + layer) % 2 == 1).collect()
}

/// Rational-quadratic spline coupling layer with optional context input.
#[derive(Debug, Clone)]
pub struct Coupling {
    dim: usize,
    identity_idx: Vec<usize>,
    transform_idx: Vec<usize>,
    restore: Vec<usize>,
    bins: usize,
    bound: f64,
    context_dim: usize,
    conditioner: Conditioner,
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        mask: &[bool],
        bins: usize,
        bound: f64,
        conditioner: &ConditionerSpec,
        init: OutputInit,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = mask.len();
        let transform_idx: Vec<usize> = (0..dim).filter(|&j| mask[j]).collect();
        let identity_idx: Vec<usize> = (0..dim).filter(|&j| !mask[j]).collect();
        if transform_idx.is_empty() {
            return Err(Error::InvalidInput("coupling mask transforms no coordinates".into()));
        }
        if bins == 0 || bound <= 0.0 || !bound.is_finite() {
            return Err(Error::InvalidInput("coupling needs at least one bin and a positive range".into()));
        }
        let order: Vec<usize> = identity_idx.iter().chain(&transform_idx).copied().collect();
        let mut restore = vec![0; dim];
        for (pos, &j) in order.iter().enumerate() {
            restore[j] = pos;
        }
        let in_features = identity_idx.len().max(usize::from(identity_idx.is_empty() && conditioner.context_dim == 0));
        let out_features = transform_idx.len() * (3 * bins - 1);
        let conditioner_spec_ctx = conditioner.context_dim;
        let conditioner = Conditioner::new(store, name, group, conditioner, in_features, out_features, init, rng);
        Ok(Self {
            dim,
            identity_idx,
            transform_idx,
            restore,
            bins,
            bound,
            context_dim: conditioner_spec_ctx,
            conditioner,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.dim).map(|j| self.transform_idx.contains(&j)).collect()
    }

    pub fn apply<'t>(
        &self,
        bound: &Bound<'t, '_>,
        x: Var<'t>,
        context: Option<Var<'t>>,
        inverse: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (rows, cols) = x.shape();
        if cols != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: cols });
        }
        let tape = x.tape();
        let xa = x.select_cols(Rc::new(self.identity_idx.clone()));
        let xb = x.select_cols(Rc::new(self.transform_idx.clone()));
        let mut inputs = Vec::with_capacity(2);
        if !self.identity_idx.is_empty() {
            inputs.push(xa);
        }
        if context.is_none() && self.context_dim > 0 {
            return Err(Error::InvalidInput(format!(
                "coupling layer expects a {}-dimensional context",
                self.context_dim
            )));
        }
        if let Some(c) = context {
            if c.shape().1 != self.context_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.context_dim,
                    got: c.shape().1,
                });
            }
            inputs.push(c);
        }
        if inputs.is_empty() {
            inputs.push(tape.constant(Array2::zeros((rows, 1))));
        }
        let cin = if inputs.len() == 1 { inputs[0] } else { concat_cols(&inputs) };
        let raw = self.conditioner.forward(bound, cin);
        if raw.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling spline parameters".into()));
        }
        let m = self.transform_idx.len();
        let k = self.bins;
        let raw = raw.reshape(rows * m, 3 * k - 1);
        let knots = Knots::from_raw(raw.cols(0..k), raw.cols(k..2 * k), raw.cols(2 * k..3 * k - 1), self.bound);
        let (yb, ld) = spline::apply(xb.reshape(rows * m, 1), &knots, inverse);
        let yb = yb.reshape(rows, m);
        let ld = ld.reshape(rows, m).sum_cols();
        let y = concat_cols(&[xa, yb]).select_cols(Rc::new(self.restore.clone()));
        Ok((y, ld))
    }
}
