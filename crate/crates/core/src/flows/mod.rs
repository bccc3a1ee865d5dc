//! Invertible maps of `R^n` with exact log-determinants.
//!
//! A [`Flow`] is a list of layers applied in order by [`Flow::forward`] and in
//! reverse by [`Flow::inverse`]. Coupling layers may read a per-row context
//! (the chart index embedding in the atlas).

pub mod coupling;
pub mod linear;
pub mod spline;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConditionerSpec, OutputInit, ParamGroup, ParamStore};
use crate::tape::{Tape, Var};

pub use coupling::{alternating_mask, Coupling};
pub use linear::{LuLinear, Permutation, Standardize};
pub use spline::{rq_spline_apply, SplineParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    None,
    Permutation,
    Lu,
}

/// Structural description of a stack of coupling layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub dim: usize,
    pub layers: usize,
    pub bins: usize,
    pub range_bound: f64,
    pub linear: LinearKind,
    pub conditioner: ConditionerSpec,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Coupling(Coupling),
    Permutation(Permutation),
    Lu(LuLinear),
    Standardize(Standardize),
}

#[derive(Debug, Clone)]
pub struct Flow {
    dim: usize,
    context_dim: usize,
    layers: Vec<Layer>,
}

impl Flow {
    pub fn empty(dim: usize, context_dim: usize) -> Self {
        Self {
            dim,
            context_dim,
            layers: Vec::new(),
        }
    }

    /// Couplings with alternating masks, interspersed with the spec's linear layer.
    pub fn build<R: Rng + ?Sized>(
        spec: &FlowSpec,
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        init: OutputInit,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::InvalidInput("flow dimension must be positive".into()));
        }
        let mut flow = Self::empty(spec.dim, spec.conditioner.context_dim);
        for l in 0..spec.layers {
            let mask = alternating_mask(spec.dim, l);
            let coupling = Coupling::new(
                store,
                &format!("{name}.coupling{l}"),
                group,
                &mask,
                spec.bins,
                spec.range_bound,
                &spec.conditioner,
                init,
                rng,
            )?;
            flow.layers.push(Layer::Coupling(coupling));
            if l + 1 < spec.layers {
                match spec.linear {
                    LinearKind::None => {}
                    LinearKind::Permutation => flow.layers.push(Layer::Permutation(Permutation::random(
                        store,
                        &format!("{name}.permutation{l}"),
                        spec.dim,
                        rng,
                    ))),
                    LinearKind::Lu => {
                        let scale = match init {
                            OutputInit::Zero => 0.0,
                            OutputInit::Random(s) => s,
                        };
                        flow.layers.push(Layer::Lu(LuLinear::new(
                            store,
                            &format!("{name}.lu{l}"),
                            group,
                            spec.dim,
                            scale,
                            rng,
                        )))
                    }
                }
            }
        }
        Ok(flow)
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn prepend(&mut self, layer: Layer) {
        self.layers.insert(0, layer);
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn apply_layer<'t>(
        layer: &Layer,
        bound: &Bound<'t, '_>,
        x: Var<'t>,
        context: Option<Var<'t>>,
        inverse: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        match layer {
            Layer::Coupling(c) => c.apply(bound, x, context, inverse),
            Layer::Permutation(p) => Ok(p.apply(bound, x, inverse)),
            Layer::Lu(lu) => lu.apply(bound, x, inverse),
            Layer::Standardize(s) => Ok(s.apply(bound, x, inverse)),
        }
    }

    fn run<'t>(
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
        if let Some(c) = context {
            if c.shape().0 != rows {
                return Err(Error::DimensionMismatch { expected: rows, got: c.shape().0 });
            }
        }
        let mut h = x;
        let mut total: Option<Var<'t>> = None;
        let mut step = |layer: &Layer, h: &mut Var<'t>| -> Result<()> {
            let (y, ld) = Self::apply_layer(layer, bound, *h, context, inverse)?;
            *h = y;
            total = Some(match total {
                Some(t) => t + ld,
                None => ld,
            });
            Ok(())
        };
        if inverse {
            for layer in self.layers.iter().rev() {
                step(layer, &mut h)?;
            }
        } else {
            for layer in &self.layers {
                step(layer, &mut h)?;
            }
        }
        let total = total.unwrap_or_else(|| x.tape().constant(Array2::zeros((rows, 1))));
        Ok((h, total))
    }

    /// Forward map with per-row log-determinant (`rows x 1`).
    pub fn forward<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>, context: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
        self.run(bound, x, context, false)
    }

    /// Inverse map with the log-determinant of the inverse.
    pub fn inverse<'t>(&self, bound: &Bound<'t, '_>, y: Var<'t>, context: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
        self.run(bound, y, context, true)
    }

    fn values(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        context: Option<&Array2<f64>>,
        inverse: bool,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, store);
        let xv = tape.constant(x.clone());
        let cv = context.map(|c| tape.constant(c.clone()));
        let (y, ld) = self.run(&bound, xv, cv, inverse)?;
        let y = (*y.value()).clone();
        let ld = ld.value().column(0).to_owned();
        Ok((y, ld))
    }

    /// Gradient-free forward evaluation on plain arrays.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        context: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        self.values(store, x, context, false)
    }

    pub fn inverse_values(
        &self,
        store: &ParamStore,
        y: &Array2<f64>,
        context: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        self.values(store, y, context, true)
    }
}
