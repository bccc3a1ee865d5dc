//! Parameter storage and the small networks that parameterize coupling layers.

use std::cell::RefCell;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};

/// Which part of the model a parameter belongs to. Training phases select
/// trainable parameters by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    ChartFlow,
    Embeddings,
    BaseFlow,
    /// Structural tensors (permutations, centers, standardization). Never trained.
    Fixed,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::ChartFlow => 0,
            ParamGroup::Embeddings => 1,
            ParamGroup::BaseFlow => 2,
            ParamGroup::Fixed => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamGroup::ChartFlow,
            1 => ParamGroup::Embeddings,
            2 => ParamGroup::BaseFlow,
            3 => ParamGroup::Fixed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

/// Flat registry of every tensor in a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces tensor values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len(), "store layouts differ");
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            debug_assert_eq!(dst.name, src.name);
            dst.value.assign(&src.value);
        }
    }

    /// True when every tensor in `group` is bit-identical between the stores.
    pub fn group_bits_equal(&self, other: &ParamStore, group: ParamGroup) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .filter(|(a, _)| a.group == group)
                .all(|(a, b)| {
                    a.value.dim() == b.value.dim()
                        && a.value
                            .iter()
                            .zip(b.value.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Binds a [`ParamStore`] to a tape. Parameters in the trainable groups become
/// gradient-carrying leaves, all others are constants.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Vec<ParamGroup>,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Bound<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: &[ParamGroup]) -> Self {
        Self {
            tape,
            store,
            trainable: trainable.to_vec(),
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binding with every parameter constant (evaluation).
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, &[])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = if self.trainable.contains(&p.group) {
            self.tape.variable(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter, indexed like the store.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Array2<f64>>> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = (*v)?;
                if !self.trainable.contains(&self.store.params[i].group) {
                    return None;
                }
                grads.get(v).cloned()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// How the last layer of a conditioner is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// All zeros: every flow starts as the identity map.
    Zero,
    /// Gaussian weights and biases with the given standard deviation.
    Random(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionerSpec {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    /// When set, a residual network with this many blocks of `hidden_layers` layers each.
    pub residual_blocks: Option<usize>,
    pub context_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng));
        let b = Array2::from_shape_simple_fn((1, fan_out), || dist.sample(rng));
        Self {
            weight: store.register(format!("{name}.weight"), group, w),
            bias: store.register(format!("{name}.bias"), group, b),
        }
    }

    fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        init: OutputInit,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            OutputInit::Zero => (Array2::zeros((fan_in, fan_out)), Array2::zeros((1, fan_out))),
            OutputInit::Random(std) => {
                let mut draw = || {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                };
                (
                    Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw),
                    Array2::from_shape_simple_fn((1, fan_out), &mut draw),
                )
            }
        };
        Self {
            weight: store.register(format!("{name}.weight"), group, w),
            bias: store.register(format!("{name}.bias"), group, b),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.matmul(bound.param(self.weight)).add_row(bound.param(self.bias))
    }
}

/// Maps coupling-layer inputs (identity coordinates, optionally with a context)
/// to raw spline parameters.
#[derive(Debug, Clone)]
pub struct Conditioner {
    activation: Activation,
    input: Linear,
    hidden: Vec<Linear>,
    residual: Option<Vec<Vec<Linear>>>,
    output: Linear,
}

impl Conditioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        spec: &ConditionerSpec,
        in_features: usize,
        out_features: usize,
        output_init: OutputInit,
        rng: &mut R,
    ) -> Self {
        let units = spec.hidden_units;
        let input_dim = in_features + spec.context_dim;
        let input = Linear::new(store, &format!("{name}.input"), group, input_dim, units, rng);
        let (hidden, residual) = match spec.residual_blocks {
            Some(blocks) => {
                let blocks = (0..blocks)
                    .map(|b| {
                        (0..spec.hidden_layers.max(1))
                            .map(|l| {
                                let lname = format!("{name}.block{b}.layer{l}");
                                if l + 1 == spec.hidden_layers.max(1) {
                                    // Residual branches start near zero.
                                    Linear::with_init(
                                        store,
                                        &lname,
                                        group,
                                        units,
                                        units,
                                        OutputInit::Random(1e-3),
                                        rng,
                                    )
                                } else {
                                    Linear::new(store, &lname, group, units, units, rng)
                                }
                            })
                            .collect()
                    })
                    .collect();
                (Vec::new(), Some(blocks))
            }
            None => {
                let hidden = (1..spec.hidden_layers.max(1))
                    .map(|l| Linear::new(store, &format!("{name}.hidden{l}"), group, units, units, rng))
                    .collect();
                (hidden, None)
            }
        };
        let output = Linear::with_init(
            store,
            &format!("{name}.output"),
            group,
            units,
            out_features,
            output_init,
            rng,
        );
        Self {
            activation: spec.activation,
            input,
            hidden,
            residual,
            output,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let act = self.activation;
        let mut h = self.input.forward(bound, x);
        match &self.residual {
            Some(blocks) => {
                for block in blocks {
                    let mut t = h;
                    for layer in block {
                        t = layer.forward(bound, act.apply(t));
                    }
                    h = h + t;
                }
                h = act.apply(h);
            }
            None => {
                h = act.apply(h);
                for layer in &self.hidden {
                    h = act.apply(layer.forward(bound, h));
                }
            }
        }
        self.output.forward(bound, h)
    }
}
