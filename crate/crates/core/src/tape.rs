//! A small define-by-run automatic differentiation tape over batched 2-D arrays.
//!
//! Every value is an `Array2<f64>` whose rows are batch entries. Operations are
//! recorded eagerly; [`Tape::backward`] runs reverse mode (vector-Jacobian
//! products) and [`Tape::jvp`] runs forward mode (Jacobian-vector products)
//! over the recorded graph. Nodes that do not depend on a gradient-requiring
//! leaf are skipped in the reverse sweep.
//!
//! A tape is single-threaded; create one per thread or per batch.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Abs(usize),
    SoftmaxRows(usize),
    CumsumPad(usize),
    GatherPerRow(usize, Rc<Vec<usize>>),
    SelectCols(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Where(Rc<Vec<bool>>, usize, usize),
    SumCols(usize),
    SumAll(usize),
    MeanAll(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Transpose(usize),
    TriInverse(usize),
    Diag(usize),
    BroadcastRows(usize),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.nrows(), v.ncols())
    }
}

/// Reverse-mode result: gradient of the seeded output with respect to each node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Forward-mode result: tangent of each node given the seeded input tangents.
pub struct Tangents {
    tangents: Vec<Option<Array2<f64>>>,
}

impl Tangents {
    /// Tangent of `var`; `None` means identically zero.
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.tangents.get(var.id).and_then(|t| t.as_ref())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn cumsum_pad(a: &Array2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((r, c + 1));
    for i in 0..r {
        let mut acc = 0.0;
        for j in 0..c {
            acc += a[[i, j]];
            out[[i, j + 1]] = acc;
        }
    }
    out
}

/// Inverse of a triangular matrix by substitution; `lower` selects the structure.
fn tri_inverse(a: &Array2<f64>, lower: bool) -> Array2<f64> {
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        // Solve A x = e_col.
        if lower {
            for i in 0..n {
                let mut acc = if i == col { 1.0 } else { 0.0 };
                for k in 0..i {
                    acc -= a[[i, k]] * inv[[k, col]];
                }
                inv[[i, col]] = acc / a[[i, i]];
            }
        } else {
            for i in (0..n).rev() {
                let mut acc = if i == col { 1.0 } else { 0.0 };
                for k in i + 1..n {
                    acc -= a[[i, k]] * inv[[k, col]];
                }
                inv[[i, col]] = acc / a[[i, i]];
            }
        }
    }
    inv
}

fn is_lower_triangular(a: &Array2<f64>) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| a[[i, j]] == 0.0))
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that participates in reverse-mode differentiation.
    pub fn variable(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as constant by reverse mode. Forward mode may still seed it.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn value_of(&self, id: usize) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: Var<'_>, value: Array2<f64>, op: Op) -> Var<'_> {
        let g = self.grad_of(a.id);
        self.push(value, op, g)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, value: Array2<f64>, op: Op) -> Var<'_> {
        let g = self.grad_of(a.id) || self.grad_of(b.id);
        self.push(value, op, g)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var<'_>, seed: Array2<f64>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.id + 1];
        assert_eq!(
            seed.dim(),
            nodes[output.id].value.dim(),
            "seed shape must match output"
        );
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Array2<f64> { &nodes[i].value };
            let wants = |i: usize| nodes[i].needs_grad;
            macro_rules! send {
                ($i:expr, $g:expr) => {
                    if wants($i) {
                        let gi = $g;
                        accumulate(&mut grads[$i], gi);
                    }
                };
            }
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    send!(*a, g.dot(&val(*b).t()));
                    send!(*b, val(*a).t().dot(&g));
                }
                Op::AddRow(a, b) => {
                    send!(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send!(*a, g.clone());
                }
                Op::Add(a, b) => {
                    send!(*a, g.clone());
                    send!(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send!(*a, g.clone());
                    send!(*b, -&g);
                }
                Op::Mul(a, b) => {
                    send!(*a, &g * val(*b));
                    send!(*b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    send!(*a, &g / bv);
                    send!(*b, -(&g * &*node.value) / bv);
                }
                Op::Scale(a, c) => send!(*a, &g * *c),
                Op::Offset(a) => send!(*a, g.clone()),
                Op::Exp(a) => send!(*a, &g * &*node.value),
                Op::Log(a) => send!(*a, &g / val(*a)),
                Op::Sqrt(a) => send!(*a, &g / &(&*node.value * 2.0)),
                Op::Square(a) => send!(*a, &g * &(val(*a) * 2.0)),
                Op::Tanh(a) => send!(*a, &g * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Relu(a) => send!(
                    *a,
                    &g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })
                ),
                Op::Softplus(a) => send!(*a, &g * &val(*a).mapv(sigmoid)),
                Op::Abs(a) => send!(*a, &g * &val(*a).mapv(|x| x.signum())),
                Op::SoftmaxRows(a) => {
                    let sm = &*node.value;
                    let dot = (&g * sm).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send!(*a, sm * &(&g - &dot));
                }
                Op::CumsumPad(a) => {
                    let (r, c) = val(*a).dim();
                    let mut ga = Array2::zeros((r, c));
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in (0..c).rev() {
                            acc += g[[i, j + 1]];
                            ga[[i, j]] = acc;
                        }
                    }
                    send!(*a, ga);
                }
                Op::GatherPerRow(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] += g[[r, 0]];
                    }
                    send!(*a, ga);
                }
                Op::SelectCols(a, cols) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut dst = ga.column_mut(c);
                        dst += &g.column(j);
                    }
                    send!(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        send!(p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).dim();
                    let ga = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape preserves size");
                    send!(*a, ga);
                }
                Op::Where(mask, a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            gb.row_mut(r).fill(0.0);
                        } else {
                            ga.row_mut(r).fill(0.0);
                        }
                    }
                    send!(*a, ga);
                    send!(*b, gb);
                }
                Op::SumCols(a) => {
                    let c = val(*a).ncols();
                    let ga = g.broadcast((g.nrows(), c)).expect("column broadcast").to_owned();
                    send!(*a, ga);
                }
                Op::SumAll(a) => {
                    send!(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len() as f64;
                    send!(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    send!(*a, ga);
                }
                Op::Transpose(a) => send!(*a, g.t().to_owned()),
                Op::TriInverse(a) => {
                    let y = &*node.value;
                    send!(*a, -(y.t().dot(&g).dot(&y.t())));
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut ga = Array2::zeros((n, n));
                    for i in 0..n {
                        ga[[i, i]] = g[[0, i]];
                    }
                    send!(*a, ga);
                }
                Op::BroadcastRows(a) => {
                    send!(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
        }
        Gradients { grads }
    }

    /// Forward-mode sweep. `seeds` pairs input nodes with their tangents; every
    /// node recorded after the earliest seed receives a tangent (or `None` for zero).
    pub fn jvp(&self, seeds: &[(Var<'_>, Array2<f64>)]) -> Tangents {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut t: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut start = n;
        for (v, tan) in seeds {
            assert_eq!(tan.dim(), nodes[v.id].value.dim(), "tangent shape mismatch");
            t[v.id] = Some(tan.clone());
            start = start.min(v.id);
        }
        let seeded: Vec<usize> = seeds.iter().map(|(v, _)| v.id).collect();
        for id in start..n {
            if seeded.contains(&id) {
                continue;
            }
            let node = &nodes[id];
            let val = |i: usize| -> &Array2<f64> { &nodes[i].value };
            let out: Option<Array2<f64>> = match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => match (&t[*a], &t[*b]) {
                    (None, None) => None,
                    (Some(da), None) => Some(da.dot(val(*b))),
                    (None, Some(db)) => Some(val(*a).dot(db)),
                    (Some(da), Some(db)) => Some(da.dot(val(*b)) + val(*a).dot(db)),
                },
                Op::AddRow(a, b) => match (&t[*a], &t[*b]) {
                    (None, None) => None,
                    (Some(da), None) => Some(da.clone()),
                    (None, Some(db)) => Some(
                        db.broadcast(node.value.dim()).expect("row broadcast").to_owned(),
                    ),
                    (Some(da), Some(db)) => Some(da + db),
                },
                Op::Add(a, b) => match (&t[*a], &t[*b]) {
                    (None, None) => None,
                    (Some(da), None) => Some(da.clone()),
                    (None, Some(db)) => Some(db.clone()),
                    (Some(da), Some(db)) => Some(da + db),
                },
                Op::Sub(a, b) => match (&t[*a], &t[*b]) {
                    (None, None) => None,
                    (Some(da), None) => Some(da.clone()),
                    (None, Some(db)) => Some(-db),
                    (Some(da), Some(db)) => Some(da - db),
                },
                Op::Mul(a, b) => match (&t[*a], &t[*b]) {
                    (None, None) => None,
                    (Some(da), None) => Some(da * val(*b)),
                    (None, Some(db)) => Some(val(*a) * db),
                    (Some(da), Some(db)) => Some(da * val(*b) + val(*a) * db),
                },
                Op::Div(a, b) => {
                    let y = &*node.value;
                    let bv = val(*b);
                    match (&t[*a], &t[*b]) {
                        (None, None) => None,
                        (Some(da), None) => Some(da / bv),
                        (None, Some(db)) => Some(-(y * db) / bv),
                        (Some(da), Some(db)) => Some((da - &(y * db)) / bv),
                    }
                }
                Op::Scale(a, c) => t[*a].as_ref().map(|d| d * *c),
                Op::Offset(a) => t[*a].clone(),
                Op::Exp(a) => t[*a].as_ref().map(|d| d * &*node.value),
                Op::Log(a) => t[*a].as_ref().map(|d| d / val(*a)),
                Op::Sqrt(a) => t[*a].as_ref().map(|d| d / &(&*node.value * 2.0)),
                Op::Square(a) => t[*a].as_ref().map(|d| d * &(val(*a) * 2.0)),
                Op::Tanh(a) => t[*a]
                    .as_ref()
                    .map(|d| d * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Relu(a) => t[*a]
                    .as_ref()
                    .map(|d| d * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })),
                Op::Softplus(a) => t[*a].as_ref().map(|d| d * &val(*a).mapv(sigmoid)),
                Op::Abs(a) => t[*a].as_ref().map(|d| d * &val(*a).mapv(|x| x.signum())),
                Op::SoftmaxRows(a) => t[*a].as_ref().map(|d| {
                    let sm = &*node.value;
                    let dot = (sm * d).sum_axis(Axis(1)).insert_axis(Axis(1));
                    sm * &(d - &dot)
                }),
                Op::CumsumPad(a) => t[*a].as_ref().map(cumsum_pad),
                Op::GatherPerRow(a, idx) => t[*a].as_ref().map(|d| {
                    Array2::from_shape_fn((idx.len(), 1), |(r, _)| d[[r, idx[r]]])
                }),
                Op::SelectCols(a, cols) => t[*a].as_ref().map(|d| d.select(Axis(1), cols)),
                Op::ConcatCols(parts) => {
                    if parts.iter().all(|p| t[*p].is_none()) {
                        None
                    } else {
                        let rows = node.value.nrows();
                        let owned: Vec<Array2<f64>> = parts
                            .iter()
                            .map(|p| {
                                t[*p].clone().unwrap_or_else(|| {
                                    Array2::zeros((rows, val(*p).ncols()))
                                })
                            })
                            .collect();
                        let views: Vec<_> = owned.iter().map(|a| a.view()).collect();
                        Some(ndarray::concatenate(Axis(1), &views).expect("concat"))
                    }
                }
                Op::Reshape(a) => t[*a].as_ref().map(|d| {
                    d.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(node.value.dim())
                        .expect("reshape preserves size")
                }),
                Op::Where(mask, a, b) => {
                    if t[*a].is_none() && t[*b].is_none() {
                        None
                    } else {
                        let dim = node.value.dim();
                        let mut out = Array2::zeros(dim);
                        for (r, &m) in mask.iter().enumerate() {
                            let src = if m { &t[*a] } else { &t[*b] };
                            if let Some(d) = src {
                                out.row_mut(r).assign(&d.row(r));
                            }
                        }
                        Some(out)
                    }
                }
                Op::SumCols(a) => t[*a]
                    .as_ref()
                    .map(|d| d.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::SumAll(a) => t[*a].as_ref().map(|d| Array2::from_elem((1, 1), d.sum())),
                Op::MeanAll(a) => t[*a]
                    .as_ref()
                    .map(|d| Array2::from_elem((1, 1), d.mean().unwrap_or(0.0))),
                Op::GatherRows(a, idx) => t[*a].as_ref().map(|d| d.select(Axis(0), idx)),
                Op::Transpose(a) => t[*a].as_ref().map(|d| d.t().to_owned()),
                Op::TriInverse(a) => t[*a].as_ref().map(|d| {
                    let y = &*node.value;
                    -(y.dot(d).dot(y))
                }),
                Op::Diag(a) => t[*a].as_ref().map(|d| {
                    let n = d.nrows();
                    Array2::from_shape_fn((1, n), |(_, i)| d[[i, i]])
                }),
                Op::BroadcastRows(a) => t[*a].as_ref().map(|d| {
                    d.broadcast(node.value.dim()).expect("row broadcast").to_owned()
                }),
            };
            t[id] = out;
        }
        Tangents { tangents: t }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array2<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*rhs.value());
        self.tape.binary(self, rhs, v, Op::MatMul(self.id, rhs.id))
    }

    /// Adds a `1 x C` row vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*bias.value();
        self.tape.binary(self, bias, v, Op::AddRow(self.id, bias.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.unary(self, v, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let v = &*self.value() + c;
        self.tape.unary(self, v, Op::Offset(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.tape.unary(self, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.tape.unary(self, v, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.tape.unary(self, v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.tape.unary(self, v, Op::Square(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.tape.unary(self, v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.tape.unary(self, v, Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus);
        self.tape.unary(self, v, Op::Softplus(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().mapv(f64::abs);
        self.tape.unary(self, v, Op::Abs(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.tape.unary(self, v, Op::SoftmaxRows(self.id))
    }

    /// Row-wise cumulative sum with a leading zero column: `R x C -> R x (C+1)`.
    pub fn cumsum_pad(self) -> Var<'t> {
        let v = cumsum_pad(&self.value());
        self.tape.unary(self, v, Op::CumsumPad(self.id))
    }

    /// Picks column `idx[r]` from row `r`, giving an `R x 1` column.
    pub fn gather_per_row(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        assert_eq!(idx.len(), a.nrows(), "one index per row");
        let v = Array2::from_shape_fn((idx.len(), 1), |(r, _)| a[[r, idx[r]]]);
        self.tape.unary(self, v, Op::GatherPerRow(self.id, idx))
    }

    pub fn select_cols(self, cols: Rc<Vec<usize>>) -> Var<'t> {
        let v = self.value().select(Axis(1), &cols);
        self.tape.unary(self, v, Op::SelectCols(self.id, cols))
    }

    pub fn cols(self, range: std::ops::Range<usize>) -> Var<'t> {
        self.select_cols(Rc::new(range.collect()))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape preserves size");
        self.tape.unary(self, v, Op::Reshape(self.id))
    }

    /// Row-wise select: row `r` comes from `self` where `mask[r]`, else from `other`.
    pub fn where_rows(self, mask: Rc<Vec<bool>>, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.dim(), b.dim(), "where operands must match");
        let mut v = (*b).clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(r).assign(&a.row(r));
            }
        }
        self.tape
            .binary(self, other, v, Op::Where(mask, self.id, other.id))
    }

    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.unary(self, v, Op::SumCols(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.tape.unary(self, v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().mean().unwrap_or(0.0));
        self.tape.unary(self, v, Op::MeanAll(self.id))
    }

    /// Row lookup into a table: output row `r` is `self[idx[r]]`.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let v = self.value().select(Axis(0), &idx);
        self.tape.unary(self, v, Op::GatherRows(self.id, idx))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.tape.unary(self, v, Op::Transpose(self.id))
    }

    /// Inverse of a square triangular matrix (structure detected from the value).
    pub fn tri_inverse(self) -> Var<'t> {
        let a = self.value();
        let v = tri_inverse(&a, is_lower_triangular(&a));
        self.tape.unary(self, v, Op::TriInverse(self.id))
    }

    /// Diagonal of a square matrix as a `1 x n` row.
    pub fn diag(self) -> Var<'t> {
        let a = self.value();
        let n = a.nrows();
        let v = Array2::from_shape_fn((1, n), |(_, i)| a[[i, i]]);
        self.tape.unary(self, v, Op::Diag(self.id))
    }

    /// Repeats a `1 x C` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.nrows(), 1, "broadcast_rows expects a single row");
        let v = a.broadcast((rows, a.ncols())).expect("broadcast").to_owned();
        self.tape.unary(self, v, Op::BroadcastRows(self.id))
    }
}

/// Concatenates along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let values: Vec<Rc<Array2<f64>>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must match");
    let g = parts.iter().any(|p| tape.grad_of(p.id));
    tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), g)
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:ident, $sym:tt) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                let a = self.value();
                let b = rhs.value();
                assert_eq!(a.dim(), b.dim(), concat!("shape mismatch in ", stringify!($m)));
                let mut v = (*a).clone();
                Zip::from(&mut v).and(&*b).for_each(|x, &y| *x = *x $sym y);
                self.tape.binary(self, rhs, v, Op::$op(self.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, Add, +);
binop!(Sub, sub, Sub, -);
binop!(Mul, mul, Mul, *);
binop!(Div, div, Div, /);

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(-1.0).offset(self)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
