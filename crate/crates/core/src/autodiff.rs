//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the indices of its parents, and [`Graph::backward`] walks the tape in
//! reverse accumulating vector-Jacobian products. Parameters live in a
//! [`ParamStore`] and are bound into a fresh graph for every forward pass.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::emulator::MonomialBasis;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Shift(Var),
    SumAxes(Var, Vec<usize>),
    MeanAxes(Var, Vec<usize>, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Dropout(Var, ArrayD<f64>),
    StopGradient,
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    PolyFeatures(Var, Arc<MonomialBasis>),
}

#[derive(Debug, Clone)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    detached: Vec<ArrayD<f64>>,
    replay: Option<Vec<ArrayD<f64>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of a node, or `None` if no gradient reaches it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros if no gradient reaches it.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> ArrayD<f64> {
        self.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim()))
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {a:?} with {b:?}"),
                })
            }
        };
    }
    Ok(out)
}

fn binary<F: Fn(f64, f64) -> f64>(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>, f: F) -> Result<ArrayD<f64>> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return Ok(out);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
    Ok(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

/// Logistic function, evaluated without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    /// Empty graph in evaluation mode.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            detached: Vec::new(),
            replay: None,
        }
    }

    /// Empty graph with dropout active when `train` is set.
    pub fn with_mode(seed: u64, train: bool) -> Self {
        Self {
            train,
            ..Self::new(seed)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap_or(f64::NAN)
    }

    /// Values recorded by every `stop_gradient` call, in call order.
    pub fn detached_values(&self) -> &[ArrayD<f64>] {
        &self.detached
    }

    /// Makes subsequent `stop_gradient` calls output the given values, in
    /// order, instead of their inputs.
    pub fn replay_detached(&mut self, values: Vec<ArrayD<f64>>) {
        self.replay = Some(values);
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let v = as2(av).dot(&as2(bv)).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// x·W + b with b broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// a + c for a scalar constant c.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn check_axes(&self, op: &'static str, a: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let nd = self.value(a).ndim();
        let mut ax = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.iter().any(|&i| i >= nd) {
            return Err(Error::Shape {
                op,
                detail: format!("axes {axes:?} for rank {nd}"),
            });
        }
        Ok(ax)
    }

    /// Sum over the listed axes, which are removed.
    pub fn sum_over(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ax = self.check_axes("sum_over", a, axes)?;
        let mut v = self.value(a).clone();
        for &i in ax.iter().rev() {
            v = v.sum_axis(Axis(i));
        }
        let ng = self.ng(a);
        Ok(self.push(v, Op::SumAxes(a, ax), ng))
    }

    /// Mean over the listed axes, which are removed.
    pub fn mean_over(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ax = self.check_axes("mean_over", a, axes)?;
        let count: usize = ax.iter().map(|&i| self.value(a).shape()[i]).product();
        if count == 0 {
            return Err(Error::Shape {
                op: "mean_over",
                detail: "mean over an empty axis".into(),
            });
        }
        let mut v = self.value(a).clone();
        for &i in ax.iter().rev() {
            v = v.sum_axis(Axis(i));
        }
        v /= count as f64;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MeanAxes(a, ax, count as f64), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.sum_over(a, &axes).expect("valid axes")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.mean_over(a, &axes)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let shape = self.value(a).raw_dim();
        let mask = ArrayD::from_shape_simple_fn(shape, || {
            if unit.sample(&mut self.rng) < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = self.value(a) * &mask;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Dropout(a, mask), ng))
    }

    /// Passes the value through and blocks gradients.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let idx = self.detached.len();
        let v = match &self.replay {
            Some(vals) if idx < vals.len() && vals[idx].shape() == self.value(a).shape() => vals[idx].clone(),
            _ => self.value(a).clone(),
        };
        self.detached.push(v.clone());
        self.push(v, Op::StopGradient, false)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views).map_err(|e| Error::Shape {
            op: "concat",
            detail: e.to_string(),
        })?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let val = self.value(a);
        if axis >= val.ndim() || start > end || end > val.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("{start}..{end} on axis {axis} of {:?}", val.shape()),
            });
        }
        let v = val.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        let ng = self.ng(a);
        Ok(self.push(v, Op::Slice(a, axis, start), ng))
    }

    /// Rows `idx` of a 2-d tensor, with repetition.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let val = self.value(a);
        if val.ndim() != 2 || idx.iter().any(|&i| i >= val.shape()[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("indices into {:?}", val.shape()),
            });
        }
        let v = val.select(Axis(0), idx);
        let ng = self.ng(a);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Row-wise monomial expansion of a [n × n_inputs] tensor.
    pub fn poly_features(&mut self, a: Var, basis: Arc<MonomialBasis>) -> Result<Var> {
        let val = self.value(a);
        if val.ndim() != 2 || val.shape()[1] != basis.n_inputs() {
            return Err(Error::Shape {
                op: "poly_features",
                detail: format!("{:?} for {} inputs", val.shape(), basis.n_inputs()),
            });
        }
        let v = basis.feature_matrix(as2(val)).into_dyn();
        let ng = self.ng(a);
        Ok(self.push(v, Op::PolyFeatures(a, basis), ng))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be a scalar, got {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, contrib: ArrayD<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Const | Op::StopGradient => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(g.clone(), self.value(*a).shape()));
                    send(*b, reduce_to(g, self.value(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(g.clone(), self.value(*a).shape()));
                    send(*b, reduce_to(-g, self.value(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(*a, reduce_to(binary("mul", &g, bv, |x, y| x * y)?, av.shape()));
                    }
                    if self.ng(*b) {
                        send(*b, reduce_to(binary("mul", &g, av, |x, y| x * y)?, bv.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    if self.ng(*a) {
                        send(*a, g2.dot(&as2(self.value(*b)).t()).into_dyn());
                    }
                    if self.ng(*b) {
                        send(*b, as2(self.value(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= 2.0 * x);
                    send(*a, d);
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::Shift(a) => send(*a, g),
                Op::SumAxes(a, axes) | Op::MeanAxes(a, axes, _) => {
                    let mut d = g;
                    for &ax in axes {
                        d = d.insert_axis(Axis(ax));
                    }
                    let mut d = d.broadcast(self.value(*a).raw_dim()).expect("reduced shape").to_owned();
                    if let Op::MeanAxes(_, _, n) = &node.op {
                        d /= *n;
                    }
                    send(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    send(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    send(*a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(x));
                    send(*a, d);
                }
                Op::Dropout(a, mask) => send(*a, g * mask),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).shape()[*axis];
                        if self.ng(p) {
                            send(p, g.slice_axis(Axis(*axis), Slice::from(start..start + n)).to_owned());
                        }
                        start += n;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let mut d = ArrayD::zeros(self.value(*a).raw_dim());
                    let n = g.shape()[*axis];
                    d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + n)).assign(&g);
                    send(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(as2(self.value(*a)).raw_dim());
                    let g2 = as2(&g);
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g2.row(r);
                    }
                    send(*a, d.into_dyn());
                }
                Op::PolyFeatures(a, basis) => {
                    let feats = as2(&node.value);
                    let g2 = as2(&g);
                    let n_in = basis.n_inputs();
                    let mut d = Array2::<f64>::zeros((feats.nrows(), n_in));
                    for r in 0..feats.nrows() {
                        let (fr, gr) = (feats.row(r), g2.row(r));
                        let mut dr = d.row_mut(r);
                        for k in 1..basis.len() {
                            let gk = gr[k];
                            if gk == 0.0 {
                                continue;
                            }
                            for &(j, e, k2) in basis.derivs(k) {
                                dr[j] += gk * e * fr[k2];
                            }
                        }
                    }
                    send(*a, d.into_dyn());
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Nonlinearity applied after each hidden affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Stack of MLPs: MLP i has `reps[i]` layers of width `dims[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpStackConfig {
    pub dims: Vec<usize>,
    pub reps: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    #[serde(default = "yes")]
    pub residual: bool,
    pub activation: Activation,
}

fn yes() -> bool {
    true
}

impl MlpStackConfig {
    pub fn new(dims: &[usize], reps: &[usize], dropout: &[f64], activation: Activation) -> Self {
        Self {
            dims: dims.to_vec(),
            reps: reps.to_vec(),
            dropout: dropout.to_vec(),
            residual: true,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.reps.len() {
            return Err(Error::InvalidArgument("dims and reps must be non-empty and of equal length".into()));
        }
        if self.dropout.len() > self.dims.len() {
            return Err(Error::InvalidArgument("more dropout rates than MLPs".into()));
        }
        if self.dims.iter().chain(&self.reps).any(|&d| d == 0) {
            return Err(Error::InvalidArgument("dims and reps must be at least 1".into()));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::InvalidArgument("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Dropout rate of MLP i; missing trailing entries are 0.
    pub fn dropout_at(&self, i: usize) -> f64 {
        self.dropout.get(i).copied().unwrap_or(0.0)
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn scaled(&self, divisor: usize) -> Self {
        Self {
            dims: self.dims.iter().map(|&d| (d / divisor).max(1)).collect(),
            ..self.clone()
        }
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

/// Parameters of a store bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binding of `names[i]` to `vars[i]`.
    pub fn from_vars(names: &[String], vars: Vec<Var>) -> Self {
        Self {
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
            vars,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        match self.index.get(name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.values.push(value);
            }
        }
    }

    /// Adds every tensor of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, v) in other.names.iter().zip(&other.values) {
            self.insert(&format!("{prefix}{n}"), v.clone());
        }
    }

    /// Binds all tensors as differentiable leaves (or constants).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients of a bound store, zeros where none flowed.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound, grads: &Grads) -> Vec<ArrayD<f64>> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(g, v)).collect()
    }

    /// Glorot-uniform weight [n_in × n_out] and zero bias [1 × n_out].
    pub fn init_affine<R: Rng>(&mut self, name: &str, n_in: usize, n_out: usize, gain: f64, rng: &mut R) {
        let bound = gain * (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n_in, n_out), || rng.random_range(-bound..=bound));
        self.insert(&format!("{name}.w"), w.into_dyn());
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, n_out])));
    }

    /// Registers all parameters of an MLP stack under `prefix`.
    pub fn init_mlp_stack<R: Rng>(&mut self, prefix: &str, cfg: &MlpStackConfig, n_in: usize, rng: &mut R) -> Result<()> {
        cfg.validate()?;
        let gain = match cfg.activation {
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        };
        let mut width = n_in;
        for (i, (&d, &r)) in cfg.dims.iter().zip(&cfg.reps).enumerate() {
            for layer in 0..r {
                let inw = if layer == 0 { width } else { d };
                self.init_affine(&format!("{prefix}.mlp{i}.layer{layer}"), inw, d, gain, rng);
            }
            if cfg.residual && width != d {
                self.init_affine(&format!("{prefix}.mlp{i}.proj"), width, d, 1.0, rng);
            }
            width = d;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SIFP_MAGIC)?;
        w.write_u16::<LittleEndian>(SIFP_VERSION)?;
        w.write_u32::<LittleEndian>(self.names.len() as u32)?;
        for (name, v) in self.names.iter().zip(&self.values) {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(v.ndim() as u32)?;
            for &d in v.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in v.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SIFP_MAGIC {
            return Err(Error::Format("not a SIFP parameter file".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != SIFP_VERSION {
            return Err(Error::Format(format!("unsupported SIFP version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            let nd = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..nd)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let mut data = vec![0.0; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))?;
            store.insert(&name, arr);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const SIFP_MAGIC: &[u8; 4] = b"SIFP";
pub const SIFP_VERSION: u16 = 1;

/// Forward pass of an MLP stack registered with [`ParamStore::init_mlp_stack`].
pub fn mlp_stack(g: &mut Graph, cfg: &MlpStackConfig, params: &Bound, prefix: &str, input: Var) -> Result<Var> {
    cfg.validate()?;
    let mut x = input;
    for (i, (&d, &r)) in cfg.dims.iter().zip(&cfg.reps).enumerate() {
        let stack_in = x;
        let mut h = x;
        for layer in 0..r {
            let name = format!("{prefix}.mlp{i}.layer{layer}");
            let (w, b) = (params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?);
            if g.value(h).ndim() != 2 || g.value(h).shape()[1] != g.value(w).shape()[0] {
                return Err(Error::Shape {
                    op: "mlp_stack",
                    detail: format!("{name} expects {} features, got {:?}", g.value(w).shape()[0], g.value(h).shape()),
                });
            }
            h = g.affine(h, w, b)?;
            h = cfg.activation.apply(g, h);
        }
        if cfg.residual {
            let skip = if g.value(stack_in).shape()[1] == d {
                stack_in
            } else {
                let name = format!("{prefix}.mlp{i}.proj");
                let (w, b) = (params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?);
                g.affine(stack_in, w, b)?
            };
            h = g.add(h, skip)?;
        }
        x = g.dropout(h, cfg.dropout_at(i))?;
    }
    Ok(x)
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<_> = store.values().iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every tensor in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (name, g) in store.names().iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst relative error.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Relative errors use max(|analytic|, |numeric|, floor) as denominator.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-4,
            max_per_input: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of a scalar graph with central differences.
///
/// `build` receives a fresh graph (seeded identically on every call) and the
/// input leaves. Finite differences are taken on the detached surrogate: every
/// `stop_gradient` replays the value it had at the unperturbed point, so the
/// numeric derivative sees detached subgraphs as constants.
pub fn grad_check<F>(build: F, point: &[ArrayD<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[ArrayD<f64>], replay: Option<Vec<ArrayD<f64>>>| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new(opts.seed);
        if let Some(r) = replay {
            g.replay_detached(r);
        }
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g0, vars, out) = run(point, None)?;
    let grads = g0.backward(out)?;
    let frozen = g0.detached_values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        n_checked: 0,
    };
    for (i, x) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g0, vars[i]).as_standard_layout().into_owned();
        let mut elems: Vec<usize> = (0..x.len()).collect();
        if let Some(k) = opts.max_per_input {
            if k < elems.len() {
                use rand::seq::SliceRandom;
                elems.shuffle(&mut rng);
                elems.truncate(k);
            }
        }
        for e in elems {
            let eval = |delta: f64| -> Result<f64> {
                let mut pts = point.to_vec();
                pts[i] = pts[i].as_standard_layout().into_owned();
                pts[i].as_slice_mut().expect("standard layout")[e] += delta;
                let (g, _, o) = run(&pts, Some(frozen.clone()))?;
                Ok(g.scalar(o))
            };
            let numeric = (eval(opts.h)? - eval(-opts.h)?) / (2.0 * opts.h);
            let a = analytic.as_slice().expect("standard layout")[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, e);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, array};

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut g = Graph::new(0);
        let x = g.leaf(ArrayD::zeros(IxDyn(&[4, 5])));
        let m = g.mean_all(x).unwrap();
        let gr = g.backward(m).unwrap();
        assert!(gr.get(x).unwrap().iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut g = Graph::new(0);
        let x = g.leaf(array![3.0].into_dyn());
        let y = g.leaf(array![5.0].into_dyn());
        let xs = g.stop_gradient(x);
        let p = g.mul(xs, y).unwrap();
        let s = g.sum_all(p);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(x).is_none());
        assert_eq!(gr.get(y).unwrap()[[0]], 3.0);
    }

    #[test]
    fn broadcasting_gradients_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = vec![rand_arr(&mut rng, &[3, 4]), rand_arr(&mut rng, &[1, 4]), rand_arr(&mut rng, &[3, 1])];
        let rep = grad_check(
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.mul(a, v[2])?;
                let c = g.sub(b, v[1])?;
                let d = g.square(c);
                g.mean_all(d)
            },
            &pts,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-7, "{rep:?}");
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new(0);
        let a = g.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.leaf(ArrayD::zeros(IxDyn(&[2, 4])));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        assert!(g.slice(a, 1, 2, 5).is_err());
        assert!(g.gather_rows(a, &[2]).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn linear_function_checks_exactly() {
        let rep = grad_check(
            |g, v| {
                let s = g.scale(v[0], 2.0);
                Ok(g.sum_all(s))
            },
            &[array![0.5, -1.0, 2.0].into_dyn()],
            &GradCheckOptions {
                h: 0.25,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn detached_surrogate_semantics() {
        // f(x) = stop(x)·x²; the detached surrogate has derivative 2·x0·x.
        let rep = grad_check(
            |g, v| {
                let d = g.stop_gradient(v[0]);
                let sq = g.square(v[0]);
                let p = g.mul(d, sq)?;
                Ok(g.sum_all(p))
            },
            &[array![1.5, -0.7].into_dyn()],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn backward_does_not_mutate_values() {
        let mut g = Graph::new(0);
        let x = g.leaf(array![[1.0, -2.0]].into_dyn());
        let t = g.tanh(x);
        let s = g.sum_all(t);
        let before: Vec<_> = (0..g.len()).map(|i| g.value(Var(i)).clone()).collect();
        g.backward(s).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(g.value(Var(i)), b);
        }
    }

    /// Random composite graph over two [3 × 4] inputs and one [4 × 2] input.
    fn random_graph(g: &mut Graph, v: &[Var], ops: &[u8], basis: &Arc<MonomialBasis>) -> Result<Var> {
        let mut x = v[0];
        for &op in ops {
            x = match op % 14 {
                0 => g.add(x, v[1])?,
                1 => g.sub(x, v[1])?,
                2 => g.mul(x, v[1])?,
                3 => {
                    let m = g.matmul(x, v[2])?;
                    let t = g.tanh(m);
                    g.concat(&[m, t], 1)?
                }
                4 => g.square(x),
                5 => g.tanh(x),
                6 => g.sigmoid(x),
                7 => g.softplus(x),
                8 => {
                    let s = g.shift(x, 0.3);
                    g.relu(s)
                }
                9 => {
                    let m = g.mean_over(x, &[0])?;
                    g.add(x, m)?
                }
                10 => {
                    let r = g.gather_rows(x, &[2, 0, 0])?;
                    g.mul(r, v[1])?
                }
                11 => {
                    let s = g.slice(x, 1, 1, 3)?;
                    let p = g.poly_features(s, basis.clone())?;
                    let p = g.scale(p, 0.5);
                    g.slice(p, 1, 1, 5)?
                }
                12 => {
                    let c = g.concat(&[x, v[1]], 0)?;
                    let s = g.sum_over(c, &[0])?;
                    let s = g.scale(s, 0.2);
                    g.sub(x, s)?
                }
                _ => g.dropout(x, 0.3)?,
            };
        }
        let sq = g.square(x);
        let s = g.sum_over(sq, &[1])?;
        g.mean_all(s)
    }

    #[test]
    fn random_composite_graphs_match_finite_differences() {
        let basis = Arc::new(MonomialBasis::new(2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for case in 0..120 {
            let depth = rng.random_range(1..=8);
            let ops: Vec<u8> = (0..depth).map(|_| rng.random_range(0..14)).collect();
            let pts = vec![rand_arr(&mut rng, &[3, 4]), rand_arr(&mut rng, &[3, 4]), rand_arr(&mut rng, &[4, 2])];
            let rep = grad_check(
                |g, v| {
                    // Dropout needs training mode; the seed is shared by every call.
                    g.train = true;
                    random_graph(g, v, &ops, &basis)
                },
                &pts,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "case {case} ops {ops:?}: {rep:?}");
            worst = worst.max(rep.max_rel_err);
        }
        assert!(worst < 1e-5);
    }

    #[test]
    fn poly_features_gradient() {
        let basis = Arc::new(MonomialBasis::new(3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_arr(&mut rng, &[basis.len(), 2]);
        let rep = grad_check(
            |g, v| {
                let p = g.poly_features(v[0], basis.clone())?;
                let wc = g.constant(w.clone());
                let o = g.matmul(p, wc)?;
                let s = g.square(o);
                g.mean_all(s)
            },
            &[rand_arr(&mut rng, &[5, 3])],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    fn closed_form_count(n_in: usize, dims: &[usize], reps: &[usize], residual: bool) -> usize {
        let mut total = 0;
        let mut w = n_in;
        for (&d, &r) in dims.iter().zip(reps) {
            total += w * d + d + (r - 1) * (d * d + d);
            if residual && w != d {
                total += w * d + d;
            }
            w = d;
        }
        total
    }

    #[test]
    fn decoder_parameter_count() {
        let cfg = MlpStackConfig::new(&[100, 50, 50, 50], &[3, 2, 2, 2], &[0.001, 0.001, 0.0], Activation::Tanh);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.init_mlp_stack("dec", &cfg, 30, &mut rng).unwrap();
        // 30→100: 3100 + 2·10100 + proj 3100; 100→50: 5050 + 2550 + proj 5050; 2 × (2·2550).
        assert_eq!(store.n_scalars(), 3100 + 20200 + 3100 + 5050 + 2550 + 5050 + 2 * 5100);
        assert_eq!(store.n_scalars(), closed_form_count(30, &cfg.dims, &cfg.reps, true));
        let enc = MlpStackConfig::new(
            &[1000, 500, 200, 100, 50, 50, 50, 30],
            &[2, 3, 3, 3, 3, 3, 3, 3],
            &[0.05, 0.01, 0.01, 0.01, 0.005, 0.001],
            Activation::Relu,
        );
        let mut store = ParamStore::new();
        store.init_mlp_stack("enc", &enc, 80, &mut rng).unwrap();
        assert_eq!(store.n_scalars(), closed_form_count(80, &enc.dims, &enc.reps, true));
    }

    #[test]
    fn mlp_zero_weights_and_dropout_zero() {
        let mut cfg = MlpStackConfig::new(&[6, 4], &[2, 1], &[], Activation::Tanh);
        cfg.residual = false;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.init_mlp_stack("m", &cfg, 3, &mut rng).unwrap();
        for v in store.values_mut() {
            v.fill(0.0);
        }
        let mut g = Graph::new(0);
        let b = store.bind(&mut g, true);
        let x = g.constant(rand_arr(&mut rng, &[5, 3]));
        let y = mlp_stack(&mut g, &cfg, &b, "m", x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let cfg = MlpStackConfig::new(&[6, 4], &[2, 1], &[0.0], Activation::Relu);
        let mut store = ParamStore::new();
        store.init_mlp_stack("m", &cfg, 3, &mut rng).unwrap();
        let input = rand_arr(&mut rng, &[5, 3]);
        let eval = |train: bool| {
            let mut g = Graph::with_mode(9, train);
            let b = store.bind(&mut g, true);
            let x = g.constant(input.clone());
            let y = mlp_stack(&mut g, &cfg, &b, "m", x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(eval(true), eval(false));
        assert_eq!(cfg.dropout_at(1), 0.0);
    }

    #[test]
    fn seeded_dropout_reproducible() {
        let cfg = MlpStackConfig::new(&[8], &[1], &[0.5], Activation::Relu);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.init_mlp_stack("m", &cfg, 3, &mut rng).unwrap();
        let input = rand_arr(&mut rng, &[4, 3]);
        let eval = |seed: u64| {
            let mut g = Graph::with_mode(seed, true);
            let b = store.bind(&mut g, true);
            let x = g.constant(input.clone());
            let y = mlp_stack(&mut g, &cfg, &b, "m", x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(eval(4), eval(4));
        assert_ne!(eval(4), eval(5));
    }

    #[test]
    fn config_validation() {
        assert!(MlpStackConfig::new(&[4, 4], &[1], &[], Activation::Tanh).validate().is_err());
        assert!(MlpStackConfig::new(&[4], &[1], &[0.1, 0.1], Activation::Tanh).validate().is_err());
        assert!(MlpStackConfig::new(&[0], &[1], &[], Activation::Tanh).validate().is_err());
        assert!(MlpStackConfig::new(&[4], &[1], &[1.0], Activation::Tanh).validate().is_err());
    }

    #[test]
    fn adam_behaviour() {
        let mut store = ParamStore::new();
        store.insert("x", array![1.0, -2.0].into_dyn());
        let mut adam = Adam::new(&store, 1e-2);
        adam.m[0].fill(1.0);
        adam.step(&mut store, &[array![0.0, 0.0].into_dyn()]).unwrap();
        assert_eq!(adam.m[0], array![0.9, 0.9].into_dyn());
        // With m primed the parameters move; reset for the zero-gradient check.
        let mut store = ParamStore::new();
        store.insert("x", array![1.0, -2.0].into_dyn());
        let mut adam = Adam::new(&store, 1e-2);
        adam.step(&mut store, &[array![0.0, 0.0].into_dyn()]).unwrap();
        assert_eq!(store.get("x").unwrap(), &array![1.0, -2.0].into_dyn());

        let mut adam = Adam::new(&store, 1e-3);
        let mut last = store.get("x").unwrap().clone();
        for _ in 0..500 {
            adam.step(&mut store, &[array![3.0, -0.5].into_dyn()]).unwrap();
            let cur = store.get("x").unwrap().clone();
            let d = &cur - &last;
            assert!((d[0] + 1e-3).abs() < 1e-4 && (d[1] - 1e-3).abs() < 1e-4);
            last = cur;
        }

        let err = adam.step(&mut store, &[array![f64::NAN, 0.0].into_dyn()]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "x"));
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut store = ParamStore::new();
        store.insert("x", array![0.8, -0.6, 0.3].into_dyn());
        let mut adam = Adam::new(&store, 1e-2);
        let mut steps = 0;
        loop {
            let x = store.get("x").unwrap().clone();
            let f: f64 = x.iter().map(|v| v * v).sum();
            if f < 1e-6 {
                break;
            }
            steps += 1;
            assert!(steps <= 2000, "not converged: f = {f}");
            adam.step(&mut store, &[x * 2.0]).unwrap();
        }
    }

    #[test]
    fn sifp_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a.w", arr2(&[[1.0, 2.0], [3.0, 4.5]]).into_dyn());
        store.insert("scalar", ArrayD::from_elem(IxDyn(&[]), -0.25));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SIFP");
        assert_eq!(ParamStore::read_from(&mut buf.as_slice()).unwrap(), store);
        assert!(ParamStore::read_from(&mut &b"NOPE"[..]).is_err());
    }

    #[test]
    fn clip_norm() {
        let mut g = vec![array![3.0, 4.0].into_dyn()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0]] - 0.6).abs() < 1e-15);
    }
}
