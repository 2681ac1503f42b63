//! Reverse-mode differentiation over array-valued nodes.
//!
//! A [`Graph`] is a tape: every operation is evaluated eagerly when it is
//! recorded, and nodes only ever refer to earlier nodes, so the tape order is
//! a topological order. Leaves can be reassigned with [`Graph::set_value`]
//! followed by [`Graph::forward`], which re-evaluates every recorded
//! operation in place. [`Graph::backward`] returns a fresh set of adjoints on
//! each call; nothing accumulates across calls.
//!
//! Batched data is laid out as `rows = batch`, `cols = features`, and weight
//! matrices as `in × out`, so an affine layer is `x·W + b`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::array::{gemm, MatRef, RealArray};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, Var, Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    LinComb(Vec<(f64, Var)>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: RealArray,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: BTreeMap<usize, RealArray>,
    names: BTreeMap<String, usize>,
    shapes: BTreeMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Adjoint of a leaf; zero if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<RealArray> {
        if let Some(a) = self.adjoints.get(&var.0) {
            return Some(a.clone());
        }
        self.shapes.get(&var.0).map(|s| RealArray::zeros(s))
    }

    pub fn by_name(&self, name: &str) -> Option<RealArray> {
        self.names.get(name).and_then(|&i| self.get(Var(i)))
    }

    /// All named leaves with their adjoints.
    pub fn into_named(self) -> BTreeMap<String, RealArray> {
        let Gradients {
            mut adjoints,
            names,
            shapes,
        } = self;
        names
            .into_iter()
            .map(|(name, i)| {
                let g = adjoints
                    .remove(&i)
                    .unwrap_or_else(|| RealArray::zeros(&shapes[&i]));
                (name, g)
            })
            .collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
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

fn row_vector_len(r: &RealArray) -> Option<usize> {
    match r.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: RealArray) -> Var {
        let name = name.into();
        debug_assert!(
            !self.nodes.iter().any(|n| n.name.as_deref() == Some(&name)),
            "duplicate leaf name {name}"
        );
        self.push(Op::Leaf, value, true, Some(name))
    }

    /// Leaf that takes part in evaluation but is never differentiated.
    pub fn constant(&mut self, value: RealArray) -> Var {
        self.push(Op::Leaf, value, false, None)
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Reassigns a leaf. Call [`Graph::forward`] before reading dependents.
    pub fn set_value(&mut self, v: Var, value: RealArray) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_value on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dim("set_value", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every recorded operation from the current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Re-evaluates the tape and returns the value at `root`.
    pub fn forward_eval(&mut self, root: Var) -> Result<RealArray> {
        self.forward()?;
        Ok(self.value(root).clone())
    }

    fn push(&mut self, op: Op, value: RealArray, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, value, requires_grad, None))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::LinComb(terms) => terms.iter().map(|t| t.1).collect(),
        }
    }

    fn eval(&self, op: &Op) -> Result<RealArray> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::MatVec(a, b) => v(a).matvec(v(b))?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Mul(a, b) => v(a).mul(v(b))?,
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (a, r) = (v(a), v(r));
                let n = row_vector_len(r).ok_or_else(|| Error::dim("row broadcast", a.shape(), r.shape()))?;
                if n != a.cols() {
                    return Err(Error::dim("row broadcast", a.shape(), r.shape()));
                }
                let add = matches!(op, Op::AddRow(..));
                let mut out = a.clone();
                let rd = r.data();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, x) in row.iter_mut().zip(rd) {
                        if add {
                            *o += x;
                        } else {
                            *o *= x;
                        }
                    }
                }
                out
            }
            Op::Affine(x, w, b) => {
                let (x, w, b) = (v(x), v(w), v(b));
                if !x.is_matrix() || !w.is_matrix() || x.cols() != w.rows() {
                    return Err(Error::dim("affine", x.shape(), w.shape()));
                }
                let n = w.cols();
                if row_vector_len(b) != Some(n) {
                    return Err(Error::dim("affine bias", w.shape(), b.shape()));
                }
                let m = x.rows();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(b.data());
                }
                gemm(
                    m,
                    x.cols(),
                    n,
                    1.0,
                    MatRef::row_major(x.data(), x.cols()),
                    MatRef::row_major(w.data(), n),
                    1.0,
                    &mut data,
                );
                RealArray::matrix(m, n, data)?
            }
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Ln(a) => v(a).map(f64::ln),
            Op::Scale(a, s) => v(a).scale(*s),
            Op::Offset(a, s) => v(a).map(|x| x + s),
            Op::ClampMin(a, lo) => v(a).map(|x| x.max(*lo)),
            Op::Sum(a) => RealArray::scalar(v(a).sum()),
            Op::Concat(parts) => {
                let refs: Vec<&RealArray> = parts.iter().map(v).collect();
                RealArray::concat_cols(&refs)?
            }
            Op::SliceCols(a, s, e) => v(a).slice_cols(*s, *e)?,
            Op::LinComb(terms) => {
                let (c0, first) = terms
                    .first()
                    .ok_or_else(|| Error::Input("empty linear combination".into()))?;
                let mut out = v(first).scale(*c0);
                for (c, t) in &terms[1..] {
                    out.axpy(*c, v(t))?;
                }
                out
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.record(Op::MatVec(a, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    /// `x·w + b`, bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Affine(x, w, b))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Offset(a, s))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.record(Op::ClampMin(a, lo))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceCols(a, start, end))
    }

    /// `Σ cᵢ·vᵢ` over same-shaped operands.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        self.record(Op::LinComb(terms.to_vec()))
    }

    /// Adjoints of every named leaf with respect to a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<RealArray>> = vec![None; root.0 + 1];
        adj[root.0] = Some(RealArray::filled(self.nodes[root.0].value.shape(), 1.0));
        let mut leaves = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(d) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, d);
                continue;
            }
            self.propagate(i, &d, &mut adj)?;
        }

        let mut names = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true) = (&n.op, n.requires_grad) {
                shapes.insert(i, n.value.shape().to_vec());
                if let Some(name) = &n.name {
                    names.insert(name.clone(), i);
                }
            }
        }
        Ok(Gradients {
            adjoints: leaves,
            names,
            shapes,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, adj: &'a mut [Option<RealArray>], v: Var) -> &'a mut RealArray {
        let shape = self.nodes[v.0].value.shape();
        adj[v.0].get_or_insert_with(|| RealArray::zeros(shape))
    }

    fn accumulate(&self, adj: &mut [Option<RealArray>], v: Var, c: f64, d: &RealArray) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(a) => a.axpy(c, d)?,
            slot @ None => *slot = Some(if c == 1.0 { d.clone() } else { d.scale(c) }),
        }
        Ok(())
    }

    fn accumulate_elementwise(
        &self,
        adj: &mut [Option<RealArray>],
        v: Var,
        d: &RealArray,
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(adj, v);
        for (k, (s, g)) in slot.data_mut().iter_mut().zip(d.data()).enumerate() {
            *s += f(k, *g);
        }
    }

    fn accumulate_colsum(&self, adj: &mut [Option<RealArray>], v: Var, d: &RealArray, weight: Option<&RealArray>) {
        if !self.wants(v) {
            return;
        }
        let n = d.cols();
        let slot = self.slot(adj, v);
        let s = slot.data_mut();
        for (r, row) in d.data().chunks(n).enumerate() {
            match weight {
                None => row.iter().zip(s.iter_mut()).for_each(|(g, o)| *o += g),
                Some(w) => {
                    let wr = &w.data()[r * n..(r + 1) * n];
                    for ((g, o), x) in row.iter().zip(s.iter_mut()).zip(wr) {
                        *o += g * x;
                    }
                }
            }
        }
    }

    fn propagate(&self, i: usize, d: &RealArray, adj: &mut [Option<RealArray>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let slot = self.slot(adj, *a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(d.data(), n),
                        MatRef::transposed(bv.data(), n),
                        1.0,
                        slot.data_mut(),
                    );
                }
                if self.wants(*b) {
                    let slot = self.slot(adj, *b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(d.data(), n),
                        1.0,
                        slot.data_mut(),
                    );
                }
            }
            Op::MatVec(a, x) => {
                let (av, xv) = (val(a), val(x));
                let c = av.cols();
                if self.wants(*a) {
                    self.accumulate_elementwise(adj, *a, av, |k, _| d.data()[k / c] * xv.data()[k % c]);
                }
                if self.wants(*x) {
                    let slot = self.slot(adj, *x);
                    for (r, g) in d.data().iter().enumerate() {
                        for (s, w) in slot.data_mut().iter_mut().zip(av.row(r)) {
                            *s += g * w;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, 1.0, d)?;
                self.accumulate(adj, *b, 1.0, d)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, 1.0, d)?;
                self.accumulate(adj, *b, -1.0, d)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                self.accumulate_elementwise(adj, *a, d, |k, g| g * bv.data()[k]);
                self.accumulate_elementwise(adj, *b, d, |k, g| g * av.data()[k]);
            }
            Op::AddRow(a, r) => {
                self.accumulate(adj, *a, 1.0, d)?;
                self.accumulate_colsum(adj, *r, d, None);
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                let n = av.cols();
                self.accumulate_elementwise(adj, *a, d, |k, g| g * rv.data()[k % n]);
                self.accumulate_colsum(adj, *r, d, Some(av));
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (val(x), val(w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let slot = self.slot(adj, *x);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(d.data(), n),
                        MatRef::transposed(wv.data(), n),
                        1.0,
                        slot.data_mut(),
                    );
                }
                if self.wants(*w) {
                    let slot = self.slot(adj, *w);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(xv.data(), k),
                        MatRef::row_major(d.data(), n),
                        1.0,
                        slot.data_mut(),
                    );
                }
                self.accumulate_colsum(adj, *b, d, None);
            }
            Op::Tanh(a) => {
                self.accumulate_elementwise(adj, *a, d, |k, g| {
                    let y = out.data()[k];
                    g * (1.0 - y * y)
                });
            }
            Op::Softplus(a) => {
                let av = val(a);
                self.accumulate_elementwise(adj, *a, d, |k, g| g * sigmoid(av.data()[k]));
            }
            Op::Square(a) => {
                let av = val(a);
                self.accumulate_elementwise(adj, *a, d, |k, g| 2.0 * g * av.data()[k]);
            }
            Op::Exp(a) => {
                self.accumulate_elementwise(adj, *a, d, |k, g| g * out.data()[k]);
            }
            Op::Ln(a) => {
                let av = val(a);
                self.accumulate_elementwise(adj, *a, d, |k, g| g / av.data()[k]);
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, *s, d)?,
            Op::Offset(a, _) => self.accumulate(adj, *a, 1.0, d)?,
            Op::ClampMin(a, lo) => {
                let av = val(a);
                self.accumulate_elementwise(adj, *a, d, |k, g| if av.data()[k] > *lo { g } else { 0.0 });
            }
            Op::Sum(a) => {
                let g = d.data()[0];
                self.accumulate_elementwise(adj, *a, val(a), |_, _| g);
            }
            Op::Concat(parts) => {
                let total = d.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if self.wants(*p) {
                        let slot = self.slot(adj, *p);
                        for (r, row) in slot.data_mut().chunks_mut(w).enumerate() {
                            let src = &d.data()[r * total + offset..r * total + offset + w];
                            row.iter_mut().zip(src).for_each(|(o, g)| *o += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, s, e) => {
                if self.wants(*a) {
                    let w = e - s;
                    let c = val(a).cols();
                    let slot = self.slot(adj, *a);
                    for (r, row) in d.data().chunks(w).enumerate() {
                        let dst = &mut slot.data_mut()[r * c + s..r * c + e];
                        dst.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                    }
                }
            }
            Op::LinComb(terms) => {
                for (c, t) in terms {
                    self.accumulate(adj, *t, *c, d)?;
                }
            }
        }
        Ok(())
    }
}
