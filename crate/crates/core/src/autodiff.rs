//! Reverse-mode differentiation over a recorded tape of vector operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node holding its output value; `backward`
//! walks the nodes once, newest first, and accumulates parameter gradients
//! into a [`Gradients`] buffer.

use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::tensor::{kernels, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces all values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        ensure!(self.names == other.names, Shape, "parameter layouts differ");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            ensure!(dst.shape() == src.shape(), Shape, "parameter shapes differ");
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Largest absolute element-wise difference against a same-layout store.
    pub fn max_abs_diff(&self, other: &ParamStore<F>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Gradients { tensors: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(F::ZERO));
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(F::from_f64(max_norm / norm));
        }
        norm
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Embed {
        table: ParamId,
        row: usize,
    },
    /// out = W x, W: [rows, cols]
    MatVec {
        w: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    /// out = M^T x, M: [rows, cols]
    MatTVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Sigmoid(Var),
    Tanh(Var),
    Dot(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    /// Stacks equal-length vectors into a [n, d] matrix.
    Stack(Vec<Var>),
    Sum(Vec<Var>),
    Softmax(Var),
    /// -log softmax(logits)[target]; saves the probabilities.
    Nll {
        logits: Var,
        target: usize,
        probs: Vec<F>,
    },
    /// Binary cross-entropy on a single logit.
    BceLogit {
        logit: Var,
        label: F,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
}

/// One recorded forward computation.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()], consumed: false }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id).data(),
            _ => self.nodes[v.0].value.as_ref().expect("non-param node has a value").data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id).shape(),
            _ => self.nodes[v.0].value.as_ref().expect("value").shape(),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.input(Tensor::zeros(&[n]))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Row `row` of a `[n, d]` embedding table.
    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let t = self.params.get(table);
        let (n, d) = (t.shape()[0], t.shape()[1]);
        ensure!(row < n, Invalid, "embedding row {row} out of range {n}");
        let value = Tensor::vector(t.data()[row * d..(row + 1) * d].to_vec());
        Ok(self.push(Op::Embed { table, row }, value))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let s = self.shape(w);
        ensure!(s.len() == 2, Shape, "matvec expects a matrix, got {:?}", s);
        let (rows, cols) = (s[0], s[1]);
        ensure!(self.value(x).len() == cols, Shape, "matvec: [{rows},{cols}] x {}", self.value(x).len());
        let mut out = vec![F::ZERO; rows];
        kernels::matvec(self.value(w), rows, cols, self.value(x), &mut out);
        Ok(self.push(Op::MatVec { w, x, rows, cols }, Tensor::vector(out)))
    }

    /// `M^T x` for `M: [rows, cols]`, `x: [rows]`.
    pub fn mat_t_vec(&mut self, m: Var, x: Var) -> Result<Var> {
        let s = self.shape(m);
        ensure!(s.len() == 2, Shape, "mat_t_vec expects a matrix, got {:?}", s);
        let (rows, cols) = (s[0], s[1]);
        ensure!(self.value(x).len() == rows, Shape, "mat_t_vec: [{rows},{cols}]^T x {}", self.value(x).len());
        let mut out = vec![F::ZERO; cols];
        kernels::matvec_t_acc(self.value(m), rows, cols, self.value(x), &mut out);
        Ok(self.push(Op::MatTVec { m, x, rows, cols }, Tensor::vector(out)))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        ensure!(la == lb, Shape, "{what}: lengths {la} and {lb}");
        Ok(la)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.push(Op::Add(a, b), Tensor::vector(out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.push(Op::Mul(a, b), Tensor::vector(out)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out: Vec<F> = self.value(a).iter().map(|x| *x * s).collect();
        self.push(Op::Scale(a, s), Tensor::vector(out))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        ensure!(self.value(a).len() == c.len(), Shape, "mul_const length mismatch");
        let out: Vec<F> = self.value(a).iter().zip(&c).map(|(x, y)| *x * *y).collect();
        Ok(self.push(Op::MulConst(a, c), Tensor::vector(out)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), Tensor::vector(out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(Op::Tanh(a), Tensor::vector(out))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "dot")?;
        let v = kernels::dot(self.value(a), self.value(b));
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        ensure!(start + len <= n, Shape, "slice {start}..{} of length {n}", start + len);
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, Tensor::vector(out)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(out))
    }

    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        ensure!(!rows.is_empty(), Invalid, "stack of zero rows");
        let d = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            ensure!(self.value(r).len() == d, Shape, "stack rows differ in length");
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(Op::Stack(rows.to_vec()), Tensor::new(vec![rows.len(), d], out)?))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Invalid, "sum of zero terms");
        let mut out = self.value(parts[0]).to_vec();
        for &p in &parts[1..] {
            ensure!(self.value(p).len() == out.len(), Shape, "sum terms differ in length");
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += *v;
            }
        }
        Ok(self.push(Op::Sum(parts.to_vec()), Tensor::vector(out)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        ensure!(!self.value(a).is_empty(), Invalid, "softmax of empty vector");
        let mut out = vec![F::ZERO; self.value(a).len()];
        kernels::softmax(self.value(a), &mut out);
        Ok(self.push(Op::Softmax(a), Tensor::vector(out)))
    }

    /// Cross-entropy of `softmax(logits)` against a class index.
    pub fn nll(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        ensure!(target < n, Invalid, "target {target} outside vocabulary of {n}");
        let mut probs = vec![F::ZERO; n];
        kernels::softmax(self.value(logits), &mut probs);
        let loss = kernels::log_sum_exp(self.value(logits)) - self.value(logits)[target];
        Ok(self.push(Op::Nll { logits, target, probs }, Tensor::scalar(loss)))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label` in {0, 1}.
    pub fn bce_logit(&mut self, logit: Var, label: F) -> Result<Var> {
        ensure!(self.value(logit).len() == 1, Shape, "bce expects a scalar logit");
        let z = self.value(logit)[0];
        // log(1 + e^z) - label * z, computed without overflow.
        let softplus = z.max(F::ZERO) + (F::ONE + (-z.abs()).exp()).ln();
        let loss = softplus - label * z;
        Ok(self.push(Op::BceLogit { logit, label }, Tensor::scalar(loss)))
    }

    /// Back-propagates from scalar `loss`, adding parameter gradients into
    /// `grads`. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients<F>) -> Result<()> {
        ensure!(loss.0 < self.nodes.len(), Contract, "backward called before any forward pass was recorded");
        ensure!(!self.consumed, Contract, "backward already ran on this graph; record a new forward pass");
        ensure!(self.value(loss).len() == 1, Shape, "backward needs a scalar loss");
        ensure!(grads.tensors.len() == self.params.len(), Shape, "gradient buffer does not match the parameter store");
        self.consumed = true;

        let mut adj: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let mut sink = Sink { nodes: &self.nodes, params: self.params, adj: &mut adj, grads: &mut *grads };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    kernels::axpy(F::ONE, &g, sink.grads.tensors[id.0].data_mut());
                }
                Op::Embed { table, row } => {
                    let d = g.len();
                    let dst = &mut sink.grads.tensors[table.0].data_mut()[row * d..(row + 1) * d];
                    kernels::axpy(F::ONE, &g, dst);
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (w, x, rows, cols) = (*w, *x, *rows, *cols);
                    let xv = sink.value(x).to_vec();
                    kernels::outer_acc(&g, &xv, sink.slot(w));
                    let wv: &[F] = value_of(self.params, &self.nodes, w);
                    kernels::matvec_t_acc(wv, rows, cols, &g, sink.slot(x));
                }
                Op::MatTVec { m, x, rows, cols } => {
                    let (m, x, rows, cols) = (*m, *x, *rows, *cols);
                    // out_j = sum_i M_ij x_i
                    let xv = sink.value(x).to_vec();
                    kernels::outer_acc(&xv, &g, sink.slot(m));
                    let mv: &[F] = value_of(self.params, &self.nodes, m);
                    let mut dx = vec![F::ZERO; rows];
                    kernels::matvec(mv, rows, cols, &g, &mut dx);
                    kernels::axpy(F::ONE, &dx, sink.slot(x));
                }
                Op::Add(a, b) => {
                    kernels::axpy(F::ONE, &g, sink.slot(*a));
                    kernels::axpy(F::ONE, &g, sink.slot(*b));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = sink.value(b).to_vec();
                    let av = sink.value(a).to_vec();
                    for ((d, gi), bi) in sink.slot(a).iter_mut().zip(&g).zip(&bv) {
                        *d += *gi * *bi;
                    }
                    for ((d, gi), ai) in sink.slot(b).iter_mut().zip(&g).zip(&av) {
                        *d += *gi * *ai;
                    }
                }
                Op::Scale(a, s) => kernels::axpy(*s, &g, sink.slot(*a)),
                Op::MulConst(a, c) => {
                    for ((d, gi), ci) in sink.slot(*a).iter_mut().zip(&g).zip(c) {
                        *d += *gi * *ci;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value").data();
                    for ((d, gi), yi) in sink.slot(*a).iter_mut().zip(&g).zip(y) {
                        *d += *gi * *yi * (F::ONE - *yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value").data();
                    for ((d, gi), yi) in sink.slot(*a).iter_mut().zip(&g).zip(y) {
                        *d += *gi * (F::ONE - *yi * *yi);
                    }
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = sink.value(a).to_vec();
                    let bv = sink.value(b).to_vec();
                    kernels::axpy(g[0], &bv, sink.slot(a));
                    kernels::axpy(g[0], &av, sink.slot(b));
                }
                Op::Slice { x, start } => {
                    let dst = sink.slot(*x);
                    kernels::axpy(F::ONE, &g, &mut dst[*start..*start + g.len()]);
                }
                Op::Concat(parts) | Op::Stack(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = sink.value(p).len();
                        kernels::axpy(F::ONE, &g[off..off + n], sink.slot(p));
                        off += n;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        kernels::axpy(F::ONE, &g, sink.slot(p));
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("value").data();
                    let gy = kernels::dot(&g, y);
                    for ((d, gi), yi) in sink.slot(*a).iter_mut().zip(&g).zip(y) {
                        *d += *yi * (*gi - gy);
                    }
                }
                Op::Nll { logits, target, probs } => {
                    let dst = sink.slot(*logits);
                    kernels::axpy(g[0], probs, dst);
                    dst[*target] -= g[0];
                }
                Op::BceLogit { logit, label } => {
                    let z = sink.value(*logit)[0];
                    sink.slot(*logit)[0] += g[0] * (kernels::sigmoid(z) - *label);
                }
            }
        }
        Ok(())
    }
}

fn value_of<'a, F: Real>(params: &'a ParamStore<F>, nodes: &'a [Node<F>], v: Var) -> &'a [F] {
    match &nodes[v.0].op {
        Op::Param(id) => params.get(*id).data(),
        _ => nodes[v.0].value.as_ref().expect("value").data(),
    }
}

/// Routes adjoint contributions either to an intermediate node or, for
/// parameter leaves, straight into the gradient buffer.
struct Sink<'a, F: Real> {
    nodes: &'a [Node<F>],
    params: &'a ParamStore<F>,
    adj: &'a mut [Option<Vec<F>>],
    grads: &'a mut Gradients<F>,
}

impl<F: Real> Sink<'_, F> {
    fn value(&self, v: Var) -> &[F] {
        value_of(self.params, self.nodes, v)
    }

    fn slot(&mut self, v: Var) -> &mut [F] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.grads.tensors[id.0].data_mut(),
            _ => {
                let n = value_of(self.params, self.nodes, v).len();
                self.adj[v.0].get_or_insert_with(|| vec![F::ZERO; n])
            }
        }
    }
}
