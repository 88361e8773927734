//! Define-by-run reverse-mode differentiation over dense matrices, with
//! structured adjoints for spectral functions `X ↦ U f(Λ) Uᵀ`.
//!
//! Every node holds a matrix value; vectors are `n×1` and scalars `1×1`.
//! Parents always precede their children, so the recording order is a
//! topological order and backward is a single reverse sweep.

mod divdiff;
mod gradcheck;

pub use divdiff::{divided_difference, DEGENERATE_GAP};
pub use gradcheck::{gradcheck, GradcheckReport, LeafReport};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_unchecked, EigDecomp, Mat};
use crate::manifold::{eig_fn, MatFn};
use crate::scalar::Real;
use crate::simplex::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `wᵀ x w`
    Congruence { x: NodeId, w: NodeId },
    /// `Σₖ weights[picks[k]] · terms[k]`
    WeightedSum {
        weights: NodeId,
        picks: Vec<usize>,
        terms: Vec<NodeId>,
    },
    Sum(Vec<NodeId>),
    /// `U f(Λ) Uᵀ` of the symmetric part of `x`.
    EigFn { x: NodeId, f: MatFn<T> },
    BlockDiag(NodeId, NodeId),
    /// Zero-pads to a multiple of `kernel`, then pools with stride `kernel`.
    Pool {
        x: NodeId,
        kernel: usize,
        kind: PoolKind,
    },
    /// Upper triangle, row-major, off-diagonals scaled by √2.
    TriuFlatten(NodeId),
    Concat(Vec<NodeId>),
    /// Row `i` of a matrix as a column vector.
    Row(NodeId, usize),
    Activation { z: NodeId, kind: Activation },
    MatVec { w: NodeId, v: NodeId },
    /// `−log softmax(logits)[label]`
    SoftmaxXent { logits: NodeId, label: usize },
    FrobSq(NodeId),
    Trace(NodeId),
    Dot(NodeId, NodeId),
}

impl<T> Op<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Congruence { .. } => "congruence",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::EigFn { .. } => "eig_fn",
            Op::BlockDiag(..) => "block_diag",
            Op::Pool { .. } => "pool",
            Op::TriuFlatten(..) => "triu_flatten",
            Op::Concat(..) => "concat",
            Op::Row(..) => "row",
            Op::Activation { .. } => "activation",
            Op::MatVec { .. } => "matvec",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::FrobSq(..) => "frob_sq",
            Op::Trace(..) => "trace",
            Op::Dot(..) => "dot",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::MatMul(a, b) | Op::BlockDiag(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::TriuFlatten(a)
            | Op::Row(a, _)
            | Op::FrobSq(a)
            | Op::Trace(a) => vec![*a],
            Op::Congruence { x, w } => vec![*x, *w],
            Op::WeightedSum { weights, terms, .. } => {
                let mut v = vec![*weights];
                v.extend(terms.iter().copied());
                v
            }
            Op::Sum(v) | Op::Concat(v) => v.clone(),
            Op::EigFn { x, .. } | Op::Pool { x, .. } => vec![*x],
            Op::Activation { z, .. } => vec![*z],
            Op::MatVec { w, v } => vec![*w, *v],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

/// Forward-pass data the backward rule needs beyond the parents' values.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Eig(Arc<EigDecomp<T>>),
    Argmax(Vec<usize>),
    Probs(Vec<T>),
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    op: Op<T>,
    value: Mat<T>,
    aux: Aux<T>,
}

impl<T> Node<T> {
    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn value(&self) -> &Mat<T> {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    /// The decomposition cached by a spectral node.
    pub fn eig_cache(&self, id: NodeId) -> Option<&EigDecomp<T>> {
        match &self.nodes[id.0].aux {
            Aux::Eig(e) => Some(e),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, aux: Aux<T>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> NodeId {
        self.push(Op::Leaf, value, Aux::None)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(Op::Constant, value, Aux::None)
    }

    fn v(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    /// Evaluates `op` on the recorded parent values and appends the node.
    pub fn record(&mut self, op: Op<T>) -> Result<NodeId> {
        let len = self.nodes.len();
        if let Some(p) = op.parents().into_iter().find(|p| p.0 >= len) {
            return Err(Error::contract(format!(
                "{} refers to node {} but the tape holds {len} nodes",
                op.tag(),
                p.0
            )));
        }
        let (value, aux) = self.forward(&op)?;
        Ok(self.push(op, value, aux))
    }

    fn forward(&self, op: &Op<T>) -> Result<(Mat<T>, Aux<T>)> {
        let none = Aux::None;
        Ok(match op {
            Op::Leaf | Op::Constant => {
                return Err(Error::contract("leaves are created with leaf()/constant()"))
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                if x.shape() != y.shape() {
                    return Err(shape_err(op.tag(), x.shape(), y.shape()));
                }
                let out = if matches!(op, Op::Add(..)) { x + y } else { x - y };
                (out, none)
            }
            Op::Scale(a, s) => (self.v(*a).scale(*s), none),
            Op::MatMul(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                if x.cols() != y.rows() {
                    return Err(shape_err("matmul", x.shape(), y.shape()));
                }
                (x.matmul(y), none)
            }
            Op::Transpose(a) => (self.v(*a).transpose(), none),
            Op::Congruence { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                if !xv.is_square() || xv.rows() != wv.rows() {
                    return Err(shape_err("congruence", xv.shape(), wv.shape()));
                }
                (xv.congruence_t(wv), none)
            }
            Op::WeightedSum {
                weights,
                picks,
                terms,
            } => {
                let w = self.v(*weights);
                if terms.is_empty() || picks.len() != terms.len() {
                    return Err(Error::contract("weighted_sum needs one pick per term"));
                }
                if w.cols() != 1 || picks.iter().any(|&p| p >= w.rows()) {
                    return Err(Error::shape("weighted_sum pick outside the weight vector"));
                }
                let shape = self.v(terms[0]).shape();
                let mut out = Mat::zeros(shape.0, shape.1);
                for (&p, t) in picks.iter().zip(terms) {
                    let tv = self.v(*t);
                    if tv.shape() != shape {
                        return Err(shape_err("weighted_sum", shape, tv.shape()));
                    }
                    out.axpy(w.as_slice()[p], tv);
                }
                (out, none)
            }
            Op::Sum(terms) => {
                let first = terms
                    .first()
                    .ok_or_else(|| Error::contract("sum of no terms"))?;
                let mut out = self.v(*first).clone();
                for t in &terms[1..] {
                    let tv = self.v(*t);
                    if tv.shape() != out.shape() {
                        return Err(shape_err("sum", out.shape(), tv.shape()));
                    }
                    out.add_assign(tv);
                }
                (out, none)
            }
            Op::EigFn { x, f } => {
                let xv = self.v(*x);
                if !xv.is_square() {
                    return Err(shape_err("eig_fn", xv.shape(), xv.shape()));
                }
                let e = sym_eig_unchecked(&xv.symmetrize());
                let out = eig_fn(&e, *f)?;
                (out, Aux::Eig(Arc::new(e)))
            }
            Op::BlockDiag(a, b) => (Mat::block_diag(self.v(*a), self.v(*b)), none),
            Op::Pool { x, kernel, kind } => {
                let xv = self.v(*x);
                if *kernel == 0 || !xv.is_square() {
                    return Err(Error::config("pooling needs a square input and kernel >= 1"));
                }
                let (out, arg) = pool_forward(xv, *kernel, *kind);
                (out, Aux::Argmax(arg))
            }
            Op::TriuFlatten(a) => {
                let xv = self.v(*a);
                if !xv.is_square() {
                    return Err(shape_err("triu_flatten", xv.shape(), xv.shape()));
                }
                let n = xv.rows();
                let r2 = T::two().sqrt();
                let mut out = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    out.push(xv[(i, i)]);
                    for j in (i + 1)..n {
                        out.push(r2 * xv[(i, j)]);
                    }
                }
                (Mat::column_vector(out), none)
            }
            Op::Concat(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    let pv = self.v(*p);
                    if pv.cols() != 1 {
                        return Err(Error::shape("concat takes column vectors"));
                    }
                    out.extend_from_slice(pv.as_slice());
                }
                (Mat::column_vector(out), none)
            }
            Op::Row(a, i) => {
                let xv = self.v(*a);
                if *i >= xv.rows() {
                    return Err(Error::shape(format!("row {i} of a {}-row matrix", xv.rows())));
                }
                (Mat::column_vector(xv.row(*i).to_vec()), none)
            }
            Op::Activation { z, kind } => {
                let zv = self.v(*z);
                if zv.cols() != 1 {
                    return Err(Error::shape("activation takes a column vector"));
                }
                (Mat::column_vector(kind.apply(zv.as_slice())?), none)
            }
            Op::MatVec { w, v } => {
                let (wv, vv) = (self.v(*w), self.v(*v));
                if vv.cols() != 1 || wv.cols() != vv.rows() {
                    return Err(shape_err("matvec", wv.shape(), vv.shape()));
                }
                (wv.matmul(vv), none)
            }
            Op::SoftmaxXent { logits, label } => {
                let z = self.v(*logits);
                if z.cols() != 1 || *label >= z.rows() {
                    return Err(Error::shape(format!(
                        "cross-entropy label {label} outside {} logits",
                        z.rows()
                    )));
                }
                let p = crate::simplex::softmax(z.as_slice())?;
                let zmax = z.as_slice().iter().copied().fold(T::neg_infinity(), T::max);
                let lse = zmax
                    + z.as_slice()
                        .iter()
                        .map(|&x| (x - zmax).exp())
                        .sum::<T>()
                        .ln();
                (Mat::scalar(lse - z.as_slice()[*label]), Aux::Probs(p))
            }
            Op::FrobSq(a) => {
                let xv = self.v(*a);
                (Mat::scalar(xv.dot(xv)), none)
            }
            Op::Trace(a) => {
                let xv = self.v(*a);
                if !xv.is_square() {
                    return Err(shape_err("trace", xv.shape(), xv.shape()));
                }
                (Mat::scalar(xv.trace()), none)
            }
            Op::Dot(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                if x.shape() != y.shape() {
                    return Err(shape_err("dot", x.shape(), y.shape()));
                }
                (Mat::scalar(x.dot(y)), none)
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.record(Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }

    /// `wᵀ x w`
    pub fn congruence(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::Congruence { x, w })
    }

    pub fn weighted_sum(&mut self, weights: NodeId, picks: Vec<usize>, terms: Vec<NodeId>) -> Result<NodeId> {
        self.record(Op::WeightedSum {
            weights,
            picks,
            terms,
        })
    }

    pub fn sum(&mut self, terms: Vec<NodeId>) -> Result<NodeId> {
        self.record(Op::Sum(terms))
    }

    pub fn eig_fn(&mut self, x: NodeId, f: MatFn<T>) -> Result<NodeId> {
        self.record(Op::EigFn { x, f })
    }

    /// Several spectral functions of one input sharing a single
    /// eigendecomposition.
    pub fn eig_fns(&mut self, x: NodeId, fs: &[MatFn<T>]) -> Result<Vec<NodeId>> {
        if x.0 >= self.nodes.len() {
            return Err(Error::contract(format!("eig_fns refers to missing node {}", x.0)));
        }
        let xv = self.v(x);
        if !xv.is_square() {
            return Err(shape_err("eig_fn", xv.shape(), xv.shape()));
        }
        let e = Arc::new(sym_eig_unchecked(&xv.symmetrize()));
        let mut ids = Vec::with_capacity(fs.len());
        for &f in fs {
            let out = eig_fn(&e, f)?;
            ids.push(self.push(Op::EigFn { x, f }, out, Aux::Eig(e.clone())));
        }
        Ok(ids)
    }

    pub fn block_diag(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::BlockDiag(a, b))
    }

    pub fn pool(&mut self, x: NodeId, kernel: usize, kind: PoolKind) -> Result<NodeId> {
        self.record(Op::Pool { x, kernel, kind })
    }

    pub fn triu_flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::TriuFlatten(x))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.record(Op::Concat(parts))
    }

    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        self.record(Op::Row(x, i))
    }

    pub fn activation(&mut self, z: NodeId, kind: Activation) -> Result<NodeId> {
        self.record(Op::Activation { z, kind })
    }

    pub fn matvec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec { w, v })
    }

    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.record(Op::SoftmaxXent { logits, label })
    }

    pub fn frob_sq(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::FrobSq(x))
    }

    pub fn trace(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Trace(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Dot(a, b))
    }

    /// Reverse sweep from a scalar node. Nodes the loss does not depend on
    /// get no adjoint.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("loss node {} is not on the tape", loss.0)));
        }
        if self.v(loss).shape() != (1, 1) {
            return Err(Error::contract("backward needs a scalar loss node"));
        }
        let mut adj: Vec<Option<Mat<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let (lower, upper) = adj.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(i, g, lower);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, g: &Mat<T>, adj: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, -g);
            }
            Op::Scale(a, s) => acc(adj, *a, g.scale(*s)),
            Op::MatMul(a, b) => {
                acc(adj, *a, g.matmul_t(self.v(*b)));
                acc(adj, *b, self.v(*a).t_matmul(g));
            }
            Op::Transpose(a) => acc(adj, *a, g.transpose()),
            Op::Congruence { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                acc(adj, *x, g.congruence(wv));
                let xw = xv.matmul(wv);
                let mut gw = xw.matmul_t(g);
                gw.add_assign(&xv.t_matmul(&wv.matmul(g)));
                acc(adj, *w, gw);
            }
            Op::WeightedSum {
                weights,
                picks,
                terms,
            } => {
                let wv = self.v(*weights);
                let mut gw = Mat::zeros(wv.rows(), 1);
                for (&p, t) in picks.iter().zip(terms) {
                    gw.as_mut_slice()[p] += g.dot(self.v(*t));
                    acc(adj, *t, g.scale(wv.as_slice()[p]));
                }
                acc(adj, *weights, gw);
            }
            Op::Sum(terms) => {
                for t in terms {
                    acc(adj, *t, g.clone());
                }
            }
            Op::EigFn { x, f } => {
                let Aux::Eig(e) = &node.aux else {
                    unreachable!("spectral node without cached decomposition")
                };
                acc(adj, *x, spectral_adjoint(e, *f, g));
            }
            Op::BlockDiag(a, b) => {
                let (ra, ca) = self.v(*a).shape();
                let (rb, cb) = self.v(*b).shape();
                acc(adj, *a, g.block(0, 0, ra, ca));
                acc(adj, *b, g.block(ra, ca, rb, cb));
            }
            Op::Pool { x, kernel, kind } => {
                let Aux::Argmax(arg) = &node.aux else {
                    unreachable!("pool node without argmax cache")
                };
                acc(adj, *x, pool_backward(self.v(*x).rows(), *kernel, *kind, arg, g));
            }
            Op::TriuFlatten(a) => {
                let n = self.v(*a).rows();
                let r2 = T::two().sqrt();
                let mut gx = Mat::zeros(n, n);
                let mut k = 0;
                for i in 0..n {
                    gx[(i, i)] = g.as_slice()[k];
                    k += 1;
                    for j in (i + 1)..n {
                        gx[(i, j)] = r2 * g.as_slice()[k];
                        k += 1;
                    }
                }
                acc(adj, *a, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.v(*p).rows();
                    acc(adj, *p, Mat::column_vector(g.as_slice()[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::Row(a, r) => {
                let (rows, cols) = self.v(*a).shape();
                let mut gx = Mat::zeros(rows, cols);
                for j in 0..cols {
                    gx[(*r, j)] = g.as_slice()[j];
                }
                acc(adj, *a, gx);
            }
            Op::Activation { z, kind } => {
                let gz = kind.vjp(self.v(*z).as_slice(), node.value.as_slice(), g.as_slice());
                acc(adj, *z, Mat::column_vector(gz));
            }
            Op::MatVec { w, v } => {
                acc(adj, *w, g.matmul_t(self.v(*v)));
                acc(adj, *v, self.v(*w).t_matmul(g));
            }
            Op::SoftmaxXent { logits, label } => {
                let Aux::Probs(p) = &node.aux else {
                    unreachable!("cross-entropy node without probabilities")
                };
                let s = g.item();
                let mut gz: Vec<T> = p.iter().map(|&x| x * s).collect();
                gz[*label] -= s;
                acc(adj, *logits, Mat::column_vector(gz));
            }
            Op::FrobSq(a) => acc(adj, *a, self.v(*a).scale(T::two() * g.item())),
            Op::Trace(a) => acc(adj, *a, Mat::identity(self.v(*a).rows()).scale(g.item())),
            Op::Dot(a, b) => {
                acc(adj, *a, self.v(*b).scale(g.item()));
                acc(adj, *b, self.v(*a).scale(g.item()));
            }
        }
    }
}

fn acc<T: Real>(adj: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
    match &mut adj[id.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `U (P ∘ (Uᵀ sym(Ḡ) U)) Uᵀ` with `P` the divided-difference matrix of `f`.
pub fn spectral_adjoint<T: Real>(e: &EigDecomp<T>, f: MatFn<T>, g: &Mat<T>) -> Mat<T> {
    let n = e.dim();
    let u = &e.vectors;
    let inner = g.symmetrize().congruence_t(u);
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let p = divided_difference(f, e.values[i], e.values[j]);
            let v = p * inner[(i, j)];
            m[(i, j)] = v;
            m[(j, i)] = p * inner[(j, i)];
        }
    }
    m.congruence(u).symmetrize()
}

pub(crate) fn pool_forward<T: Real>(x: &Mat<T>, k: usize, kind: PoolKind) -> (Mat<T>, Vec<usize>) {
    let n = x.rows();
    let padded = n.div_ceil(k) * k;
    let m = padded / k;
    let at = |i: usize, j: usize| if i < n && j < n { x[(i, j)] } else { T::zero() };
    let mut out = Mat::zeros(m, m);
    let mut arg = Vec::new();
    let inv = T::one() / T::from_usize(k * k).expect("usize to float");
    for bi in 0..m {
        for bj in 0..m {
            match kind {
                PoolKind::Avg => {
                    let mut s = T::zero();
                    for i in bi * k..(bi + 1) * k {
                        for j in bj * k..(bj + 1) * k {
                            s += at(i, j);
                        }
                    }
                    out[(bi, bj)] = s * inv;
                }
                PoolKind::Max => {
                    // row-major scan with strict comparison: ties go to the
                    // lowest (row, column)
                    let mut best = (bi * k, bj * k);
                    let mut bv = at(best.0, best.1);
                    for i in bi * k..(bi + 1) * k {
                        for j in bj * k..(bj + 1) * k {
                            let v = at(i, j);
                            if v > bv {
                                bv = v;
                                best = (i, j);
                            }
                        }
                    }
                    out[(bi, bj)] = bv;
                    arg.push(best.0 * padded + best.1);
                }
            }
        }
    }
    (out, arg)
}

fn pool_backward<T: Real>(n: usize, k: usize, kind: PoolKind, arg: &[usize], g: &Mat<T>) -> Mat<T> {
    let padded = n.div_ceil(k) * k;
    let m = padded / k;
    let mut gx = Mat::zeros(n, n);
    match kind {
        PoolKind::Avg => {
            let inv = T::one() / T::from_usize(k * k).expect("usize to float");
            for i in 0..n {
                for j in 0..n {
                    gx[(i, j)] = g[(i / k, j / k)] * inv;
                }
            }
        }
        PoolKind::Max => {
            for bi in 0..m {
                for bj in 0..m {
                    let idx = arg[bi * m + bj];
                    let (i, j) = (idx / padded, idx % padded);
                    if i < n && j < n {
                        gx[(i, j)] += g[(bi, bj)];
                    }
                }
            }
        }
    }
    gx
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the loss does not depend on `id`.
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, or zeros shaped like its value.
    pub fn wrt(&self, tape: &Tape<T>, id: NodeId) -> Mat<T> {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Mat::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_spd, random_stiefel, rng};

    #[test]
    fn trace_log_gradient_on_diagonal() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_diag(&[2.0, 5.0]));
        let l = t.eig_fn(x, MatFn::Log).unwrap();
        let tr = t.trace(l).unwrap();
        let g = t.backward(tr).unwrap();
        let gx = g.get(x).unwrap();
        assert!((gx - &Mat::from_diag(&[0.5, 0.2])).max_abs() < 1e-15);
    }

    #[test]
    fn spectral_node_caches_decomposition() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_diag(&[3.0, 1.0]));
        let l = t.eig_fn(x, MatFn::Log).unwrap();
        let e = t.eig_cache(l).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!(t.eig_cache(x).is_none());
    }

    #[test]
    fn missing_parent_is_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(Mat::identity(2));
        let err = t.record(Op::Add(a, NodeId(5))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Mat::identity(2));
        let b = t.leaf(Mat::identity(2));
        let s = t.frob_sq(a).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(&t, b), Mat::zeros(2, 2));
    }

    #[test]
    fn replay_equals_direct_evaluation() {
        let mut r = rng(21);
        let x = random_spd(&mut r, 5, 30.0);
        let w = random_stiefel(&mut r, 5, 3);
        let mut t = Tape::new();
        let xn = t.leaf(x.as_mat().clone());
        let wn = t.leaf(w.clone());
        let y = t.congruence(xn, wn).unwrap();
        let re = t.eig_fn(y, MatFn::Rectify(0.5)).unwrap();
        let lg = t.eig_fn(re, MatFn::Log).unwrap();

        let y_direct = x.as_mat().congruence_t(&w);
        let re_direct = crate::manifold::spd_fn(&crate::manifold::SymMatrix::from_symmetrized(&y_direct), MatFn::Rectify(0.5)).unwrap();
        let lg_direct = crate::manifold::spd_fn(&re_direct, MatFn::Log).unwrap();
        assert_eq!(t.value(y), &y_direct);
        assert_eq!(t.value(lg), lg_direct.as_mat());
    }

    #[test]
    fn spectral_adjoint_is_exactly_symmetric() {
        let mut r = rng(22);
        let x = random_spd(&mut r, 6, 10.0);
        let e = sym_eig_unchecked(x.as_mat());
        let g = crate::testing::gaussian(&mut r, 6, 6);
        let a = spectral_adjoint(&e, MatFn::Log, &g);
        assert_eq!(a.asymmetry(), 0.0);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_fn(2, 2, |_, _| 1.0));
        let p = t.pool(x, 2, PoolKind::Max).unwrap();
        let s = t.trace(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    }
}
