//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in reverse, visiting each recorded op once, and adds the resulting
//! gradients into the leaves that asked for them.

use alloc::vec;
use alloc::vec::Vec;

use crate::adjacency::{self, Metric, WdMode};
use crate::error::{Error, Result};
use crate::kernels::{self, dot, NORM_EPS};
use crate::optim::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{volume, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Margin loss constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub m_pos: f64,
    pub m_neg: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            m_pos: 0.9,
            m_neg: 0.1,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LeakySoftmax(Var),
    Squash(Var),
    RowNorms(Var),
    L2Norm(Var),
    Gather { table: Var, ids: Vec<usize>, frozen: Option<usize> },
    NgramConv { x: Var, w: Var, b: Var, window: usize, stride: usize },
    PrimaryCaps { g: Var, w: Var, b: Var },
    Transform { u: Var, w: Var, b: Var },
    Adjacency { x: Var, metric: Metric, wd: WdMode },
    ClassicAffinity { x: Var, metric: Metric, wd: WdMode },
    AddIdentity(Var),
    SymNormalize(Var),
    LeftMatmulBatched { a: Var, x: Var },
    AffineScore { x: Var, w: Var, b: Var },
    ScaleVectors { x: Var, alpha: Var },
    WeightedVoteSum { c: Var, o: Var },
    Agreement { u_hat: Var, v: Var },
    MarginLoss { p: Var, label: usize, params: MarginParams },
    CrossEntropy { p: Var, label: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LeakySoftmax(_) => "leaky_softmax",
            Op::Squash(_) => "squash",
            Op::RowNorms(_) => "row_norms",
            Op::L2Norm(_) => "l2_norm",
            Op::Gather { .. } => "gather",
            Op::NgramConv { .. } => "ngram_conv",
            Op::PrimaryCaps { .. } => "primary_capsules",
            Op::Transform { .. } => "transform",
            Op::Adjacency { .. } => "pairwise_adjacency",
            Op::ClassicAffinity { .. } => "classic_affinity",
            Op::AddIdentity(_) => "add_identity",
            Op::SymNormalize(_) => "sym_normalize",
            Op::LeftMatmulBatched { .. } => "gcn_aggregate",
            Op::AffineScore { .. } => "affine_score",
            Op::ScaleVectors { .. } => "scale_vectors",
            Op::WeightedVoteSum { .. } => "weighted_vote_sum",
            Op::Agreement { .. } => "agreement",
            Op::MarginLoss { .. } => "margin_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
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

    /// Drops every node. Parameter stores are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Tape::input`] or [`Tape::param`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf that receives gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A leaf bound to a stored parameter; see [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Parameter leaves on this tape together with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    /// First node whose value holds NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Error> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| Error::NonFinite {
                node: i,
                op: n.op.name(),
            })
        })
    }

    // ---- elementwise and linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| T::from_f64(k * v.to_f64()));
        self.derived(t, Op::Scale(x, k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.derived(Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v.to_f64() > 0.0 { v } else { T::ZERO });
        self.derived(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::from_f64(libm::tanh(v.to_f64())));
        self.derived(t, Op::Tanh(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if volume(shape) != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let data = kernels::softmax(self.value(x).data(), self.shape(x), axis);
        let shape = self.shape(x).to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis with an extra zero logit whose mass is discarded.
    pub fn leaky_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let data = kernels::leaky_softmax_rows(self.value(x).data(), cols);
        Ok(self.derived(Tensor::from_parts(shape, data), Op::LeakySoftmax(x), &[x]))
    }

    /// Squash each vector along the last axis.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let data = kernels::squash_rows(self.value(x).data(), d);
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Squash(x), &[x]))
    }

    /// Euclidean length of each vector along the last axis.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (&d, rest) = shape
            .split_last()
            .ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let data = kernels::row_norms(self.value(x).data(), d);
        Ok(self.derived(Tensor::from_parts(rest.to_vec(), data), Op::RowNorms(x), &[x]))
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = libm::sqrt(kernels::sum_sq(self.value(x).data()));
        self.derived(Tensor::scalar(T::from_f64(n)), Op::L2Norm(x), &[x])
    }

    // ---- model layers ----

    /// Looks up rows of `table`. Row `frozen`, when given, never receives gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(mismatch("gather", shape, &[ids.len()]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: rows,
            });
        }
        let data = kernels::gather_rows(self.value(table).data(), width, ids);
        let t = Tensor::from_parts(vec![ids.len(), width], data);
        Ok(self.derived(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                frozen,
            },
            &[table],
        ))
    }

    /// Strided n-gram convolution (pre-activation). `x: [L, D]`, `w: [F, K·D]`, `b: [F]`.
    pub fn ngram_conv(&mut self, x: Var, w: Var, b: Var, window: usize, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sw[0] != sb[0] || sw[1] != window * sx[1] {
            return Err(mismatch("ngram_conv", sx, sw));
        }
        let (len, dim, filters) = (sx[0], sx[1], sw[0]);
        let positions = kernels::conv_output_len(len, window, stride).ok_or(Error::SequenceTooShort { len, window })?;
        let data = kernels::ngram_conv(
            self.value(x).data(),
            dim,
            self.value(w).data(),
            self.value(b).data(),
            window,
            stride,
            positions,
        );
        let t = Tensor::from_parts(vec![positions, filters], data);
        Ok(self.derived(t, Op::NgramConv { x, w, b, window, stride }, &[x, w, b]))
    }

    /// Primary capsule pre-activation. `g: [P, B1]`, `w: [B2, B1, d]`, `b: [B2, d]` → `[P·B2, d]`.
    pub fn primary_caps(&mut self, g: Var, w: Var, b: Var) -> Result<Var> {
        let (sg, sw, sb) = (self.shape(g), self.shape(w), self.shape(b));
        if sg.len() != 2 || sw.len() != 3 || sb.len() != 2 || sw[1] != sg[1] || sb[0] != sw[0] || sb[1] != sw[2] {
            return Err(mismatch("primary_capsules", sg, sw));
        }
        let (positions, in_ch, filters, d) = (sg[0], sg[1], sw[0], sw[2]);
        let data = kernels::primary_caps(self.value(g).data(), in_ch, self.value(w).data(), self.value(b).data(), filters, d);
        let t = Tensor::from_parts(vec![positions * filters, d], data);
        Ok(self.derived(t, Op::PrimaryCaps { g, w, b }, &[g, w, b]))
    }

    /// Per-class affine transform. `u: [N, d]`, `w: [C, d, d]`, `b: [C, d]` → `[C, N, d]`.
    pub fn transform(&mut self, u: Var, w: Var, b: Var) -> Result<Var> {
        let (su, sw, sb) = (self.shape(u), self.shape(w), self.shape(b));
        if su.len() != 2 || sw.len() != 3 || sb.len() != 2 || sw[1] != su[1] || sw[2] != su[1] || sb[0] != sw[0] || sb[1] != su[1] {
            return Err(mismatch("transform", su, sw));
        }
        let (n, d, classes) = (su[0], su[1], sw[0]);
        let data = kernels::transform(self.value(u).data(), self.value(w).data(), self.value(b).data(), classes, d);
        let t = Tensor::from_parts(vec![classes, n, d], data);
        Ok(self.derived(t, Op::Transform { u, w, b }, &[u, w, b]))
    }

    /// Nonpositive intra-layer relationship matrix over the rows of `x: [N, d]`.
    pub fn adjacency(&mut self, x: Var, metric: Metric, wd: WdMode) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("pairwise_adjacency", s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let a = adjacency::relation_matrix(self.value(x).data(), n, d, metric, wd);
        let t = Tensor::from_parts(vec![n, n], kernels::round(&a));
        Ok(self.derived(t, Op::Adjacency { x, metric, wd }, &[x]))
    }

    /// Nonnegative affinities for the classic renormalization (zero diagonal).
    pub fn classic_affinity(&mut self, x: Var, metric: Metric, wd: WdMode) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("classic_affinity", s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let a = adjacency::relation_matrix(self.value(x).data(), n, d, metric, wd);
        let m = adjacency::classic_from_relation(&a, n, metric);
        let t = Tensor::from_parts(vec![n, n], kernels::round(&m));
        Ok(self.derived(t, Op::ClassicAffinity { x, metric, wd }, &[x]))
    }

    pub fn add_identity(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(mismatch("add_identity", s, s));
        }
        let n = s[0];
        let mut t = self.value(x).clone();
        for i in 0..n {
            let v = &mut t.data_mut()[i * n + i];
            *v = T::from_f64(v.to_f64() + 1.0);
        }
        Ok(self.derived(t, Op::AddIdentity(x), &[x]))
    }

    /// `D^{-1/2} M D^{-1/2}` with `D_ii = Σ_j M_ij`.
    pub fn sym_normalize(&mut self, m: Var) -> Result<Var> {
        let s = self.shape(m);
        if s.len() != 2 || s[0] != s[1] {
            return Err(mismatch("sym_normalize", s, s));
        }
        let n = s[0];
        let out = adjacency::sym_normalize(self.value(m).data(), n)?;
        let t = Tensor::from_parts(vec![n, n], kernels::round(&out));
        Ok(self.derived(t, Op::SymNormalize(m), &[m]))
    }

    /// `y[c] = a·x[c]` for each `[N, d]` slab of `x: [C, N, d]`.
    pub fn left_matmul_batched(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sa[0] != sa[1] || sx.len() != 3 || sx[1] != sa[0] {
            return Err(mismatch("gcn_aggregate", sa, sx));
        }
        let (n, d) = (sx[1], sx[2]);
        let data = kernels::left_matmul_batched(self.value(a).data(), self.value(x).data(), n, d);
        let shape = sx.to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::LeftMatmulBatched { a, x }, &[a, x]))
    }

    /// `y_r = x_r·w + b` for `x: [R, d]`, `w: [d]`, scalar `b`.
    pub fn affine_score(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 1 || sw[0] != sx[1] || self.value(b).len() != 1 {
            return Err(mismatch("affine_score", sx, sw));
        }
        let (rows, d) = (sx[0], sx[1]);
        let bias = self.value(b).item().to_f64();
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let data = (0..rows)
            .map(|r| T::from_f64(dot(&xd[r * d..(r + 1) * d], wd) + bias))
            .collect();
        Ok(self.derived(Tensor::from_parts(vec![rows], data), Op::AffineScore { x, w, b }, &[x, w, b]))
    }

    /// Multiplies each vector `x[c, i, :]` by `alpha[c, i]`.
    pub fn scale_vectors(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(alpha));
        if sx.len() != 3 || sa != &sx[..2] {
            return Err(mismatch("scale_vectors", sx, sa));
        }
        let d = sx[2];
        let (xd, ad) = (self.value(x).data(), self.value(alpha).data());
        let data = xd
            .chunks(d)
            .zip(ad)
            .flat_map(|(row, &k)| {
                let k = k.to_f64();
                row.iter().map(move |&v| T::from_f64(k * v.to_f64()))
            })
            .collect();
        let shape = sx.to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::ScaleVectors { x, alpha }, &[x, alpha]))
    }

    /// `s[j] = Σ_i c[i, j]·o[j, i]` with `c: [N, C]`, `o: [C, N, d]` → `[C, d]`.
    pub fn weighted_vote_sum(&mut self, c: Var, o: Var) -> Result<Var> {
        let (sc, so) = (self.shape(c), self.shape(o));
        if sc.len() != 2 || so.len() != 3 || sc[0] != so[1] || sc[1] != so[0] {
            return Err(mismatch("weighted_vote_sum", sc, so));
        }
        let (classes, d) = (so[0], so[2]);
        let data = kernels::weighted_vote_sum(self.value(c).data(), self.value(o).data(), classes, d);
        Ok(self.derived(Tensor::from_parts(vec![classes, d], data), Op::WeightedVoteSum { c, o }, &[c, o]))
    }

    /// `a[i, j] = û[j, i]·v[j]` with `û: [C, N, d]`, `v: [C, d]` → `[N, C]`.
    pub fn agreement(&mut self, u_hat: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u_hat), self.shape(v));
        if su.len() != 3 || sv.len() != 2 || su[0] != sv[0] || su[2] != sv[1] {
            return Err(mismatch("agreement", su, sv));
        }
        let (classes, n, d) = (su[0], su[1], su[2]);
        let data = kernels::agreement(self.value(u_hat).data(), self.value(v).data(), classes, d);
        Ok(self.derived(Tensor::from_parts(vec![n, classes], data), Op::Agreement { u_hat, v }, &[u_hat, v]))
    }

    pub fn margin_loss(&mut self, p: Var, label: usize, params: MarginParams) -> Result<Var> {
        let classes = self.value(p).len();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let l = kernels::margin_loss(self.value(p).data(), label, params.m_pos, params.m_neg, params.lambda);
        Ok(self.derived(Tensor::scalar(T::from_f64(l)), Op::MarginLoss { p, label, params }, &[p]))
    }

    /// Softmax cross-entropy treating `p` as logits.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let classes = self.value(p).len();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let l = kernels::cross_entropy(self.value(p).data(), label);
        Ok(self.derived(Tensor::scalar(T::from_f64(l)), Op::CrossEntropy { p, label }, &[p]))
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    ///
    /// Gradients accumulate across calls until the tape is cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match self.nodes[idx].op {
                Op::Constant => {}
                Op::Input | Op::Param(_) => {
                    let node = &mut self.nodes[idx];
                    match &mut node.grad {
                        Some(acc) => acc
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, &d)| *a = T::from_f64(a.to_f64() + d)),
                        None => node.grad = Some(kernels::round(&g)),
                    }
                }
                _ => self.propagate(idx, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let out = nodes[idx].value.data();
        // Adds into the gradient buffer of `v` when it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &nodes[idx].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let s: f64 = g[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(&x, y)| x * y.to_f64())
                                .sum();
                            ga[i * k + kk] += s;
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk].to_f64();
                            if aik == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *dst += aik * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i].to_f64();
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i].to_f64();
                    }
                });
            }
            &Op::Scale(x, k) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += k * b)),
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            &Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i].to_f64() > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            &Op::Tanh(x) => acc(x, &mut |gx| {
                for i in 0..g.len() {
                    let y = out[i].to_f64();
                    gx[i] += g[i] * (1.0 - y * y);
                }
            }),
            &Op::Reshape(x) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::axis_split(shape(x), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let s: f64 = (0..n).map(|k| g[at(k)] * out[at(k)].to_f64()).sum();
                            for k in 0..n {
                                gx[at(k)] += out[at(k)].to_f64() * (g[at(k)] - s);
                            }
                        }
                    }
                });
            }
            &Op::LeakySoftmax(x) => {
                let cols = *shape(x).last().unwrap();
                acc(x, &mut |gx| {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let yrow = &out[r * cols..(r + 1) * cols];
                        // The leak slot has zero upstream gradient.
                        let s: f64 = grow.iter().zip(yrow).map(|(a, y)| a * y.to_f64()).sum();
                        for k in 0..cols {
                            gx[r * cols + k] += yrow[k].to_f64() * (grow[k] - s);
                        }
                    }
                });
            }
            &Op::Squash(x) => {
                let d = *shape(x).last().unwrap();
                let xv = val(x);
                acc(x, &mut |gx| {
                    for (r, srow) in xv.chunks(d).enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let n2 = kernels::sum_sq(srow);
                        let n = libm::sqrt(n2);
                        let f = n / (1.0 + n2);
                        let sg: f64 = srow.iter().zip(grow).map(|(s, g)| s.to_f64() * g).sum();
                        let radial = if n > NORM_EPS {
                            (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n * sg
                        } else {
                            0.0
                        };
                        for a in 0..d {
                            gx[r * d + a] += f * grow[a] + radial * srow[a].to_f64();
                        }
                    }
                });
            }
            &Op::RowNorms(x) => {
                let d = *shape(x).last().unwrap();
                let xv = val(x);
                acc(x, &mut |gx| {
                    for (r, row) in xv.chunks(d).enumerate() {
                        let n = out[r].to_f64().max(NORM_EPS);
                        for a in 0..d {
                            gx[r * d + a] += g[r] * row[a].to_f64() / n;
                        }
                    }
                });
            }
            &Op::L2Norm(x) => {
                let xv = val(x);
                let n = out[0].to_f64().max(NORM_EPS);
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[0] * xv[i].to_f64() / n;
                    }
                });
            }
            Op::Gather { table, ids, frozen } => {
                let width = shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen {
                            continue;
                        }
                        for a in 0..width {
                            gt[id * width + a] += g[r * width + a];
                        }
                    }
                });
            }
            &Op::NgramConv { x, w, b, window, stride } => {
                let dim = shape(x)[1];
                let filters = shape(w)[0];
                let span = window * dim;
                let positions = g.len() / filters;
                let (xv, wv) = (val(x), val(w));
                acc(b, &mut |gb| {
                    for t in 0..positions {
                        for f in 0..filters {
                            gb[f] += g[t * filters + f];
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for t in 0..positions {
                        let win = &xv[t * stride * dim..t * stride * dim + span];
                        for f in 0..filters {
                            let gf = g[t * filters + f];
                            if gf == 0.0 {
                                continue;
                            }
                            for (dst, xw) in gw[f * span..(f + 1) * span].iter_mut().zip(win) {
                                *dst += gf * xw.to_f64();
                            }
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for t in 0..positions {
                        let start = t * stride * dim;
                        for f in 0..filters {
                            let gf = g[t * filters + f];
                            if gf == 0.0 {
                                continue;
                            }
                            for (dst, wf) in gx[start..start + span].iter_mut().zip(&wv[f * span..(f + 1) * span]) {
                                *dst += gf * wf.to_f64();
                            }
                        }
                    }
                });
            }
            &Op::PrimaryCaps { g: gin, w, b } => {
                let in_ch = shape(gin)[1];
                let (filters, d) = (shape(w)[0], shape(w)[2]);
                let positions = shape(gin)[0];
                let (gv, wv) = (val(gin), val(w));
                acc(b, &mut |gb| {
                    for t in 0..positions {
                        for f in 0..filters {
                            let up = &g[(t * filters + f) * d..(t * filters + f + 1) * d];
                            for (dst, u) in gb[f * d..(f + 1) * d].iter_mut().zip(up) {
                                *dst += u;
                            }
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for t in 0..positions {
                        for f in 0..filters {
                            let up = &g[(t * filters + f) * d..(t * filters + f + 1) * d];
                            for c in 0..in_ch {
                                let gc = gv[t * in_ch + c].to_f64();
                                if gc == 0.0 {
                                    continue;
                                }
                                let base = (f * in_ch + c) * d;
                                for (dst, u) in gw[base..base + d].iter_mut().zip(up) {
                                    *dst += gc * u;
                                }
                            }
                        }
                    }
                });
                acc(gin, &mut |gg| {
                    for t in 0..positions {
                        for f in 0..filters {
                            let up = &g[(t * filters + f) * d..(t * filters + f + 1) * d];
                            for c in 0..in_ch {
                                let base = (f * in_ch + c) * d;
                                let s: f64 = wv[base..base + d].iter().zip(up).map(|(w, u)| w.to_f64() * u).sum();
                                gg[t * in_ch + c] += s;
                            }
                        }
                    }
                });
            }
            &Op::Transform { u, w, b } => {
                let (n, d) = (shape(u)[0], shape(u)[1]);
                let classes = shape(w)[0];
                let (uv, wv) = (val(u), val(w));
                acc(b, &mut |gb| {
                    for j in 0..classes {
                        for i in 0..n {
                            for a in 0..d {
                                gb[j * d + a] += g[(j * n + i) * d + a];
                            }
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for j in 0..classes {
                        for i in 0..n {
                            let ui = &uv[i * d..(i + 1) * d];
                            for a in 0..d {
                                let up = g[(j * n + i) * d + a];
                                for (dst, x) in gw[(j * d + a) * d..(j * d + a + 1) * d].iter_mut().zip(ui) {
                                    *dst += up * x.to_f64();
                                }
                            }
                        }
                    }
                });
                acc(u, &mut |gu| {
                    for j in 0..classes {
                        for i in 0..n {
                            for a in 0..d {
                                let up = g[(j * n + i) * d + a];
                                let wrow = &wv[(j * d + a) * d..(j * d + a + 1) * d];
                                for (dst, x) in gu[i * d..(i + 1) * d].iter_mut().zip(wrow) {
                                    *dst += up * x.to_f64();
                                }
                            }
                        }
                    }
                });
            }
            &Op::Adjacency { x, metric, wd } => {
                let (n, d) = (shape(x)[0], shape(x)[1]);
                let xv = val(x);
                acc(x, &mut |gx| adjacency::relation_backward(xv, n, d, metric, wd, g, gx));
            }
            &Op::ClassicAffinity { x, metric, wd } => {
                let (n, d) = (shape(x)[0], shape(x)[1]);
                let xv = val(x);
                acc(x, &mut |gx| {
                    let a = adjacency::relation_matrix(xv, n, d, metric, wd);
                    let weights = adjacency::classic_chain(&a, g, n, metric);
                    adjacency::relation_backward(xv, n, d, metric, wd, &weights, gx);
                });
            }
            &Op::AddIdentity(x) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::SymNormalize(m) => {
                let n = shape(m)[0];
                let mv = val(m);
                acc(m, &mut |gm| adjacency::sym_normalize_backward(mv, n, g, gm));
            }
            &Op::LeftMatmulBatched { a, x } => {
                let (n, d) = (shape(x)[1], shape(x)[2]);
                let slabs = shape(x)[0];
                let (av, xv) = (val(a), val(x));
                acc(a, &mut |ga| {
                    for c in 0..slabs {
                        for i in 0..n {
                            let grow = &g[(c * n + i) * d..(c * n + i + 1) * d];
                            for k in 0..n {
                                let xrow = &xv[(c * n + k) * d..(c * n + k + 1) * d];
                                ga[i * n + k] += grow.iter().zip(xrow).map(|(p, q)| p * q.to_f64()).sum::<f64>();
                            }
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for c in 0..slabs {
                        for i in 0..n {
                            let grow = &g[(c * n + i) * d..(c * n + i + 1) * d];
                            for k in 0..n {
                                let aik = av[i * n + k].to_f64();
                                for (dst, p) in gx[(c * n + k) * d..(c * n + k + 1) * d].iter_mut().zip(grow) {
                                    *dst += aik * p;
                                }
                            }
                        }
                    }
                });
            }
            &Op::AffineScore { x, w, b } => {
                let d = shape(x)[1];
                let (xv, wv) = (val(x), val(w));
                acc(b, &mut |gb| gb[0] += g.iter().sum::<f64>());
                acc(w, &mut |gw| {
                    for (r, &gr) in g.iter().enumerate() {
                        for a in 0..d {
                            gw[a] += gr * xv[r * d + a].to_f64();
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        for a in 0..d {
                            gx[r * d + a] += gr * wv[a].to_f64();
                        }
                    }
                });
            }
            &Op::ScaleVectors { x, alpha } => {
                let d = shape(x)[2];
                let (xv, av) = (val(x), val(alpha));
                acc(x, &mut |gx| {
                    for (r, &k) in av.iter().enumerate() {
                        let k = k.to_f64();
                        for a in 0..d {
                            gx[r * d + a] += k * g[r * d + a];
                        }
                    }
                });
                acc(alpha, &mut |ga| {
                    for r in 0..av.len() {
                        ga[r] += g[r * d..(r + 1) * d]
                            .iter()
                            .zip(&xv[r * d..(r + 1) * d])
                            .map(|(p, q)| p * q.to_f64())
                            .sum::<f64>();
                    }
                });
            }
            &Op::WeightedVoteSum { c, o } => {
                let (classes, n, d) = (shape(o)[0], shape(o)[1], shape(o)[2]);
                let (cv, ov) = (val(c), val(o));
                acc(c, &mut |gc| {
                    for j in 0..classes {
                        let gj = &g[j * d..(j + 1) * d];
                        for i in 0..n {
                            let oji = &ov[(j * n + i) * d..(j * n + i + 1) * d];
                            gc[i * classes + j] += gj.iter().zip(oji).map(|(p, q)| p * q.to_f64()).sum::<f64>();
                        }
                    }
                });
                acc(o, &mut |go| {
                    for j in 0..classes {
                        let gj = &g[j * d..(j + 1) * d];
                        for i in 0..n {
                            let cij = cv[i * classes + j].to_f64();
                            for (dst, p) in go[(j * n + i) * d..(j * n + i + 1) * d].iter_mut().zip(gj) {
                                *dst += cij * p;
                            }
                        }
                    }
                });
            }
            &Op::Agreement { u_hat, v } => {
                let (classes, n, d) = (shape(u_hat)[0], shape(u_hat)[1], shape(u_hat)[2]);
                let (uv, vv) = (val(u_hat), val(v));
                acc(u_hat, &mut |gu| {
                    for j in 0..classes {
                        let vj = &vv[j * d..(j + 1) * d];
                        for i in 0..n {
                            let gij = g[i * classes + j];
                            for (dst, x) in gu[(j * n + i) * d..(j * n + i + 1) * d].iter_mut().zip(vj) {
                                *dst += gij * x.to_f64();
                            }
                        }
                    }
                });
                acc(v, &mut |gv| {
                    for j in 0..classes {
                        for i in 0..n {
                            let gij = g[i * classes + j];
                            for (dst, x) in gv[j * d..(j + 1) * d].iter_mut().zip(&uv[(j * n + i) * d..(j * n + i + 1) * d]) {
                                *dst += gij * x.to_f64();
                            }
                        }
                    }
                });
            }
            &Op::MarginLoss { p, label, params } => {
                let pv = val(p);
                acc(p, &mut |gp| {
                    for (k, &pk) in pv.iter().enumerate() {
                        let pk = pk.to_f64();
                        let d = if k == label {
                            -2.0 * (params.m_pos - pk).max(0.0)
                        } else {
                            2.0 * params.lambda * (pk - params.m_neg).max(0.0)
                        };
                        gp[k] += g[0] * d;
                    }
                });
            }
            &Op::CrossEntropy { p, label } => {
                let pv = val(p);
                acc(p, &mut |gp| {
                    let m = pv.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = pv.iter().map(|v| libm::exp(v.to_f64() - m)).collect();
                    let total: f64 = exps.iter().sum();
                    for k in 0..pv.len() {
                        let target = if k == label { 1.0 } else { 0.0 };
                        gp[k] += g[0] * (exps[k] / total - target);
                    }
                });
            }
        }
    }
}
