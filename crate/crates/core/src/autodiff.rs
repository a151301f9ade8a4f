//! Tape-based reverse-mode differentiation over dense `f64` matrices, with
//! the handful of sparse and row-wise primitives the dual-channel model
//! needs.
//!
//! Values live on a [`Tape`] and are addressed by [`Var`] handles. Every
//! primitive checks shapes up front and rejects non-finite outputs.
//! Sparse operands are a fixed [`CsrPattern`] plus an `nnz × 1` value
//! column, so gradients can flow into the stored values.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::sparse::CsrPattern;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM {
        values: Var,
        pattern: Arc<CsrPattern>,
        dense: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    MulRow(Var, Var),
    SelectRow(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    RowCosine(Var, Var),
    MultiHeadCosine {
        z: Var,
        heads: Var,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    },
    SoftmaxRows(Var),
    MaskedCrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
    FrobeniusSq(Var),
    Smoothness {
        weights: Var,
        sq_dist: Vec<f64>,
    },
    RowNormalizeAbs {
        values: Var,
        pattern: Arc<CsrPattern>,
    },
    StraightThroughOnes(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn check_finite(op: &str, a: &Array2<f64>) -> Result<()> {
    if let Some(pos) = a.iter().position(|x| !x.is_finite()) {
        let (_, c) = a.dim();
        return Err(Error::NumericFault {
            op: op.to_string(),
            detail: format!(
                "non-finite value {} at ({}, {})",
                a.iter().nth(pos).copied().unwrap_or(f64::NAN),
                pos / c.max(1),
                pos % c.max(1)
            ),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sparse_values(op: &'static str, values: &Array2<f64>, pattern: &CsrPattern) -> Result<()> {
    if values.dim() != (pattern.nnz(), 1) {
        return Err(Error::shape(
            op,
            format!("values {:?} for a pattern with {} entries", values.dim(), pattern.nnz()),
        ));
    }
    Ok(())
}

fn row_cosine_parts(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let c = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    (c, na, nb)
}

/// `(cos, dot, |a|², |b|²)` for `a = w1 ⊙ zu`, `b = w2 ⊙ zv`.
fn head_cosine(zu: &[f64], zv: &[f64], w1: &[f64], w2: &[f64]) -> (f64, f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for j in 0..zu.len() {
        let a = w1[j] * zu[j];
        let b = w2[j] * zv[j];
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    let c = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na.sqrt() * nb.sqrt()) };
    (c, dot, na, nb)
}

/// `a` with column `j` multiplied by `w[j]`.
pub(crate) fn scale_columns(a: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let mut out = a.as_standard_layout().into_owned();
    if !w.is_empty() {
        for row in out.as_slice_mut().expect("standard layout").chunks_exact_mut(w.len()) {
            for (x, s) in row.iter_mut().zip(w) {
                *x *= s;
            }
        }
    }
    out
}

/// Cosine similarity of two vectors; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    row_cosine_parts(ArrayView1::from(a), ArrayView1::from(b)).0
}

fn softmax_row(x: ArrayView1<f64>, out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single entry of a `1 × 1` value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, name: &str, value: Array2<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// `S · D` where `S` has the given pattern and values `nnz × 1`.
    pub fn spmm(&mut self, values: Var, pattern: &Arc<CsrPattern>, dense: Var) -> Result<Var> {
        let (vals, d) = (self.value(values), self.value(dense));
        sparse_values("spmm", vals, pattern)?;
        if pattern.n_cols() != d.nrows() {
            return Err(Error::shape(
                "spmm",
                format!("sparse {}×{} · dense {:?}", pattern.n_rows(), pattern.n_cols(), d.dim()),
            ));
        }
        let mut out = Array2::zeros((pattern.n_rows(), d.ncols()));
        for r in 0..pattern.n_rows() {
            let mut row = out.row_mut(r);
            for e in pattern.row_range(r) {
                let w = vals[[e, 0]];
                let c = pattern.col_indices()[e];
                row.scaled_add(w, &d.row(c));
            }
        }
        let op = Op::SpMM {
            values,
            pattern: Arc::clone(pattern),
            dense,
        };
        self.push("spmm", out, &[values, dense], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a) * c;
        self.push("scale", out, &[a], Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        self.push("hadamard", out, &[a, b], Op::Hadamard(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push("relu", out, &[a], Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.value(first).nrows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).nrows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {} rows", self.value(*bad).nrows(), rows),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        self.push("concat_cols", out, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Multiplies every row of `a` elementwise by the `1 × d` row `w`.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        if vw.nrows() != 1 || vw.ncols() != va.ncols() {
            return Err(Error::shape("mul_row", format!("{:?} ⊙ row {:?}", va.dim(), vw.dim())));
        }
        let out = scale_columns(va, &vw.row(0).to_vec());
        self.push("mul_row", out, &[a, w], Op::MulRow(a, w))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let va = self.value(a);
        if row >= va.nrows() {
            return Err(Error::shape("select_row", format!("row {row} of {:?}", va.dim())));
        }
        let out = va.slice(s![row..row + 1, ..]).to_owned();
        self.push("select_row", out, &[a], Op::SelectRow(a, row))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {:?}", va.dim())));
        }
        let out = va.select(Axis(0), &rows);
        self.push("gather_rows", out, &[a], Op::GatherRows(a, rows))
    }

    /// Per-row cosine similarity, `n × 1`. Rows where either side is the
    /// zero vector give 0 and pass no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("row_cosine", va, vb)?;
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, (ra, rb)) in va.rows().into_iter().zip(vb.rows()).enumerate() {
            out[[i, 0]] = row_cosine_parts(ra, rb).0;
        }
        self.push("row_cosine", out, &[a, b], Op::RowCosine(a, b))
    }

    /// For every pair `(src[e], dst[e])`, the mean over heads of
    /// `cos(w¹_h ⊙ z_src, w²_h ⊙ z_dst)`, where `heads` stacks the `H`
    /// vectors `w¹` above the `H` vectors `w²`. Output is `nnz × 1`.
    /// Equivalent to gathering rows, scaling them with `mul_row` and
    /// averaging `row_cosine`, without the intermediate matrices.
    pub fn multi_head_cosine(
        &mut self,
        z: Var,
        heads: Var,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (vz, vh) = (self.value(z), self.value(heads));
        if vh.nrows() == 0 || vh.nrows() % 2 != 0 || vh.ncols() != vz.ncols() {
            return Err(Error::shape(
                "multi_head_cosine",
                format!("heads {:?} for embeddings {:?}", vh.dim(), vz.dim()),
            ));
        }
        if src.len() != dst.len() {
            return Err(Error::shape("multi_head_cosine", "src and dst differ in length"));
        }
        let n = vz.nrows();
        if src.iter().chain(dst.iter()).any(|&i| i >= n) {
            return Err(Error::shape("multi_head_cosine", format!("node index out of range {n}")));
        }
        let zs = vz.as_standard_layout();
        let hs = vh.as_standard_layout();
        let (zs, hs) = (zs.as_slice().expect("standard layout"), hs.as_slice().expect("standard layout"));
        let d = vz.ncols();
        let nh = vh.nrows() / 2;
        let mut out = Array2::zeros((src.len(), 1));
        for e in 0..src.len() {
            let zu = &zs[src[e] * d..(src[e] + 1) * d];
            let zv = &zs[dst[e] * d..(dst[e] + 1) * d];
            let mut total = 0.0;
            for h in 0..nh {
                let w1 = &hs[h * d..(h + 1) * d];
                let w2 = &hs[(nh + h) * d..(nh + h + 1) * d];
                total += head_cosine(zu, zv, w1, w2).0;
            }
            out[[e, 0]] = total / nh as f64;
        }
        let op = Op::MultiHeadCosine { z, heads, src, dst };
        self.push("multi_head_cosine", out, &[z, heads], op)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = Array2::zeros(va.dim());
        for (i, row) in va.rows().into_iter().enumerate() {
            let mut buf = vec![0.0; row.len()];
            softmax_row(row, &mut buf);
            out.row_mut(i).assign(&ArrayView1::from(&buf));
        }
        self.push("softmax_rows", out, &[a], Op::SoftmaxRows(a))
    }

    /// Mean cross-entropy of softmax(`logits`) over rows where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = vl.dim();
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("{n} rows, {} labels, {} mask entries", labels.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::input("masked_cross_entropy: mask selects no rows"));
        }
        let mut total = 0.0;
        for i in (0..n).filter(|&i| mask[i]) {
            let y = labels[i];
            if y >= c {
                return Err(Error::shape("masked_cross_entropy", format!("label {y} with {c} classes")));
            }
            let row = vl.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Array2::from_elem((1, 1), total / count as f64);
        let op = Op::MaskedCrossEntropy {
            logits,
            labels,
            mask,
            count,
        };
        self.push("masked_cross_entropy", out, &[logits], op)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).iter().map(|x| x * x).sum());
        self.push("frobenius_sq", out, &[a], Op::FrobeniusSq(a))
    }

    /// `Σ_e w_e ‖x_row(e) − x_col(e)‖²` over the stored entries of `pattern`.
    /// `x` is treated as data and receives no gradient.
    pub fn weighted_feature_smoothness(
        &mut self,
        weights: Var,
        pattern: &CsrPattern,
        x: &Array2<f64>,
    ) -> Result<Var> {
        sparse_values("weighted_feature_smoothness", self.value(weights), pattern)?;
        if x.nrows() != pattern.n_rows() || x.nrows() != pattern.n_cols() {
            return Err(Error::shape(
                "weighted_feature_smoothness",
                format!("features {:?} for a {}×{} pattern", x.dim(), pattern.n_rows(), pattern.n_cols()),
            ));
        }
        let mut sq_dist = Vec::with_capacity(pattern.nnz());
        for r in 0..pattern.n_rows() {
            for &c in pattern.row(r) {
                let d = &x.row(r) - &x.row(c);
                sq_dist.push(d.dot(&d));
            }
        }
        let w = self.value(weights);
        let total: f64 = sq_dist.iter().zip(w.iter()).map(|(d, w)| d * w).sum();
        let out = Array2::from_elem((1, 1), total);
        self.push(
            "weighted_feature_smoothness",
            out,
            &[weights],
            Op::Smoothness { weights, sq_dist },
        )
    }

    /// Divides each stored value by the sum of absolute values in its row,
    /// keeping signs. Rows whose absolute sum is 0 stay 0.
    pub fn row_normalize_abs(&mut self, values: Var, pattern: &Arc<CsrPattern>) -> Result<Var> {
        let v = self.value(values);
        sparse_values("row_normalize_abs", v, pattern)?;
        let mut out = Array2::zeros(v.dim());
        for r in 0..pattern.n_rows() {
            let range = pattern.row_range(r);
            let s: f64 = range.clone().map(|e| v[[e, 0]].abs()).sum();
            if s > 0.0 {
                for e in range {
                    out[[e, 0]] = v[[e, 0]] / s;
                }
            }
        }
        let op = Op::RowNormalizeAbs {
            values,
            pattern: Arc::clone(pattern),
        };
        self.push("row_normalize_abs", out, &[values], op)
    }

    /// Forward: all ones. Backward: identity (straight-through estimator).
    pub fn straight_through_ones(&mut self, a: Var) -> Result<Var> {
        let out = Array2::ones(self.value(a).dim());
        self.push("straight_through_ones", out, &[a], Op::StraightThroughOnes(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push("sum", out, &[a], Op::Sum(a))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("{loss:?} is not on this tape")))?;
        if node.value.dim() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.dim()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward called on a value that does not depend on any parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let want = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if want(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::SpMM {
                values,
                pattern,
                dense,
            } => {
                let vals = val(*values);
                let d = val(*dense);
                if want(*dense) {
                    let mut gd = Array2::zeros(d.dim());
                    for r in 0..pattern.n_rows() {
                        for e in pattern.row_range(r) {
                            let c = pattern.col_indices()[e];
                            gd.row_mut(c).scaled_add(vals[[e, 0]], &g.row(r));
                        }
                    }
                    acc(*dense, gd);
                }
                if want(*values) {
                    let mut gv = Array2::zeros(vals.dim());
                    for r in 0..pattern.n_rows() {
                        for e in pattern.row_range(r) {
                            let c = pattern.col_indices()[e];
                            gv[[e, 0]] = g.row(r).dot(&d.row(c));
                        }
                    }
                    acc(*values, gv);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Hadamard(a, b) => {
                if want(*a) {
                    acc(*a, g * val(*b));
                }
                if want(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if want(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::MulRow(a, w) => {
                let wv = val(*w).row(0).to_vec();
                if want(*a) {
                    acc(*a, scale_columns(g, &wv));
                }
                if want(*w) {
                    let av = val(*a).as_standard_layout();
                    let gs = g.as_standard_layout();
                    let mut dw = vec![0.0; wv.len()];
                    if !dw.is_empty() {
                        let rows = av.as_slice().expect("standard layout").chunks_exact(wv.len());
                        let grows = gs.as_slice().expect("standard layout").chunks_exact(wv.len());
                        for (ra, rg) in rows.zip(grows) {
                            for ((d, x), y) in dw.iter_mut().zip(ra).zip(rg) {
                                *d += x * y;
                            }
                        }
                    }
                    acc(*w, Array2::from_shape_vec((1, wv.len()), dw).expect("row shape"));
                }
            }
            Op::SelectRow(a, row) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.row_mut(*row).assign(&g.row(0));
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*a, d);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (val(*a).as_standard_layout(), val(*b).as_standard_layout());
                let (n, d) = va.dim();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                if d > 0 {
                    let sa = va.as_slice().expect("standard layout");
                    let sb = vb.as_slice().expect("standard layout");
                    for i in 0..n {
                        let (ra, rb) = (&sa[i * d..(i + 1) * d], &sb[i * d..(i + 1) * d]);
                        let (c, na, nb) = row_cosine_parts(ArrayView1::from(ra), ArrayView1::from(rb));
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let gi = g[[i, 0]];
                        let inv = gi / (na * nb);
                        let ca = gi * c / (na * na);
                        let cb = gi * c / (nb * nb);
                        let (oa, ob) = (&mut da[i * d..(i + 1) * d], &mut db[i * d..(i + 1) * d]);
                        for j in 0..d {
                            oa[j] = rb[j] * inv - ca * ra[j];
                            ob[j] = ra[j] * inv - cb * rb[j];
                        }
                    }
                }
                let da = Array2::from_shape_vec((n, d), da).expect("shape");
                let db = Array2::from_shape_vec((n, d), db).expect("shape");
                if want(*a) {
                    acc(*a, da);
                }
                if want(*b) {
                    acc(*b, db);
                }
            }
            Op::MultiHeadCosine { z, heads, src, dst } => {
                let (vz, vh) = (val(*z).as_standard_layout(), val(*heads).as_standard_layout());
                let d = vz.ncols();
                let nh = vh.nrows() / 2;
                let zs = vz.as_slice().expect("standard layout");
                let hs = vh.as_slice().expect("standard layout");
                let mut dz = vec![0.0; zs.len()];
                let mut dh = vec![0.0; hs.len()];
                for e in 0..src.len() {
                    let ge = g[[e, 0]] / nh as f64;
                    if ge == 0.0 {
                        continue;
                    }
                    let (u, v) = (src[e], dst[e]);
                    for h in 0..nh {
                        let (o1, o2) = (h * d, (nh + h) * d);
                        let (w1, w2) = (&hs[o1..o1 + d], &hs[o2..o2 + d]);
                        let (zu, zv) = (&zs[u * d..(u + 1) * d], &zs[v * d..(v + 1) * d]);
                        let (c, _, na2, nb2) = head_cosine(zu, zv, w1, w2);
                        if na2 == 0.0 || nb2 == 0.0 {
                            continue;
                        }
                        let inv = ge / (na2.sqrt() * nb2.sqrt());
                        let ca = ge * c / na2;
                        let cb = ge * c / nb2;
                        for j in 0..d {
                            let a = w1[j] * zu[j];
                            let b = w2[j] * zv[j];
                            // ∂cos/∂a_j and ∂cos/∂b_j, scaled by the upstream gradient.
                            let ga = b * inv - ca * a;
                            let gb = a * inv - cb * b;
                            dz[u * d + j] += ga * w1[j];
                            dz[v * d + j] += gb * w2[j];
                            dh[o1 + j] += ga * zu[j];
                            dh[o2 + j] += gb * zv[j];
                        }
                    }
                }
                if want(*z) {
                    acc(*z, Array2::from_shape_vec(vz.dim(), dz).expect("shape"));
                }
                if want(*heads) {
                    acc(*heads, Array2::from_shape_vec(vh.dim(), dh).expect("shape"));
                }
            }
            Op::SoftmaxRows(a) => {
                let sm = &node.value;
                let mut d = Array2::zeros(sm.dim());
                for i in 0..sm.nrows() {
                    let dot = g.row(i).dot(&sm.row(i));
                    for j in 0..sm.ncols() {
                        d[[i, j]] = sm[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::MaskedCrossEntropy {
                logits,
                labels,
                mask,
                count,
            } => {
                let vl = val(*logits);
                let scale = g[[0, 0]] / *count as f64;
                let mut d = Array2::zeros(vl.dim());
                let mut buf = vec![0.0; vl.ncols()];
                for i in (0..vl.nrows()).filter(|&i| mask[i]) {
                    softmax_row(vl.row(i), &mut buf);
                    buf[labels[i]] -= 1.0;
                    for (j, &p) in buf.iter().enumerate() {
                        d[[i, j]] = scale * p;
                    }
                }
                acc(*logits, d);
            }
            Op::FrobeniusSq(a) => acc(*a, val(*a) * (2.0 * g[[0, 0]])),
            Op::Smoothness { weights, sq_dist } => {
                let g0 = g[[0, 0]];
                let d = Array2::from_shape_fn((sq_dist.len(), 1), |(e, _)| g0 * sq_dist[e]);
                acc(*weights, d);
            }
            Op::RowNormalizeAbs { values, pattern } => {
                let v = val(*values);
                let mut d = Array2::zeros(v.dim());
                for r in 0..pattern.n_rows() {
                    let range = pattern.row_range(r);
                    let s: f64 = range.clone().map(|e| v[[e, 0]].abs()).sum();
                    if s == 0.0 {
                        continue;
                    }
                    let gw: f64 = range.clone().map(|e| g[[e, 0]] * v[[e, 0]]).sum();
                    for e in range {
                        let sign = v[[e, 0]].signum() * f64::from(u8::from(v[[e, 0]] != 0.0));
                        d[[e, 0]] = g[[e, 0]] / s - sign * gw / (s * s);
                    }
                }
                acc(*values, d);
            }
            Op::StraightThroughOnes(a) => acc(*a, g.clone()),
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
        }
    }
}

/// Outcome of comparing analytic gradients with central differences for
/// one parameter block.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradCheckReport {
    pub fd_step: f64,
    pub tol: f64,
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.name.as_str())
            .collect()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `∂loss/∂param` from [`Tape::backward`] with central finite
/// differences for every named block. `build_loss` records the loss on a
/// fresh tape given one `Var` per block, in order.
pub fn grad_check<F>(
    build_loss: F,
    params: &[(String, Array2<f64>)],
    fd_step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Usage("grad_check needs a positive step".into()));
    }
    let eval = |values: &[Array2<f64>]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build_loss(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let mut values: Vec<Array2<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let (tape, vars, loss) = eval(&values)?;
    let (tape2, _, loss2) = eval(&values)?;
    if tape.scalar(loss).to_bits() != tape2.scalar(loss2).to_bits() {
        return Err(Error::Usage(
            "loss closure is not deterministic: two forward passes disagree".into(),
        ));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, x)| grads.take_or_zeros(v, x.dim()))
        .collect();

    let mut blocks = Vec::with_capacity(params.len());
    for (b, (name, _)) in params.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        for idx in 0..values[b].len() {
            let (r, c) = (idx / values[b].ncols(), idx % values[b].ncols());
            let orig = values[b][[r, c]];
            values[b][[r, c]] = orig + fd_step;
            let (t, _, l) = eval(&values)?;
            let plus = t.scalar(l);
            values[b][[r, c]] = orig - fd_step;
            let (t, _, l) = eval(&values)?;
            let minus = t.scalar(l);
            values[b][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            max_rel = max_rel.max(relative_error(analytic[b][[r, c]], numeric));
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            max_rel_error: max_rel,
            passed: max_rel < tol,
        });
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport {
        fd_step,
        tol,
        blocks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng as _;

    use crate::rng::seeded;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Values bounded away from the relu kink.
    fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        random(rows, cols, seed).mapv(|x| if x.abs() < 1e-3 { 0.5 } else { x })
    }

    fn check<F>(f: F, params: Vec<(&str, Array2<f64>)>)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let params: Vec<_> = params.into_iter().map(|(n, v)| (n.to_string(), v)).collect();
        let report = grad_check(f, &params, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn pattern() -> Arc<CsrPattern> {
        Arc::new(CsrPattern::from_rows(4, &[vec![1, 2], vec![0], vec![], vec![0, 1, 2]]).unwrap())
    }

    #[test]
    fn relu_example() {
        let mut t = Tape::new();
        let a = t.constant(array![[-1.0, 2.0]]).unwrap();
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r), &array![[0.0, 2.0]]);
    }

    #[test]
    fn self_cosine_is_one() {
        let mut t = Tape::new();
        let a = t.constant(array![[3.0, -4.0], [0.1, 0.2]]).unwrap();
        let c = t.row_cosine(a, a).unwrap();
        for x in t.value(c) {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let mut t = Tape::new();
        let l = t.constant(Array2::zeros((4, 5))).unwrap();
        let ce = t
            .masked_cross_entropy(l, Arc::new(vec![0, 1, 2, 4]), Arc::new(vec![true; 4]))
            .unwrap();
        assert!((t.scalar(ce) - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scale_then_sum_gradient_is_three() {
        let mut t = Tape::new();
        let w = t.param(random(2, 3, 1)).unwrap();
        let s = t.scale(w, 3.0).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &Array2::from_elem((2, 3), 3.0));
    }

    #[test]
    fn frobenius_gradient_is_twice_values() {
        let mut t = Tape::new();
        let wv = random(5, 1, 2);
        let w = t.param(wv.clone()).unwrap();
        let l = t.frobenius_sq(w).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &(&wv * 2.0));
    }

    #[test]
    fn relu_matmul_matches_finite_differences() {
        let x = away_from_zero(6, 5, 3);
        check(
            move |t, p| {
                let x = t.constant(x.clone())?;
                let h = t.matmul(x, p[0])?;
                let r = t.relu(h)?;
                let sq = t.hadamard(r, r)?;
                t.sum(sq)
            },
            vec![("w", random(5, 4, 4))],
        );
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let pat = pattern();
        let x = random(4, 3, 9);
        check(
            move |t, p| {
                let (a, b, vals, head) = (p[0], p[1], p[2], p[3]);
                let norm = t.row_normalize_abs(vals, &pat)?;
                let prop = t.spmm(norm, &pat, a)?;
                let mixed = t.add(prop, b)?;
                let scaled = t.mul_row(mixed, head)?;
                let idx = Arc::new(vec![0, 3, 3, 1]);
                let gathered = t.gather_rows(scaled, idx)?;
                let cos = t.row_cosine(gathered, b)?;
                let cat = t.concat_cols(&[cos, a, scaled])?;
                let sm = t.softmax_rows(cat)?;
                let sm2 = t.scale(sm, 4.0)?;
                let ce = t.masked_cross_entropy(
                    sm2,
                    Arc::new(vec![0, 2, 1, 4]),
                    Arc::new(vec![true, false, true, true]),
                )?;
                let fro = t.frobenius_sq(vals)?;
                let smooth = t.weighted_feature_smoothness(vals, &pat, &x)?;
                let r = t.select_row(a, 2)?;
                let rs = t.sum(r)?;
                let l = t.add(ce, fro)?;
                let l = t.add(l, smooth)?;
                t.add(l, rs)
            },
            vec![
                ("a", random(4, 3, 5)),
                ("b", random(4, 3, 6)),
                ("vals", away_from_zero(6, 1, 7)),
                ("head", random(1, 3, 8)),
            ],
        );
    }

    #[test]
    fn fused_head_cosine_matches_composite() {
        let zv = random(5, 3, 21);
        let hv = random(4, 3, 22);
        let src = Arc::new(vec![0, 1, 4, 2, 2]);
        let dst = Arc::new(vec![3, 0, 4, 1, 0]);
        let mut t = Tape::new();
        let z = t.param(zv.clone()).unwrap();
        let h = t.param(hv.clone()).unwrap();
        let fused = t.multi_head_cosine(z, h, Arc::clone(&src), Arc::clone(&dst)).unwrap();
        let zu = t.gather_rows(z, Arc::clone(&src)).unwrap();
        let zw = t.gather_rows(z, Arc::clone(&dst)).unwrap();
        let mut acc = None;
        for k in 0..2 {
            let w1 = t.select_row(h, k).unwrap();
            let w2 = t.select_row(h, 2 + k).unwrap();
            let a = t.mul_row(zu, w1).unwrap();
            let b = t.mul_row(zw, w2).unwrap();
            let c = t.row_cosine(a, b).unwrap();
            acc = Some(match acc {
                None => c,
                Some(p) => t.add(p, c).unwrap(),
            });
        }
        let composite = t.scale(acc.unwrap(), 0.5).unwrap();
        for (x, y) in t.value(fused).iter().zip(t.value(composite)) {
            assert!((x - y).abs() < 1e-14);
        }

        check(
            move |t, p| {
                let c = t.multi_head_cosine(p[0], p[1], Arc::clone(&src), Arc::clone(&dst))?;
                let sq = t.hadamard(c, c)?;
                let l = t.sum(sq)?;
                let s = t.sum(c)?;
                t.add(l, s)
            },
            vec![("z", zv), ("heads", hv)],
        );
    }

    #[test]
    fn straight_through_passes_gradient() {
        let pat = pattern();
        let mut t = Tape::new();
        let v = t.param(random(6, 1, 1)).unwrap();
        let ones = t.straight_through_ones(v).unwrap();
        assert!(t.value(ones).iter().all(|&x| x == 1.0));
        let d = t.constant(random(4, 2, 2)).unwrap();
        let y = t.spmm(ones, &pat, d).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let dv = t.value(d);
        for r in 0..4 {
            for e in pat.row_range(r) {
                let c = pat.col_indices()[e];
                assert!((g.get(v).unwrap()[[e, 0]] - dv.row(c).sum()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let wv = random(3, 3, 11);
        let grad_of = |both: bool, first: bool| {
            let mut t = Tape::new();
            let w = t.param(wv.clone()).unwrap();
            let f = t.hadamard(w, w).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.scale(w, 2.5).unwrap();
            let g = t.sum(g).unwrap();
            let l = match (both, first) {
                (true, _) => t.add(f, g).unwrap(),
                (false, true) => f,
                (false, false) => g,
            };
            t.backward(l).unwrap().get(w).unwrap().clone()
        };
        assert_eq!(grad_of(true, true), grad_of(false, true) + grad_of(false, false));
    }

    #[test]
    fn identity_spmm_is_exact() {
        let pat = Arc::new(CsrPattern::from_rows(3, &[vec![0], vec![1], vec![2]]).unwrap());
        let mut t = Tape::new();
        let ones = t.constant(Array2::ones((3, 1))).unwrap();
        let dv = random(3, 4, 12);
        let d = t.constant(dv.clone()).unwrap();
        let y = t.spmm(ones, &pat, d).unwrap();
        assert_eq!(t.value(y), &dv);
    }

    #[test]
    fn errors_are_structured() {
        let mut t = Tape::new();
        let a = t.param(Array2::zeros((2, 3))).unwrap();
        let b = t.param(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        assert!(matches!(t.backward(a), Err(Error::Usage(_))));
        let c = t.constant(Array2::zeros((1, 1))).unwrap();
        assert!(matches!(t.backward(c), Err(Error::Usage(_))));
        let big = t.constant(Array2::from_elem((1, 1), f64::MAX)).unwrap();
        assert!(matches!(t.scale(big, 10.0), Err(Error::NumericFault { .. })));
        assert!(t.constant(Array2::from_elem((1, 1), f64::NAN)).is_err());
    }

    #[test]
    fn zero_vector_cosine_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(array![[0.0, 0.0]]).unwrap();
        let b = t.param(array![[1.0, 2.0]]).unwrap();
        let c = t.row_cosine(a, b).unwrap();
        let l = t.sum(c).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_check_reports() {
        let lin = |t: &mut Tape, p: &[Var]| {
            let s = t.scale(p[0], -1.5)?;
            t.sum(s)
        };
        let params = vec![("w".to_string(), random(3, 2, 1))];
        let ok = grad_check(lin, &params, 1e-5, 1e-8).unwrap();
        assert!(ok.passed);
        let strict = grad_check(lin, &params, 1e-5, 0.0).unwrap();
        assert!(!strict.passed);
        assert_eq!(strict.failing(), vec!["w"]);

        let counter = std::cell::Cell::new(0.0);
        let flaky = |t: &mut Tape, p: &[Var]| {
            counter.set(counter.get() + 1.0);
            let s = t.scale(p[0], counter.get())?;
            t.sum(s)
        };
        assert!(matches!(grad_check(flaky, &params, 1e-5, 1e-4), Err(Error::Usage(_))));
    }
}
