//! Tape-based reverse-mode differentiation over a closed op set.
//!
//! Values are recorded in creation order on a [`Tape`]; [`Tape::backward`]
//! replays the records in strict reverse order. Parameters are borrowed, so a
//! tape built against a [`ParamSet`] never copies weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_view, Real, Tensor, View};

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;
/// Smallest row norm accepted by [`Tape::l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Shift(Var, Var),
    Exp(Var),
    Silu {
        x: Var,
        sig: Vec<T>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        /// `heads x [tq x t]` post-softmax weights.
        probs: Vec<T>,
    },
    Rotary {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    BceSum {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records op applications for one forward pass.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input owned by the tape.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf", true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, "constant", false)
    }

    /// Binds a named parameter, once per tape.
    pub fn param(&mut self, set: &'a ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let tensor = set.get(name)?;
        if !tensor.all_finite() {
            return Err(Error::NonFinite("param"));
        }
        self.nodes.push(Node { value: Cow::Borrowed(tensor), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = mat_dims(self.value(a));
        let (br, bc) = mat_dims(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n, ta, tb, false);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, "matmul", rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), "add", rg)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim("add_row", format!("row {} vs bias {}", c, bv.len())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let rg = self.requires(x) || self.requires(b);
        self.push(out, Op::AddRow(x, b), "add_row", rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), "mul", rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, c), "scale", rg)
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", "scale must have one element"));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires(x) || self.requires(s);
        self.push(out, Op::ScaleBy(x, s), "scale_by", rg)
    }

    /// Adds a one-element tensor to every element.
    pub fn shift(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("shift", "shift must have one element"));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v + c);
        let rg = self.requires(x) || self.requires(s);
        self.push(out, Op::Shift(x, s), "shift", rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::exp);
        let rg = self.requires(x);
        self.push(out, Op::Exp(x), "exp", rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut sig: Vec<T> = xv.data().iter().map(|&v| -v).collect();
        T::exp_in_place(&mut sig);
        sig.iter_mut().for_each(|s| *s = (T::one() + *s).recip());
        let data = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push(out, Op::Silu { x, sig }, "silu", rg)
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (r, c) = mat_dims(xv);
        if gv.len() != c || c == 0 {
            return Err(Error::dim("rms_norm", format!("row {} vs gain {}", c, gv.len())));
        }
        let eps = T::lit(RMS_EPS);
        let n = T::lit(c as f64);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(r);
        for row in out.data_mut().chunks_exact_mut(c) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let s = (ms + eps).sqrt().recip();
            inv.push(s);
            for (o, &g) in row.iter_mut().zip(gv.data()) {
                *o = *o * s * g;
            }
        }
        let rg = self.requires(x) || self.requires(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms: inv }, "rms_norm", rg)
    }

    /// Row-wise unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in out.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm < T::lit(MIN_NORM) {
                return Err(Error::Normalization { row: i });
            }
            row.iter_mut().for_each(|v| *v = *v / nrm);
            norms.push(nrm);
        }
        let rg = self.requires(x);
        self.push(out, Op::L2Normalize { x, norms }, "l2_normalize", rg)
    }

    /// Softmax over allowed entries of each row; disallowed entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        self.masked_softmax_rows(x, allow, None)
    }

    /// As [`Tape::masked_softmax`], but rows with `active[r] == false` produce
    /// all zeros instead of failing (padding queries).
    pub fn masked_softmax_rows(&mut self, x: Var, allow: &[bool], active: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = mat_dims(xv);
        if allow.len() != r * c || active.is_some_and(|a| a.len() != r) {
            return Err(Error::dim("masked_softmax", "mask shape differs from logits"));
        }
        let mut out = xv.clone();
        softmax_rows_in_place(out.data_mut(), c, allow, active)?;
        let rg = self.requires(x);
        self.push(out, Op::MaskedSoftmax(x), "masked_softmax", rg)
    }

    /// Rotates consecutive column pairs of each row: pair `j` of row `r` by the
    /// angle whose cosine/sine are `cos[r * cols/2 + j]`, `sin[...]`.
    pub fn rotary(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = mat_dims(xv);
        if c % 2 != 0 || cos.len() != r * c / 2 || sin.len() != cos.len() {
            return Err(Error::dim("rotary", format!("[{r}x{c}] with {} angles", cos.len())));
        }
        let mut out = xv.clone();
        for (p, pair) in out.data_mut().chunks_exact_mut(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos[p] - b * sin[p];
            pair[1] = a * sin[p] + b * cos[p];
        }
        let rg = self.requires(x);
        self.push(out, Op::Rotary { x, cos, sin }, "rotary", rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    /// Scaled dot-product attention with `heads` heads over consecutive
    /// column blocks: queries `[tq x d]`, keys and values `[t x d]`, output
    /// `[tq x d]`. `allow` and `active` act as in [`Tape::masked_softmax_rows`]
    /// and are shared by all heads.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        allow: &[bool],
        active: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = mat_dims(qv);
        let t = kv.rows();
        if heads == 0 || d % heads != 0 || kv.shape() != vv.shape() || kv.cols() != d || qv.ndim() != 2 {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?} with {heads} heads", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if allow.len() != tq * t || active.is_some_and(|a| a.len() != tq) {
            return Err(Error::dim("attention", "mask shape differs from scores"));
        }
        let hd = d / heads;
        let mut probs = vec![T::zero(); heads * tq * t];
        let mut out = Tensor::zeros(&[tq, d]);
        for h in 0..heads {
            let p = &mut probs[h * tq * t..(h + 1) * tq * t];
            let blk_q = View::col_block(tq, d, h * hd, hd);
            let blk_k = View::col_block(t, d, h * hd, hd);
            gemm_view(scale, qv.data(), blk_q, kv.data(), blk_k.t(), T::zero(), p, View::dense(tq, t));
            softmax_rows_in_place(p, t, allow, active)?;
            gemm_view(T::one(), p, View::dense(tq, t), vv.data(), blk_k, T::zero(), out.data_mut(), blk_q);
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(out, Op::Attention { q, k, v, heads, scale, probs }, "attention", rg)
    }

    /// Post-softmax weights `[tq x t]` of one head of an attention output.
    pub fn attention_probs(&self, out: Var, head: usize) -> Option<Tensor<T>> {
        match &self.nodes[out.0].op {
            Op::Attention { k, heads, probs, .. } if head < *heads => {
                let tq = self.value(out).rows();
                let t = self.value(*k).rows();
                let block = probs[head * tq * t..(head + 1) * tq * t].to_vec();
                Tensor::matrix(tq, t, block).ok()
            }
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&v| self.value(v).rows()).ok_or(Error::EmptyInput("concat_cols"))?;
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &v in parts {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&v| self.requires(v));
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols", rg)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&v| self.value(v).cols()).ok_or(Error::EmptyInput("concat_rows"))?;
        if parts.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &v in parts {
            data.extend_from_slice(self.value(v).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&v| self.requires(v));
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows", rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = mat_dims(xv);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        let rg = self.requires(x);
        self.push(out, Op::SliceCols { x, start }, "slice_cols", rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rows();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {r}")));
        }
        let out = xv.gather_rows(rows);
        let rg = self.requires(x);
        self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, "gather_rows", rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let rg = self.requires(x);
        self.push(out, Op::Transpose(x), "transpose", rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum(x), "sum", rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let out = Tensor::scalar(xv.sum() / T::lit(xv.len() as f64));
        let rg = self.requires(x);
        self.push(out, Op::Mean(x), "mean", rg)
    }

    /// `sum_e weights[e] * bce_with_logits(logits[e], targets[e])` as a scalar.
    pub fn bce_sum(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return Err(Error::dim("bce_sum", "targets/weights differ from logits"));
        }
        let mut total = T::zero();
        for ((&l, &t), &w) in lv.data().iter().zip(&targets).zip(&weights) {
            if w != T::zero() {
                total = total + w * bce_with_logits(l, t)?;
            }
        }
        let rg = self.requires(logits);
        self.push(Tensor::scalar(total), Op::BceSum { logits, targets, weights }, "bce_sum", rg)
    }

    /// Gradients of a scalar with respect to every leaf and parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) backward.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim("backward", "seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = seed.reshape(self.value(out).shape().to_vec())?;
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            // Interior gradients are released once propagated.
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<F>(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: F)
    where
        F: FnOnce(&mut [T]),
    {
        if !self.requires(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (g.rows(), g.cols());
                let k = if *ta { av.rows() } else { av.cols() };
                // C = op(A) op(B). dA_stored = G op(B)^T (or its transpose), dB likewise.
                self.accumulate(grads, *a, |da| {
                    if *ta {
                        // A stored [k x m]: dA = op(B) G^T
                        gemm(bv.data(), g.data(), da, k, n, m, *tb, true, true);
                    } else {
                        gemm(g.data(), bv.data(), da, m, n, k, false, !*tb, true);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    if *tb {
                        // B stored [n x k]: dB = G^T op(A)
                        gemm(g.data(), av.data(), db, n, m, k, true, *ta, true);
                    } else {
                        gemm(av.data(), g.data(), db, k, m, n, !*ta, false, true);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| add_into(d, g.data()));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, |d| add_into(d, g.data()));
                let c = g.cols();
                self.accumulate(grads, *b, |d| {
                    for row in g.data().chunks_exact(c.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((o, &gg), &q) in d.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o = *o + gg * q;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((o, &gg), &p) in d.iter_mut().zip(g.data()).zip(av.data()) {
                        *o = *o + gg * p;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| {
                    for (o, &gg) in d.iter_mut().zip(g.data()) {
                        *o = *o + gg * *c;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                self.accumulate(grads, *x, |d| {
                    for (o, &gg) in d.iter_mut().zip(g.data()) {
                        *o = *o + gg * c;
                    }
                });
                let xv = self.value(*x);
                self.accumulate(grads, *s, |d| {
                    d[0] = d[0] + g.data().iter().zip(xv.data()).map(|(&gg, &xx)| gg * xx).sum::<T>();
                });
            }
            Op::Shift(x, s) => {
                self.accumulate(grads, *x, |d| add_into(d, g.data()));
                self.accumulate(grads, *s, |d| d[0] = d[0] + g.sum());
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, |d| {
                    for ((o, &gg), &yy) in d.iter_mut().zip(g.data()).zip(y.data()) {
                        *o = *o + gg * yy;
                    }
                });
            }
            Op::Silu { x, sig } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    for (((o, &gg), &xx), &s) in d.iter_mut().zip(g.data()).zip(xv.data()).zip(sig) {
                        *o = *o + gg * s * (T::one() + xx * (T::one() - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let c = xv.cols();
                let n = T::lit(c as f64);
                self.accumulate(grads, *x, |d| {
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let dot = (0..c).map(|j| gr[j] * gv.data()[j] * xr[j]).sum::<T>();
                        let k = s * s * s * dot / n;
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] = dr[j] + s * gv.data()[j] * gr[j] - k * xr[j];
                        }
                    }
                });
                self.accumulate(grads, *gain, |d| {
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for j in 0..c {
                            d[j] = d[j] + gr[j] * xr[j] * s;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = y.cols();
                self.accumulate(grads, *x, |d| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] = dr[j] + (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let c = y.cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        let dr = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, scale, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = mat_dims(qv);
                let t = kv.rows();
                let hd = d / heads;
                let mut ds = vec![T::zero(); tq * t];
                for h in 0..*heads {
                    let p = &probs[h * tq * t..(h + 1) * tq * t];
                    let blk_q = View::col_block(tq, d, h * hd, hd);
                    let blk_k = View::col_block(t, d, h * hd, hd);
                    let dense = View::dense(tq, t);
                    gemm_view(T::one(), g.data(), blk_q, vv.data(), blk_k.t(), T::zero(), &mut ds, dense);
                    for (pr, dr) in p.chunks_exact(t.max(1)).zip(ds.chunks_exact_mut(t.max(1))) {
                        let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot);
                        }
                    }
                    self.accumulate(grads, *q, |dq| {
                        gemm_view(*scale, &ds, dense, kv.data(), blk_k, T::one(), dq, blk_q);
                    });
                    self.accumulate(grads, *k, |dk| {
                        gemm_view(*scale, &ds, dense.t(), qv.data(), blk_q, T::one(), dk, blk_k);
                    });
                    self.accumulate(grads, *v, |dv| {
                        gemm_view(T::one(), p, dense.t(), g.data(), blk_q, T::one(), dv, blk_k);
                    });
                }
            }
            Op::Rotary { x, cos, sin } => {
                self.accumulate(grads, *x, |d| {
                    for (p, (dp, gp)) in d.chunks_exact_mut(2).zip(g.data().chunks_exact(2)).enumerate() {
                        dp[0] = dp[0] + gp[0] * cos[p] + gp[1] * sin[p];
                        dp[1] = dp[1] - gp[0] * sin[p] + gp[1] * cos[p];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &v in parts {
                    let w = self.value(v).cols();
                    self.accumulate(grads, v, |d| {
                        for (r, dr) in d.chunks_exact_mut(w.max(1)).enumerate() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            add_into(dr, src);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &v in parts {
                    let len = self.value(v).len();
                    self.accumulate(grads, v, |d| add_into(d, &g.data()[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = g.cols();
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..g.rows() {
                        add_into(&mut d[r * c + start..r * c + start + w], g.row(r));
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = g.cols();
                self.accumulate(grads, *x, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], g.row(k));
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                self.accumulate(grads, *x, |d| add_into(d, gt.data()));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o = *o + s));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let s = g.data()[0] / n;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o = *o + s));
            }
            Op::BceSum { logits, targets, weights } => {
                let s = g.data()[0];
                let lv = self.value(*logits);
                self.accumulate(grads, *logits, |d| {
                    for (((o, &l), &t), &w) in d.iter_mut().zip(lv.data()).zip(targets).zip(weights) {
                        if w != T::zero() {
                            *o = *o + s * w * (sigmoid(l) - t);
                        }
                    }
                });
            }
        }
    }
}

/// Row-wise masked softmax over a flat `[rows x cols]` buffer in place.
/// Inactive rows become zeros; an active row with nothing allowed is an error.
fn softmax_rows_in_place<T: Real>(x: &mut [T], cols: usize, allow: &[bool], active: Option<&[bool]>) -> Result<()> {
    if cols == 0 {
        return Ok(());
    }
    for (i, row) in x.chunks_exact_mut(cols).enumerate() {
        let m = &allow[i * cols..(i + 1) * cols];
        if active.is_some_and(|a| !a[i]) {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut max = T::neg_infinity();
        for (&v, &ok) in row.iter().zip(m) {
            if ok && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        for (v, &ok) in row.iter_mut().zip(m) {
            *v = if ok { *v - max } else { T::neg_infinity() };
        }
        T::exp_in_place(row);
        let total: T = row.iter().copied().sum();
        let inv = total.recip();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stable `max(l, 0) - l*t + log(1 + exp(-|l|))` for a binary target.
pub fn bce_with_logits<T: Real>(logit: T, target: T) -> Result<T> {
    if target != T::zero() && target != T::one() {
        return Err(Error::Contract(format!("BCE target must be 0 or 1, got {target}")));
    }
    Ok(logit.max(T::zero()) - logit * target + (-logit.abs()).exp().ln_1p())
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the leaf or parameter `v`; values the output never
    /// depended on get zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for every parameter bound on `tape`, by name.
    pub fn params(&self, tape: &Tape<'_, T>) -> BTreeMap<String, Tensor<T>> {
        tape.bound_params().iter().map(|(k, &v)| (k.clone(), self.get(v))).collect()
    }
}

/// Result of a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of `params`.
///
/// `f` records a scalar on the tape it is handed and returns its handle. The
/// error for a coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_finite_diff<F>(f: F, params: &ParamSet<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ParamSet<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        let grads = tape.backward(out)?;
        // Parameters the function never bound have zero analytic gradient.
        let mut by_name = grads.params(&tape);
        for (name, t) in params.iter() {
            by_name.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        }
        by_name
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation("non-finite loss during probing".into()))
        }
    };
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, coordinates: 0 };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        for idx in 0..n {
            let orig = params.get(&name)?.data()[idx];
            work.get_mut(&name).unwrap().data_mut()[idx] = orig + h;
            let plus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[idx] = orig - h;
            let minus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[&name].data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for (k, v) in entries {
            p.insert(*k, v.clone());
        }
        p
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0])).unwrap();
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn rms_norm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::vector(vec![1.0; 4])).unwrap();
        let x = tape.leaf(Tensor::vector(vec![1.0; 4])).unwrap();
        let y = tape.rms_norm(x, g).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let g2 = tape.constant(Tensor::vector(vec![1.0; 2])).unwrap();
        let x2 = tape.leaf(Tensor::vector(vec![2.0, 0.0])).unwrap();
        let y2 = tape.rms_norm(x2, g2).unwrap();
        assert!((tape.value(y2).data()[0] - 2f64.sqrt()).abs() < 1e-5);
        assert_eq!(tape.value(y2).data()[1], 0.0);
    }

    #[test]
    fn rms_norm_matches_scalar_loop() {
        let xs = lcg(3, 7);
        let gs = lcg(4, 7);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(xs.clone())).unwrap();
        let g = tape.leaf(Tensor::vector(gs.clone())).unwrap();
        let y = tape.rms_norm(x, g).unwrap();
        let mut ms = 0.0;
        for v in &xs {
            ms += v * v;
        }
        let s = 1.0 / (ms / 7.0 + 1e-6).sqrt();
        for j in 0..7 {
            assert!((tape.value(y).data()[j] - xs[j] * s * gs[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let y = tape.masked_softmax(x, &[true; 3]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = tape.masked_softmax(x, &[true; 3]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((tape.value(y).data()[j] - v.exp() / z).abs() < 1e-12);
        }
        assert!(matches!(tape.masked_softmax(x, &[false; 3]), Err(Error::DegenerateRow { row: 0 })));
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::vector(vec![0.6, 0.8])) < 1e-15);
        let y2 = tape.l2_normalize(y).unwrap();
        assert!(tape.value(y2).max_abs_diff(tape.value(y)) < 1e-15);
        let z = tape.leaf(Tensor::vector(vec![0.0, 1e-13])).unwrap();
        assert!(matches!(tape.l2_normalize(z), Err(Error::Normalization { row: 0 })));
    }

    #[test]
    fn bce_examples_and_contract() {
        assert!((bce_with_logits(0.0f64, 0.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_with_logits(2.0f64, 1.0).unwrap() - 0.126928011042973).abs() < 1e-12);
        assert!((bce_with_logits(-2.0f64, 0.0).unwrap() - 0.126928011042973).abs() < 1e-12);
        assert!(bce_with_logits(1e4f64, 0.0).unwrap().is_finite());
        assert!(bce_with_logits(-1e4f64, 1.0).unwrap().is_finite());
        assert!(matches!(bce_with_logits(0.3f64, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(800.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let p = set(&[("x", Tensor::vector(vec![0.3, -1.2, 2.0]))]);
        let report = grad_check_finite_diff(
            |t, p| {
                let x = t.param(p, "x")?;
                let sq = t.mul(x, x)?;
                let s = t.scale(sq, 1.5)?;
                t.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    /// Every op in the closed set, chained into one scalar.
    #[test]
    fn every_op_matches_finite_differences() {
        let p = set(&[
            ("a", Tensor::matrix(3, 4, lcg(1, 12)).unwrap()),
            ("b", Tensor::matrix(4, 4, lcg(2, 16)).unwrap()),
            ("bias", Tensor::vector(lcg(3, 4))),
            ("gain", Tensor::vector(lcg(4, 4).iter().map(|v| 1.0 + 0.3 * v).collect())),
            ("s", Tensor::scalar(0.4)),
            ("t", Tensor::scalar(-0.2)),
            ("c", Tensor::matrix(4, 3, lcg(5, 12)).unwrap()),
        ]);
        let allow = vec![
            true, false, true, //
            true, true, false, //
            false, false, true,
        ];
        let report = grad_check_finite_diff(
            |t, p| {
                let a = t.param(p, "a")?;
                let b = t.param(p, "b")?;
                let bias = t.param(p, "bias")?;
                let gain = t.param(p, "gain")?;
                let s = t.param(p, "s")?;
                let sh = t.param(p, "t")?;
                let c = t.param(p, "c")?;
                let h = t.matmul(a, b)?;
                let h = t.add_row(h, bias)?;
                let h = t.rms_norm(h, gain)?;
                let act = t.silu(h)?;
                let h = t.mul(act, h)?;
                let es = t.exp(s)?;
                let h = t.scale_by(h, es)?;
                let h = t.shift(h, sh)?;
                let n = t.l2_normalize(h)?;
                let cos: Vec<f64> = (0..6).map(|i| (0.3 * i as f64).cos()).collect();
                let sin: Vec<f64> = (0..6).map(|i| (0.3 * i as f64).sin()).collect();
                let r = t.rotary(n, cos, sin)?;
                let left = t.slice_cols(r, 0, 2)?;
                let right = t.slice_cols(r, 2, 2)?;
                let swapped = t.concat_cols(&[right, left])?;
                let sc = t.matmul_nt(swapped, r)?;
                let sm = t.masked_softmax(sc, &allow)?;
                let tr = t.transpose(c)?;
                let mixed = t.matmul(sm, tr)?;
                let top = t.gather_rows(mixed, &[2, 0])?;
                let stacked = t.concat_rows(&[top, mixed])?;
                let logits = t.scale(stacked, 3.0)?;
                let n_el = 20;
                let targets: Vec<f64> = (0..n_el).map(|i| (i % 3 == 0) as u8 as f64).collect();
                let weights: Vec<f64> = (0..n_el).map(|i| if i == 4 { 0.0 } else { 0.1 }).collect();
                let l1 = t.bce_sum(logits, targets, weights)?;
                let m = t.mean(stacked)?;
                t.add(l1, m)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn seeded_backward_is_a_vjp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        let g = tape.backward_from(y, Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -1.0]).unwrap()).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 0.0, 1.0, -2.0]);
    }
}
