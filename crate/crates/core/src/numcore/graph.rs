//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so [`Graph::backward`] only has to walk the node list from
//! the loss back to the first node.

use super::scalar::{gemm, Layout};
use super::{Gradients, NumError, ParamId, ParamStore, Scalar, Tensor};

/// Additive bias applied to masked attention scores before normalization.
pub const MASK_BIAS: f64 = -1e9;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used as a negative control for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackwardFault {
    /// Multiplies every `linear` weight gradient by the given factor.
    ScaleLinearWeightGrad(f64),
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    MaskedSoftmax(Var),
    SumAll(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: T, probs: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    ConvTranspose { x: Var, w: Var, stride: usize },
    Mse(Var, Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Vec<Var>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::MaskedSoftmax(x)
            | Op::SumAll(x)
            | Op::MaxPool { x, .. }
            | Op::Reshape(x)
            | Op::SliceRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConvTranspose { x, w, .. } => vec![*x, *w],
            Op::ConcatRows(parts) | Op::Sum(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed differentiable operations for one forward pass.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<(), NumError> {
    if cond {
        Ok(())
    } else {
        Err(NumError::dim(op, detail()))
    }
}

fn finite<T: Scalar>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>, NumError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(NumError::NonFinite { op })
    }
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let one = T::one();
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.fast_tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::lit(3.0) * a * x2);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

/// Softmax of one row with additive masking of invalid positions, in place.
pub fn masked_softmax_row<T: Scalar>(row: &mut [T], mask: &[bool]) {
    let bias = T::lit(MASK_BIAS);
    for (v, &ok) in row.iter_mut().zip(mask) {
        if !ok {
            *v += bias;
        }
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let total: T = row.iter().copied().sum();
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: vec![None; store.len()], fault: None }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = matches!(op, Op::Param(_))
            || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows out of the graph through it).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Node holding a parameter's current value; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, NumError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| NumError::MissingParameter(name.to_string()))?;
        Ok(self.param(id))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul", || {
            format!("{sa:?} · {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::rows(k),
            self.value(b).data(),
            Layout::rows(n),
            T::zero(),
            out.data_mut(),
            Layout::rows(n),
        );
        let out = finite(out, "matmul")?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt", || {
            format!("{sa:?} · {sb:?}ᵀ")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::rows(k),
            self.value(b).data(),
            Layout::transposed(k),
            T::zero(),
            out.data_mut(),
            Layout::rows(n),
        );
        let out = finite(out, "matmul_nt")?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Affine map over the last axis: `x[...×c_in] · w[c_in×c_out] + b[c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        check(sw.len() == 2 && sx.last() == Some(&sw[0]), "pointwise_linear", || {
            format!("input {sx:?} with weights {sw:?}")
        })?;
        let (cin, cout) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = self.shape(b);
            check(sb == [cout], "pointwise_linear", || format!("bias {sb:?} for {cout} outputs"))?;
        }
        let rows = self.value(x).numel() / cin;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = cout;
        let mut out = Tensor::zeros(&out_shape);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            Layout::rows(cin),
            self.value(w).data(),
            Layout::rows(cout),
            T::one(),
            out.data_mut(),
            Layout::rows(cout),
        );
        let out = finite(out, "pointwise_linear")?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, "add", || format!("{sa:?} + {sb:?}"))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let out = finite(out, "add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NumError> {
        let out = finite(self.value(x).map(|v| v * s), "scale")?;
        Ok(self.push(out, Op::Scale(x, s)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let out = finite(self.value(x).map(|v| gelu_parts(v).0), "gelu")?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    /// Per-token normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let d = self.value(x).last_dim();
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        check(sg == [d] && sb == [d], "layer_norm", || {
            format!("width {d} with gain {sg:?}, bias {sb:?}")
        })?;
        let xv = self.value(x);
        let rows = xv.leading();
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(xv.shape());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (row, orow) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mu) * r * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = finite(out, "layer_norm")?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, mean, rstd }))
    }

    /// Softmax over the last axis; positions with `mask[j] == false` receive
    /// an additive `MASK_BIAS` before normalization.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumError> {
        let l = self.value(x).last_dim();
        check(mask.len() == l, "masked_softmax", || {
            format!("mask length {} for last extent {l}", mask.len())
        })?;
        if !mask.iter().any(|&m| m) {
            return Err(NumError::DegenerateRow);
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(l) {
            masked_softmax_row(row, mask);
        }
        let out = finite(out, "masked_softmax")?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Multi-head scaled dot-product attention over `[L×d]` projections.
    ///
    /// Head `h` uses columns `h*d/heads .. (h+1)*d/heads` of `q`, `k`, `v`.
    /// Keys with `mask[j] == false` are excluded through [`MASK_BIAS`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        heads: usize,
    ) -> Result<Var, NumError> {
        let sq = self.shape(q).to_vec();
        check(
            sq.len() == 2 && self.shape(k) == sq.as_slice() && self.shape(v) == sq.as_slice(),
            "attention",
            || format!("q {sq:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
        )?;
        let (l, d) = (sq[0], sq[1]);
        check(heads > 0 && d % heads == 0, "attention", || format!("{heads} heads for width {d}"))?;
        check(mask.len() == l, "attention", || format!("mask length {} for {l} tokens", mask.len()))?;
        if !mask.iter().any(|&m| m) {
            return Err(NumError::DegenerateRow);
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = Tensor::zeros(&[l, d]);
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let col = h * dh;
                let p_at = h * l * l;
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    qd,
                    Layout { offset: col, rs: d, cs: 1 },
                    kd,
                    Layout { offset: col, rs: 1, cs: d },
                    T::zero(),
                    &mut probs,
                    Layout { offset: p_at, rs: l, cs: 1 },
                );
                for row in probs[p_at..p_at + l * l].chunks_mut(l) {
                    masked_softmax_row(row, mask);
                }
                gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    &probs,
                    Layout { offset: p_at, rs: l, cs: 1 },
                    vd,
                    Layout { offset: col, rs: d, cs: 1 },
                    T::zero(),
                    out.data_mut(),
                    Layout { offset: col, rs: d, cs: 1 },
                );
            }
        }
        let out = finite(out, "attention")?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, scale, probs }))
    }

    /// Attention weights `[heads × L × L]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => {
                let l = self.nodes[v.0].value.shape()[0];
                Some((probs.as_slice(), *heads, l))
            }
            _ => None,
        }
    }

    /// Window-`r` max pooling of an `[h×w×d]` map with stride `r`.
    ///
    /// Ties resolve to the first maximum in row-major window scan order.
    pub fn maxpool2d(&mut self, x: Var, r: usize) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        check(s.len() == 3, "maxpool2d", || format!("rank-3 input expected, got {s:?}"))?;
        let (h, w, d) = (s[0], s[1], s[2]);
        check(r > 0 && h % r == 0 && w % r == 0, "maxpool2d", || {
            format!("window {r} does not divide {h}×{w}")
        })?;
        let (oh, ow) = (h / r, w / r);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[oh, ow, d]);
        let mut argmax = vec![0usize; oh * ow * d];
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * d;
                for c in 0..d {
                    let mut best_idx = ((oy * r) * w + ox * r) * d + c;
                    let mut best = xd[best_idx];
                    for ky in 0..r {
                        for kx in 0..r {
                            let idx = ((oy * r + ky) * w + ox * r + kx) * d + c;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[obase + c] = best;
                    argmax[obase + c] = best_idx;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Channel-wise transposed convolution with kernel `2·stride`, padding
    /// `stride/2`: maps `[h×w×d]` to `[h·stride × w·stride × d]`.
    ///
    /// `w` holds one `2s×2s` stencil per channel, laid out `[2s × 2s × d]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NumError> {
        if stride == 0 || stride % 2 != 0 {
            return Err(NumError::Config(format!(
                "transposed convolution needs an even stride, got {stride}"
            )));
        }
        let s = self.shape(x).to_vec();
        check(s.len() == 3, "transposed_conv2d", || format!("rank-3 input expected, got {s:?}"))?;
        let (h, wd, d) = (s[0], s[1], s[2]);
        let k = 2 * stride;
        let sw = self.shape(w);
        check(sw == [k, k, d], "transposed_conv2d", || {
            format!("weights {sw:?}, expected [{k}, {k}, {d}]")
        })?;
        let (oh, ow) = (h * stride, wd * stride);
        let pad = stride / 2;
        let mut out = Tensor::zeros(&[oh, ow, d]);
        let (xd, wv) = (self.value(x).data(), self.value(w).data());
        let od = out.data_mut();
        for iy in 0..h {
            for ix in 0..wd {
                let xrow = &xd[(iy * wd + ix) * d..][..d];
                for ky in 0..k {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let wrow = &wv[(ky * k + kx) * d..][..d];
                        let orow = &mut od[(oy as usize * ow + ox as usize) * d..][..d];
                        for c in 0..d {
                            orow[c] += xrow[c] * wrow[c];
                        }
                    }
                }
            }
        }
        let out = finite(out, "transposed_conv2d")?;
        Ok(self.push(out, Op::ConvTranspose { x, w, stride }))
    }

    /// Mean squared difference; a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NumError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        check(sp == st, "mse", || format!("{sp:?} vs {st:?}"))?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = finite(Tensor::scalar(total / T::lit(p.len() as f64)), "mse")?;
        Ok(self.push(out, Op::Mse(pred, target)))
    }

    /// Sum of every element; a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumError> {
        let out = finite(Tensor::scalar(self.value(x).sum()), "sum_all")?;
        Ok(self.push(out, Op::SumAll(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        check(!parts.is_empty(), "concat_rows", || "nothing to concatenate".into())?;
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            check(s[1..] == tail[..], "concat_rows", || format!("{s:?} vs trailing {tail:?}"))?;
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start .. start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        check(len > 0 && start + len <= s[0], "slice_rows", || {
            format!("rows {start}..{} of {s:?}", start + len)
        })?;
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        check(!parts.is_empty(), "sum", || "empty sum".into())?;
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let (s0, s) = (out.shape(), self.shape(p));
            check(s0 == s, "sum", || format!("{s0:?} vs {s:?}"))?;
            out.add_assign(self.value(p));
        }
        let out = finite(out, "sum")?;
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every parameter
    /// that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::dim("backward", format!("scalar loss expected, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            visit_order.push(i);
            self.backward_node(i, g, &mut grads, &mut param_grads);
        }
        let out = Gradients::new(param_grads, visit_order);
        if !out.is_finite() {
            return Err(NumError::NonFinite { op: "backward" });
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Option<Tensor<T>>],
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => match &mut param_grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = Tensor::zeros(av.shape());
                gemm(m, n, k, T::one(), g.data(), Layout::rows(n), bv.data(), Layout::transposed(n), T::zero(), da.data_mut(), Layout::rows(k));
                let mut db = Tensor::zeros(bv.shape());
                gemm(k, m, n, T::one(), av.data(), Layout::transposed(k), g.data(), Layout::rows(n), T::zero(), db.data_mut(), Layout::rows(n));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let mut da = Tensor::zeros(av.shape());
                gemm(m, n, k, T::one(), g.data(), Layout::rows(n), bv.data(), Layout::rows(k), T::zero(), da.data_mut(), Layout::rows(k));
                let mut db = Tensor::zeros(bv.shape());
                gemm(n, m, k, T::one(), g.data(), Layout::transposed(n), av.data(), Layout::rows(k), T::zero(), db.data_mut(), Layout::rows(k));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / cin;
                if needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(rows, cout, cin, T::one(), g.data(), Layout::rows(cout), wv.data(), Layout::transposed(cout), T::zero(), dx.data_mut(), Layout::rows(cin));
                    acc(grads, *x, dx);
                }
                let mut dw = Tensor::zeros(wv.shape());
                let wscale = match self.fault {
                    Some(BackwardFault::ScaleLinearWeightGrad(f)) => T::lit(f),
                    None => T::one(),
                };
                gemm(cin, rows, cout, wscale, xv.data(), Layout::transposed(cin), g.data(), Layout::rows(cout), T::zero(), dw.data_mut(), Layout::rows(cout));
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[cout]);
                    for row in g.data().chunks(cout) {
                        for (d, &r) in db.data_mut().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(grads, *x, g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d *= gelu_parts(xv).1;
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = val(*x);
                let d = xv.last_dim();
                let gv = val(*gain).data();
                let dn = T::lit(d as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, ((row, grow), dxrow)) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * rs;
                        dxhat[j] = grow[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgain.data_mut()[j] += grow[j] * xhat[j];
                        dbias.data_mut()[j] += grow[j];
                    }
                    let (m1, m2) = (sum_dxhat / dn, sum_dxhat_xhat / dn);
                    for j in 0..d {
                        dxrow[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                acc(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::MaskedSoftmax(x) => {
                let y = &self.nodes[i].value;
                let l = y.last_dim();
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(l).zip(y.data().chunks(l)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, scale, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (l, d) = (qv.shape()[0], qv.shape()[1]);
                let dh = d / heads;
                let mut dq = Tensor::zeros(&[l, d]);
                let mut dk = Tensor::zeros(&[l, d]);
                let mut dv = Tensor::zeros(&[l, d]);
                let mut dp = vec![T::zero(); l * l];
                for h in 0..*heads {
                    let col = h * dh;
                    let p_at = h * l * l;
                    let head = Layout { offset: col, rs: d, cs: 1 };
                    let head_t = Layout { offset: col, rs: 1, cs: d };
                    // dP = dO · Vᵀ
                    gemm(l, dh, l, T::one(), g.data(), head, vv.data(), head_t, T::zero(), &mut dp, Layout::rows(l));
                    // dV += Pᵀ · dO
                    gemm(l, l, dh, T::one(), probs, Layout { offset: p_at, rs: 1, cs: l }, g.data(), head, T::one(), dv.data_mut(), head);
                    // dS = scale · P ⊙ (dP − rowsum(dP ⊙ P))
                    for (drow, prow) in dp.chunks_mut(l).zip(probs[p_at..p_at + l * l].chunks(l)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (dv_, &pv) in drow.iter_mut().zip(prow) {
                            *dv_ = *scale * pv * (*dv_ - dot);
                        }
                    }
                    gemm(l, l, dh, T::one(), &dp, Layout::rows(l), kv.data(), head, T::one(), dq.data_mut(), head);
                    gemm(l, l, dh, T::one(), &dp, Layout::transposed(l), qv.data(), head, T::one(), dk.data_mut(), head);
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[idx] += gv;
                }
                acc(grads, *x, dx);
            }
            Op::ConvTranspose { x, w, stride } => {
                let (xv, wv) = (val(*x), val(*w));
                let (h, wd, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let stride = *stride;
                let k = 2 * stride;
                let pad = stride / 2;
                let (oh, ow) = (h * stride, wd * stride);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let gd = g.data();
                for iy in 0..h {
                    for ix in 0..wd {
                        let base = (iy * wd + ix) * d;
                        for ky in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let grow = &gd[(oy as usize * ow + ox as usize) * d..][..d];
                                let wbase = (ky * k + kx) * d;
                                for c in 0..d {
                                    dx.data_mut()[base + c] += grow[c] * wv.data()[wbase + c];
                                    dw.data_mut()[wbase + c] += grow[c] * xv.data()[base + c];
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let c = T::lit(2.0) * g.item() / T::lit(pv.numel() as f64);
                let mut dp = Tensor::zeros(pv.shape());
                for ((d, &a), &b) in dp.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                    *d = c * (a - b);
                }
                let dt = dp.map(|v| -v);
                acc(grads, *p, dp);
                acc(grads, *t, dt);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(grads, *x, g.reshape(&shape).expect("reshape preserves count"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let part = Tensor::from_vec(val(p).shape(), g.data()[offset..offset + n].to_vec())
                        .expect("slice matches part shape");
                    offset += n;
                    acc(grads, p, part);
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let row: usize = xv.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * row..start * row + g.numel()].copy_from_slice(g.data());
                acc(grads, *x, dx);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
        }
    }
}
