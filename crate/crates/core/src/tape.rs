//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every op appends one node holding its output value. Nodes can only refer
//! to earlier nodes, so the record is topologically ordered by construction
//! and [`Tape::backward`] is a single reverse sweep. A node requires a
//! gradient iff one of its inputs does; leaves registered with
//! `requires_grad = false` never get a gradient buffer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::matmul;
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor of [`Tape::row_norm`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Var, rows: usize, n: usize, m: usize },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, cols: usize },
    RowNorm { x: Var, cols: usize, inv_std: Vec<T> },
    RowAffine { x: Var, gamma: Var, beta: Var, cols: usize },
    Add { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Reshape { x: Var },
    SwapLast2 { x: Var, batch: usize, m: usize, n: usize },
    PickSpatial { x: Var, batch: usize, c: usize, hw: usize, offset: usize },
    Mse { pred: Var, target: Vec<T> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation record plus the values and (after backward) gradients of every
/// node.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Leaves with `requires_grad` receive a gradient
    /// from [`backward`](Self::backward) if the loss depends on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    /// Valid cross-correlation, stride 1. `x` is C_in×H×W or N×C_in×H×W,
    /// `w` is C_out×C_in×k×k, `b` has C_out entries. Odd k is enforced by
    /// the blocks, not here.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (batch, c_in, h, wd) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(shape_err("conv2d", format!("input must be rank 3 or 4, got {xs:?}"))),
        };
        let [c_out, wc_in, k, k2] = ws.as_slice() else {
            return Err(shape_err("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        let (c_out, k) = (*c_out, *k);
        if *wc_in != c_in || *k2 != k {
            return Err(shape_err("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        if bs != [c_out] {
            return Err(shape_err("conv2d", format!("bias {bs:?} for {c_out} output channels")));
        }
        if h < k || wd < k {
            return Err(shape_err("conv2d", format!("input {h}×{wd} smaller than kernel {k}")));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
        };
        let out = ops::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let shape = if xs.len() == 3 {
            vec![c_out, geom.ho(), geom.wo()]
        } else {
            vec![batch, c_out, geom.ho(), geom.wo()]
        };
        let value = Tensor::new(&shape, out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err("maxpool2d", format!("needs rank ≥ 3, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h < 2 || w < 2 {
            return Err(shape_err("maxpool2d", format!("spatial {h}×{w} below 2×2")));
        }
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (out, argmax) = ops::maxpool2_forward(planes, h, w, self.value(x).data());
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::new(&shape, out)?;
        self.push("maxpool2d", value, Op::MaxPool2d { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// `weight · x + bias` contracted over the last axis of `x`.
    /// `x` is [..., n], `weight` m×n, `bias` m; result [..., m].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let Some(&n) = xs.last() else {
            return Err(shape_err("linear", "scalar input"));
        };
        let [m, wn] = ws.as_slice() else {
            return Err(shape_err("linear", format!("weight must be a matrix, got {ws:?}")));
        };
        let m = *m;
        if *wn != n || self.shape(b) != [m] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let rows = self.value(x).numel() / n.max(1);
        let out = ops::linear_forward(rows, n, m, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(&shape, out)?;
        self.push("linear", value, Op::Linear { x, w, b, rows, n, m }, &[x, w, b])
    }

    /// Batched matrix product: `a` [B, M, K] times `b` [B, K, N], or times
    /// `b`ᵀ when `trans_b` (then `b` is [B, N, K]). Rank-2 operands are
    /// treated as B = 1.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match s {
                [m, k] => Some((1, *m, *k)),
                [bt, m, k] => Some((*bt, *m, *k)),
                _ => None,
            }
        };
        let (Some((ba, m, k)), Some((bb, r1, r2))) = (split(&as_), split(&bs)) else {
            return Err(shape_err("bmm", format!("operands must be rank 2 or 3: {as_:?} {bs:?}")));
        };
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb || as_.len() != bs.len() {
            return Err(shape_err("bmm", format!("{as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..ba {
                matmul(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if as_.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let value = Tensor::new(&shape, out)?;
        self.push(
            "bmm",
            value,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch: ba,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// Softmax along the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&cols) = xs.last().filter(|&&c| c > 0) else {
            return Err(shape_err("softmax", format!("bad shape {xs:?}")));
        };
        let out = ops::softmax_rows(cols, self.value(x).data());
        let value = Tensor::new(&xs, out)?;
        self.push("softmax", value, Op::Softmax { x, cols }, &[x])
    }

    /// Zero-mean / unit-variance normalization along the last axis (no
    /// learnable parameters; see [`row_affine`](Self::row_affine)).
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&cols) = xs.last().filter(|&&c| c > 0) else {
            return Err(shape_err("row_norm", format!("bad shape {xs:?}")));
        };
        let (out, inv_std) = ops::row_norm(cols, T::from_f64_lossy(NORM_EPS), self.value(x).data());
        let value = Tensor::new(&xs, out)?;
        self.push("row_norm", value, Op::RowNorm { x, cols, inv_std }, &[x])
    }

    /// `x * gamma + beta` broadcast along the last axis.
    pub fn row_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap_or(&0);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_err("row_affine", format!("x {xs:?} vs gamma/beta")));
        }
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            for ((v, &gv), &bv) in row.iter_mut().zip(&g).zip(&bt) {
                *v = *v * gv + bv;
            }
        }
        let value = Tensor::new(&xs, out)?;
        self.push("row_affine", value, Op::RowAffine { x, gamma, beta, cols }, &[x, gamma, beta])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// `x * scale + shift` element-wise with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * scale + shift);
        self.push("affine", value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Swaps the last two axes: [..., M, N] -> [..., N, M].
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("swap_last2", format!("rank {} < 2", xs.len())));
        }
        let r = xs.len();
        let (m, n) = (xs[r - 2], xs[r - 1]);
        let batch: usize = xs[..r - 2].iter().product();
        let out = transpose_batched(self.value(x).data(), batch, m, n);
        let mut shape = xs.clone();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(&shape, out)?;
        self.push("swap_last2", value, Op::SwapLast2 { x, batch, m, n }, &[x])
    }

    /// Selects the hypercolumn at (`row`, `col`): [N, C, H, W] -> [N, C]
    /// (or [C, H, W] -> [C]).
    pub fn pick_spatial(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(shape_err("pick_spatial", format!("rank must be 3 or 4: {xs:?}"))),
        };
        if row >= h || col >= w {
            return Err(shape_err("pick_spatial", format!("({row},{col}) outside {h}×{w}")));
        }
        let hw = h * w;
        let offset = row * w + col;
        let src = self.value(x).data();
        let out: Vec<T> = (0..batch * c).map(|i| src[i * hw + offset]).collect();
        let shape = if xs.len() == 3 { vec![c] } else { vec![batch, c] };
        let value = Tensor::new(&shape, out)?;
        self.push(
            "pick_spatial",
            value,
            Op::PickSpatial {
                x,
                batch,
                c,
                hw,
                offset,
            },
            &[x],
        )
    }

    /// Mean squared error against a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.numel() || p.numel() == 0 {
            return Err(shape_err(
                "mse",
                format!("prediction has {} entries, target {}", p.numel(), target.numel()),
            ));
        }
        target.ensure_finite("mse target")?;
        let n = T::from_usize(p.numel()).unwrap();
        let s: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(s / n);
        self.push(
            "mse",
            value,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Populates [`grad`](Self::grad)
    /// for every gradient-requiring leaf the loss depends on. A tape can be
    /// swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            g.ensure_finite("gradient")?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, data: Vec<T>| -> Result<()> {
            let delta = Tensor::new(self.shape(v), data)?;
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
            Ok(())
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = [rg(*x), rg(*w), rg(*b)];
                let (dx, dw, db) =
                    ops::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd, need);
                if let Some(d) = dx {
                    acc(*x, d)?;
                }
                if let Some(d) = dw {
                    acc(*w, d)?;
                }
                if let Some(d) = db {
                    acc(*b, d)?;
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx[idx as usize] = dx[idx as usize] + gv;
                }
                acc(*x, dx)?;
            }
            Op::Relu { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx)?;
            }
            Op::Linear { x, w, b, rows, n, m } => {
                let (rows, n, m) = (*rows, *n, *m);
                if rg(*x) {
                    let mut dx = vec![T::zero(); rows * n];
                    matmul(rows, m, n, gd, false, self.value(*w).data(), false, &mut dx, false);
                    acc(*x, dx)?;
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    matmul(m, rows, n, gd, true, self.value(*x).data(), false, &mut dw, false);
                    acc(*w, dw)?;
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks_exact(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if rg(*a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![T::zero(); batch * m * k];
                    for t in 0..batch {
                        matmul(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            !*trans_b,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, da)?;
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            matmul(n, m, k, gs, true, as_, false, out, false);
                        } else {
                            // dB = Aᵀ · dC
                            matmul(k, m, n, as_, true, gs, false, out, false);
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::Softmax { x, cols } => {
                acc(*x, ops::softmax_rows_backward(*cols, node.value.data(), gd))?;
            }
            Op::RowNorm { x, cols, inv_std } => {
                acc(*x, ops::row_norm_backward(*cols, node.value.data(), inv_std, gd))?;
            }
            Op::RowAffine { x, gamma, beta, cols } => {
                let cols = *cols;
                let gam = self.value(*gamma).data();
                let xv = self.value(*x).data();
                if rg(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_exact_mut(cols) {
                        for (d, &gv) in row.iter_mut().zip(gam) {
                            *d = *d * gv;
                        }
                    }
                    acc(*x, dx)?;
                }
                if rg(*gamma) {
                    let mut dg = vec![T::zero(); cols];
                    for (xr, gr) in xv.chunks_exact(cols).zip(gd.chunks_exact(cols)) {
                        for ((d, &a), &b) in dg.iter_mut().zip(xr).zip(gr) {
                            *d = *d + a * b;
                        }
                    }
                    acc(*gamma, dg)?;
                }
                if rg(*beta) {
                    let mut dbt = vec![T::zero(); cols];
                    for gr in gd.chunks_exact(cols) {
                        for (d, &b) in dbt.iter_mut().zip(gr) {
                            *d = *d + b;
                        }
                    }
                    acc(*beta, dbt)?;
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    acc(*a, gd.to_vec())?;
                }
                if rg(*b) {
                    acc(*b, gd.to_vec())?;
                }
            }
            Op::Affine { x, scale } => {
                acc(*x, gd.iter().map(|&v| v * *scale).collect())?;
            }
            Op::Reshape { x } => acc(*x, gd.to_vec())?,
            Op::SwapLast2 { x, batch, m, n } => {
                acc(*x, transpose_batched(gd, *batch, *n, *m))?;
            }
            Op::PickSpatial {
                x,
                batch,
                c,
                hw,
                offset,
            } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for i in 0..batch * c {
                    dx[i * hw + offset] = gd[i];
                }
                acc(*x, dx)?;
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap() * gd[0];
                acc(
                    *pred,
                    p.iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect(),
                )?;
            }
            Op::Sum { x } => {
                acc(*x, vec![gd[0]; self.value(*x).numel()])?;
            }
        }
        Ok(())
    }
}

fn transpose_batched<T: Scalar>(src: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for t in 0..batch {
        let s = &src[t * m * n..(t + 1) * m * n];
        let d = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_each_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_buffer() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), false).unwrap();
        let w = tape.leaf(t(&[1, 2], &[0.5, -0.5]), true).unwrap();
        let b = tape.leaf(t(&[1], &[0.0]), true).unwrap();
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(Error::TapeConsumed));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0; 3]);
    }

    #[test]
    fn non_finite_activations_abort() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[1], vec![f32::MAX]).unwrap(), true).unwrap();
        assert!(matches!(tape.affine(x, 10.0, 0.0), Err(Error::NonFinite(_))));
        assert!(tape.leaf(Tensor::new(&[1], vec![f32::NAN]).unwrap(), false).is_err());
    }

    #[test]
    fn pick_spatial_and_swap_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64), true)
            .unwrap();
        let p = tape.pick_spatial(x, 1, 1).unwrap();
        assert_eq!(tape.shape(p), &[2, 3]);
        assert_eq!(tape.value(p).data(), &[4.0, 13.0, 22.0, 31.0, 40.0, 49.0]);
        let r = tape.reshape(x, &[2, 3, 9]).unwrap();
        let s = tape.swap_last2(r).unwrap();
        assert_eq!(tape.shape(s), &[2, 9, 3]);
        assert_eq!(tape.value(s).data()[..3], [0.0, 9.0, 18.0]);
    }
}
