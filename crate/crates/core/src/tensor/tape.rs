use std::sync::Arc;

use super::kernels::{self, Conv2dGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    DwConv1d { x: Var, w: Var, b: Var },
    Silu(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    CosineRows(Var, Var),
    Mse(Var, Var),
    AvgPool2(Var),
    UpsampleNearest2(Var),
    PadReflect(Var, usize),
    UpsampleBilinear(Var),
    SelectiveScan { u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, states: Vec<T> },
    WindowDistance { bank: Var, feat: Var, picks: Vec<(usize, usize)> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | CosineRows(a, b)
            | Mse(a, b) => vec![*a, *b],
            Scale(a, _) | Silu(a) | Exp(a) | Softplus(a) | Mean(a) | Sum(a) | Reshape(a)
            | Transpose(a) | GatherRows(a, _) | ScatterRows(a, _) | AvgPool2(a)
            | UpsampleNearest2(a) | UpsampleBilinear(a) | PadReflect(a, _) => vec![*a],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            DwConv1d { x, w, b } => vec![*x, *w, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SelectiveScan { u, delta, a, b, c, d, .. } => vec![*u, *delta, *a, *b, *c, *d],
            WindowDistance { bank, feat, .. } => vec![*bank, *feat],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of primitive applications. Inputs always precede the nodes
/// that consume them, so a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// requires a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor { shape, data, requires_grad: false, grad: None };
        self.push(value, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
        }
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.record(self.shape(a).to_vec(), data, node))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.record(self.shape(a).to_vec(), data, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, kernels::silu, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, kernels::softplus, Op::Softplus(a))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.record(vec![m, n], data, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` row vector to every row of `[m,n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", format!("row {:?} for width {n}", self.shape(row))));
        }
        let r = self.data(row);
        let data = self.data(x).chunks(n).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b)).collect();
        Ok(self.record(vec![m, n], data, Op::AddRow(x, row)))
    }

    /// 2-D convolution over `[C_in,H,W]` with kernel `[C_out,C_in,k,k]`,
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.dims3("conv2d", x)?;
        let (c_out, k) = match *self.shape(w) {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            ref s => {
                return Err(Error::shape("conv2d", format!("kernel {s:?} for input channels {c_in}")))
            }
        };
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let geom = Conv2dGeom { c_in, h, w: wd, c_out, k, stride, pad };
        let data = kernels::conv2d(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        Ok(self.record(vec![c_out, geom.out_h(), geom.out_w()], data, Op::Conv2d { x, w, b, geom }))
    }

    /// Causal depthwise conv over the time axis of `[L,D]`, kernel `[D,k]`.
    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, d) = self.dims2("depthwise-conv1d", x)?;
        let (d2, k) = self.dims2("depthwise-conv1d", w)?;
        if d2 != d || self.shape(b) != [d] {
            return Err(Error::shape(
                "depthwise-conv1d",
                format!("x {:?} w {:?} b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let data = kernels::dwconv1d(self.data(x), self.data(w), self.data(b), l, d, k);
        Ok(self.record(vec![l, d], data, Op::DwConv1d { x, w, b }))
    }

    /// Normalizes each row of `[R,C]` over its `C` entries.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer-norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer-norm", format!("affine params must be [{c}]")));
        }
        let eps = T::c(eps);
        let inv_c = T::one() / T::c(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let (g, bt) = (self.data(gamma), self.data(beta));
        for (i, row) in self.data(x).chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + bt[j];
            }
        }
        Ok(self.record(vec![r, c], out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.record(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::c(self.data(a).len() as f64);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        self.record(Vec::new(), vec![s], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        Ok(self.record(shape, data, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let data = kernels::transpose(self.data(a), r, c);
        Ok(self.record(vec![c, r], data, Op::Transpose(a)))
    }

    fn check_order(&self, op: &'static str, a: Var, order: &[usize]) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(op, a)?;
        if order.len() != r || order.iter().any(|&i| i >= r) {
            return Err(Error::shape(op, format!("order of length {} over {r} rows", order.len())));
        }
        Ok((r, c))
    }

    /// `out[i] = x[order[i]]` over rows.
    pub fn gather_rows(&mut self, a: Var, order: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.check_order("gather-by-order", a, &order)?;
        let x = self.data(a);
        let mut data = Vec::with_capacity(r * c);
        for &src in order.iter() {
            data.extend_from_slice(&x[src * c..(src + 1) * c]);
        }
        Ok(self.record(vec![r, c], data, Op::GatherRows(a, order)))
    }

    /// `out[order[i]] = x[i]` over rows; undoes [`Tape::gather_rows`] with the
    /// same order.
    pub fn scatter_rows(&mut self, a: Var, order: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.check_order("scatter-by-order", a, &order)?;
        let x = self.data(a);
        let mut data = vec![T::zero(); r * c];
        for (i, &dst) in order.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.record(vec![r, c], data, Op::ScatterRows(a, order)))
    }

    /// Row-wise cosine similarity of two `[R,C]` tensors, giving `[R]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine-similarity", a, b)?;
        let (r, c) = self.dims2("cosine-similarity", a)?;
        let data = self
            .data(a)
            .chunks(c)
            .zip(self.data(b).chunks(c))
            .map(|(x, y)| kernels::cosine(x, y))
            .collect();
        Ok(self.record(vec![r], data, Op::CosineRows(a, b)))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::c(self.data(a).len() as f64);
        let s = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.record(Vec::new(), vec![s], Op::Mse(a, b)))
    }

    /// 2x2 average pooling of `[C,H,W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("avg-pool2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg-pool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(a);
        let q = T::c(0.25);
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ch * h * w;
                    let s = x[b + 2 * y * w + 2 * xx]
                        + x[b + 2 * y * w + 2 * xx + 1]
                        + x[b + (2 * y + 1) * w + 2 * xx]
                        + x[b + (2 * y + 1) * w + 2 * xx + 1];
                    data[(ch * oh + y) * ow + xx] = s * q;
                }
            }
        }
        Ok(self.record(vec![c, oh, ow], data, Op::AvgPool2(a)))
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("upsample-nearest", a)?;
        let x = self.data(a);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.record(vec![c, oh, ow], data, Op::UpsampleNearest2(a)))
    }

    /// Mirror padding of `[C,H,W]` by `pad` on every side; `pad < min(H,W)`.
    pub fn pad_reflect(&mut self, a: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("pad-reflect", a)?;
        if pad >= h.min(w) && pad > 0 {
            return Err(Error::shape("pad-reflect", format!("pad {pad} for {h}x{w}")));
        }
        let x = self.data(a);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let p = pad as isize;
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh as isize {
                let row = (ch * h + kernels::reflect(y - p, h)) * w;
                for xx in 0..ow as isize {
                    data.push(x[row + kernels::reflect(xx - p, w)]);
                }
            }
        }
        Ok(self.record(vec![c, oh, ow], data, Op::PadReflect(a, pad)))
    }

    /// Half-pixel bilinear resize of `[C,H,W]` (or `[H,W]`) to `oh x ow`.
    pub fn upsample_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w, rank2) = match *self.shape(a) {
            [h, w] => (1, h, w, true),
            [c, h, w] => (c, h, w, false),
            ref s => return Err(Error::shape("upsample-bilinear", format!("{s:?}"))),
        };
        let data = kernels::bilinear(self.data(a), c, h, w, oh, ow);
        let shape = if rank2 { vec![oh, ow] } else { vec![c, oh, ow] };
        Ok(self.record(shape, data, Op::UpsampleBilinear(a)))
    }

    /// Fused selective scan over already-discretizable inputs.
    ///
    /// `u, delta: [L,D]`, `a: [D,N]` (negative), `b, c: [L,N]`, `d: [D]`.
    /// Computes `h_t = exp(delta_t a) h_{t-1} + delta_t b_t u_t`,
    /// `y_t = c_t . h_t + d u_t` with `h_0 = 0`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (l, dim) = self.dims2("selective-scan", u)?;
        let (da, n) = self.dims2("selective-scan", a)?;
        let ok = self.shape(delta) == [l, dim]
            && da == dim
            && self.shape(b) == [l, n]
            && self.shape(c) == [l, n]
            && self.shape(d) == [dim];
        if !ok {
            return Err(Error::shape(
                "selective-scan",
                format!(
                    "u {:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
                    self.shape(u),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d)
                ),
            ));
        }
        let (y, states) = crate::ssm::kernels::fused_scan_forward(
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
            l,
            dim,
            n,
        );
        Ok(self.record(vec![l, dim], y, Op::SelectiveScan { u, delta, a, b, c, d, states }))
    }

    /// Windowed prototype distance: `bank: [K,G,C]`, `feat: [G,C]` where
    /// `G = gh*gw`. Output `[gh,gw]` holds `1 - max_{k,window} cos`.
    pub fn window_distance(&mut self, bank: Var, feat: Var, gh: usize, gw: usize, p: usize) -> Result<Var> {
        let (g, c) = self.dims2("window-distance", feat)?;
        let k = match *self.shape(bank) {
            [k, g2, c2] if g2 == g && c2 == c && k >= 1 => k,
            ref s => return Err(Error::shape("window-distance", format!("bank {s:?} vs feature [{g},{c}]"))),
        };
        if gh * gw != g {
            return Err(Error::shape("window-distance", format!("grid {gh}x{gw} vs {g} patches")));
        }
        let (dist, picks) =
            crate::prototype::window_distance_raw(self.data(bank), self.data(feat), k, gh, gw, c, p)?;
        Ok(self.record(vec![gh, gw], dist, Op::WindowDistance { bank, feat, picks }))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires a
    /// gradient receives one (zeros when it does not reach `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("already consumed by a previous backward pass"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape("loss must be a scalar"));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out: Vec<Option<Vec<T>>> = vec![None; n];
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g.clone());
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b = *b + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(av).map(|(&gg, &x)| gg * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    acc(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::AddRow(x, row) => {
                let n = nodes[row.0].value.numel();
                if wants(*row) {
                    let mut gr = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(*row, gr);
                }
                acc(*x, g.to_vec());
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geom, wants(*x), wants(*w));
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*w) {
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::DwConv1d { x, w, b } => {
                let (l, d) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let k = nodes[w.0].value.shape()[1];
                let (dx, dw, db) = kernels::dwconv1d_backward(val(*x), val(*w), g, l, d, k);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Silu(a) => acc(*a, g.iter().zip(val(*a)).map(|(&gg, &x)| gg * kernels::silu_grad(x)).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(&gg, &y)| gg * y).collect()),
            Op::Softplus(a) => {
                acc(*a, g.iter().zip(val(*a)).map(|(&gg, &x)| gg * kernels::sigmoid(x)).collect())
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                let inv_c = T::one() / T::c(c as f64);
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        for j in 0..c {
                            dx[r * c + j] = *rs * (gr[j] * gm[j] - m1 - xh[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * xh[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel();
                acc(*a, vec![g[0] / T::c(n as f64); n])
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Transpose(a) => {
                let s = nodes[i].value.shape();
                acc(*a, kernels::transpose(g, s[0], s[1]))
            }
            Op::GatherRows(a, order) => {
                let c = nodes[i].value.shape()[1];
                let mut dx = vec![T::zero(); g.len()];
                for (k, &src) in order.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] = dx[src * c + j] + g[k * c + j];
                    }
                }
                acc(*a, dx)
            }
            Op::ScatterRows(a, order) => {
                let c = nodes[i].value.shape()[1];
                let mut dx = vec![T::zero(); g.len()];
                for (k, &dst) in order.iter().enumerate() {
                    dx[k * c..(k + 1) * c].copy_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                acc(*a, dx)
            }
            Op::CosineRows(a, b) => {
                let c = nodes[a.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (r, &gg) in g.iter().enumerate() {
                    let s = r * c..(r + 1) * c;
                    kernels::cosine_backward(
                        &av[s.clone()],
                        &bv[s.clone()],
                        gg,
                        Some(&mut da[s.clone()]),
                        Some(&mut db[s]),
                    );
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = T::c(2.0) * g[0] / T::c(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
                if wants(*b) {
                    acc(*b, da.iter().map(|&v| -v).collect());
                }
                acc(*a, da);
            }
            Op::AvgPool2(a) => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::c(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            dx[(ch * h + y) * w + x] = g[(ch * oh + y / 2) * ow + x / 2] * q;
                        }
                    }
                }
                acc(*a, dx)
            }
            Op::UpsampleNearest2(a) => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let d = (ch * h + y / 2) * w + x / 2;
                            dx[d] = dx[d] + g[(ch * oh + y) * ow + x];
                        }
                    }
                }
                acc(*a, dx)
            }
            Op::PadReflect(a, pad) => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let p = *pad as isize;
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh as isize {
                        let row = (ch * h + kernels::reflect(y - p, h)) * w;
                        for x in 0..ow as isize {
                            let d = row + kernels::reflect(x - p, w);
                            dx[d] = dx[d] + g[(ch as isize * oh as isize + y) as usize * ow + x as usize];
                        }
                    }
                }
                acc(*a, dx)
            }
            Op::UpsampleBilinear(a) => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let os = nodes[i].value.shape();
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                acc(*a, kernels::bilinear_backward(g, c, h, w, oh, ow))
            }
            Op::SelectiveScan { u, delta, a, b, c, d, states } => {
                let (l, dim) = (nodes[u.0].value.shape()[0], nodes[u.0].value.shape()[1]);
                let n = nodes[a.0].value.shape()[1];
                let gr = crate::ssm::kernels::fused_scan_backward(
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    states,
                    g,
                    l,
                    dim,
                    n,
                );
                acc(*u, gr.du);
                acc(*delta, gr.ddelta);
                acc(*a, gr.da);
                acc(*b, gr.db);
                acc(*c, gr.dc);
                acc(*d, gr.dd);
            }
            Op::WindowDistance { bank, feat, picks } => {
                let c = nodes[feat.0].value.shape()[1];
                let g_count = nodes[feat.0].value.shape()[0];
                let (bv, fv) = (val(*bank), val(*feat));
                let mut dbank = vec![T::zero(); bv.len()];
                let mut dfeat = vec![T::zero(); fv.len()];
                for (pos, &(k, w)) in picks.iter().enumerate() {
                    let bs = (k * g_count + pos) * c..(k * g_count + pos + 1) * c;
                    let fs = w * c..(w + 1) * c;
                    // d(1 - cos) = -d cos
                    kernels::cosine_backward(
                        &bv[bs.clone()],
                        &fv[fs.clone()],
                        -g[pos],
                        Some(&mut dbank[bs]),
                        Some(&mut dfeat[fs]),
                    );
                }
                acc(*bank, dbank);
                acc(*feat, dfeat);
            }
        }
    }
}
