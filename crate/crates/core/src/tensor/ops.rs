use super::tape::{grad_buf, Node, Tape, Var};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Spatial padding rule for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split evenly with the
    /// odd cell on the right/bottom.
    Same,
    Valid,
}

/// How a masked column is removed from a row softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// The masked logit is excluded before normalization; the remaining
    /// entries still sum to one.
    #[default]
    Renormalize,
    /// Full softmax, then the masked entry is zeroed (rows no longer sum to one).
    ZeroAfterSoftmax,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Element-wise product with a constant mask (dropout).
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Window {
        x: Var,
        t: usize,
        left: usize,
    },
    Sum(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
        col: usize,
        /// Unmasked probabilities, kept only for [`MaskMode::ZeroAfterSoftmax`].
        full: Option<Vec<f64>>,
    },
    Norm {
        x: Var,
        axis: usize,
    },
    Squash {
        x: Var,
        axis: usize,
    },
    Max {
        xs: Vec<Var>,
        argmax: Vec<u8>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Statistics are data-dependent (training) or frozen (inference).
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Predict {
        u: Var,
        w: Var,
    },
    WeightedSum {
        c: Var,
        uhat: Var,
    },
    Agreement {
        uhat: Var,
        o: Var,
    },
    /// Terminal scalar op whose input gradient is computed eagerly.
    Custom {
        x: Var,
        name: &'static str,
        grad: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Window { .. } => "window",
            Op::Sum(..) => "reduce_sum",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Norm { .. } => "vector_length",
            Op::Squash { .. } => "squash",
            Op::Max { .. } => "maxout",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm_slice",
            Op::Predict { .. } => "prediction_vectors",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Agreement { .. } => "agreement",
            Op::Custom { name, .. } => name,
        }
    }

    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Sigmoid(x)
            | Op::Slice { x, .. }
            | Op::Window { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::MaskedSoftmax { x, .. }
            | Op::Norm { x, .. }
            | Op::Squash { x, .. }
            | Op::Custom { x, .. } => vec![*x],
            Op::Concat { xs, .. } | Op::Max { xs, .. } => xs.clone(),
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Predict { u, w } => vec![*u, *w],
            Op::WeightedSum { c, uhat } => vec![*c, *uhat],
            Op::Agreement { uhat, o } => vec![*uhat, *o],
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |v: &Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = grad_buf(nodes, grads, *v) {
                        axpy(ga, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    axpy(gx, g, *k);
                }
            }
            Op::MulConst(x, mask) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            axpy(&mut gb[p * n..(p + 1) * n], grow, aip);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(x).shape().to_vec();
                let len = out.dim(*axis);
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let (outer, n, inner) = axis_split(&shape, *axis).expect("checked at forward");
                    for o in 0..outer {
                        for i in 0..len {
                            let src = (o * len + i) * inner;
                            let dst = (o * n + start + i) * inner;
                            axpy(&mut gx[dst..dst + inner], &g[src..src + inner], 1.0);
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let total = out.dim(*axis);
                let mut offset = 0;
                for x in xs {
                    let shape = val(x).shape().to_vec();
                    let (outer, n, inner) = axis_split(&shape, *axis).expect("checked at forward");
                    if let Some(gx) = grad_buf(nodes, grads, *x) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            axpy(&mut gx[dst..dst + n * inner], &g[src..src + n * inner], 1.0);
                        }
                    }
                    offset += n;
                }
            }
            Op::Window { x, t, left } => {
                let shape = val(x).shape().to_vec();
                let (steps, block) = (shape[0], shape[1] * shape[2]);
                let width = out.dim(0) / shape[1];
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for k in 0..width {
                        let Some(src_t) = (t + k).checked_sub(*left).filter(|&s| s < steps) else {
                            continue;
                        };
                        axpy(
                            &mut gx[src_t * block..(src_t + 1) * block],
                            &g[k * block..(k + 1) * block],
                            1.0,
                        );
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis).expect("checked");
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let s: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis).expect("checked");
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let s: f64 = (0..n).map(|k| g[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += g[idx(k)] - y[idx(k)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, col, full } => {
                let (rows, cols) = (out.dim(0), out.dim(1));
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let p = full.as_deref().unwrap_or(out.data());
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let masked = |k: usize| if k == *col { 0.0 } else { gr[k] };
                        let s: f64 = (0..cols).map(|k| pr[k] * masked(k)).sum();
                        for k in 0..cols {
                            gx[r * cols + k] += pr[k] * (masked(k) - s);
                        }
                    }
                }
            }
            Op::Norm { x, axis } => {
                let xt = val(x);
                let (outer, n, inner) = axis_split(xt.shape(), *axis).expect("checked");
                let xv = xt.data();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let len = out.data()[o * inner + i];
                            if len == 0.0 {
                                continue;
                            }
                            let gi = g[o * inner + i] / len;
                            for k in 0..n {
                                let idx = (o * n + k) * inner + i;
                                gx[idx] += gi * xv[idx];
                            }
                        }
                    }
                }
            }
            Op::Squash { x, axis } => {
                let xt = val(x);
                let (outer, n, inner) = axis_split(xt.shape(), *axis).expect("checked");
                let xv = xt.data();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let sq: f64 = (0..n).map(|k| xv[idx(k)] * xv[idx(k)]).sum();
                            if sq == 0.0 {
                                continue;
                            }
                            let norm = sq.sqrt();
                            // o = s * k(n), k(n) = n / (1 + n^2)
                            let scale = norm / (1.0 + sq);
                            let dscale = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq)) / norm;
                            let sg: f64 = (0..n).map(|k| xv[idx(k)] * g[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += scale * g[idx(k)] + dscale * sg * xv[idx(k)];
                            }
                        }
                    }
                }
            }
            Op::Max { xs, argmax } => {
                for (b, x) in xs.iter().enumerate() {
                    if let Some(gx) = grad_buf(nodes, grads, *x) {
                        for ((o, gi), &a) in gx.iter_mut().zip(g).zip(argmax) {
                            if a as usize == b {
                                *o += gi;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (xt, kt) = (val(x), val(k));
                conv2d_backward(xt, kt, out.shape(), *stride, *pad, g, nodes, grads, *x, *k);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let channels = inv_std.len();
                let count = xhat.len() / channels;
                let gam = val(gamma).data();
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (idx, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                    let c = idx % channels;
                    sum_g[c] += gi;
                    sum_gx[c] += gi * xh;
                }
                if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                    axpy(gg, &sum_gx, 1.0);
                }
                if let Some(gb) = grad_buf(nodes, grads, *beta) {
                    axpy(gb, &sum_g, 1.0);
                }
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let m = count as f64;
                    for (idx, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        let c = idx % channels;
                        gx[idx] += if *batch_stats {
                            gam[c] * inv_std[c] / m * (m * gi - sum_g[c] - xh * sum_gx[c])
                        } else {
                            gam[c] * inv_std[c] * gi
                        };
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let rows = inv_std.len();
                let m = xhat.len() / rows;
                let gn = val(gain).data();
                if let Some(gg) = grad_buf(nodes, grads, *gain) {
                    for r in 0..rows {
                        for k in 0..m {
                            gg[k] += g[r * m + k] * xhat[r * m + k];
                        }
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *bias) {
                    for r in 0..rows {
                        axpy(gb, &g[r * m..(r + 1) * m], 1.0);
                    }
                }
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let mf = m as f64;
                    for r in 0..rows {
                        let gxh: Vec<f64> = (0..m).map(|k| g[r * m + k] * gn[k]).collect();
                        let s: f64 = gxh.iter().sum();
                        let sx: f64 = gxh.iter().zip(&xhat[r * m..]).map(|(a, b)| a * b).sum();
                        for k in 0..m {
                            gx[r * m + k] +=
                                inv_std[r] / mf * (mf * gxh[k] - s - xhat[r * m + k] * sx);
                        }
                    }
                }
            }
            Op::Predict { u, w } => {
                let (ut, wt) = (val(u), val(w));
                let (n, id) = (ut.dim(0), ut.dim(1));
                let (oh, od) = (wt.dim(1), wt.dim(3));
                if let Some(gu) = grad_buf(nodes, grads, *u) {
                    for i in 0..n {
                        for j in 0..oh {
                            let go = &g[(i * oh + j) * od..(i * oh + j + 1) * od];
                            for d in 0..id {
                                let wrow = &wt.data()[((i * oh + j) * id + d) * od..][..od];
                                gu[i * id + d] += dot(go, wrow);
                            }
                        }
                    }
                }
                if let Some(gw) = grad_buf(nodes, grads, *w) {
                    for i in 0..n {
                        for j in 0..oh {
                            let go = &g[(i * oh + j) * od..(i * oh + j + 1) * od];
                            for d in 0..id {
                                let ud = ut.data()[i * id + d];
                                let base = ((i * oh + j) * id + d) * od;
                                axpy(&mut gw[base..base + od], go, ud);
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { c, uhat } => {
                let (ct, ut) = (val(c), val(uhat));
                let (n, oh, od) = (ut.dim(0), ut.dim(1), ut.dim(2));
                if let Some(gc) = grad_buf(nodes, grads, *c) {
                    for i in 0..n {
                        for j in 0..oh {
                            gc[i * oh + j] +=
                                dot(&g[j * od..(j + 1) * od], &ut.data()[(i * oh + j) * od..][..od]);
                        }
                    }
                }
                if let Some(gu) = grad_buf(nodes, grads, *uhat) {
                    for i in 0..n {
                        for j in 0..oh {
                            let base = (i * oh + j) * od;
                            axpy(&mut gu[base..base + od], &g[j * od..(j + 1) * od], ct.data()[i * oh + j]);
                        }
                    }
                }
            }
            Op::Agreement { uhat, o } => {
                let (ut, ot) = (val(uhat), val(o));
                let (n, oh, od) = (ut.dim(0), ut.dim(1), ut.dim(2));
                if let Some(gu) = grad_buf(nodes, grads, *uhat) {
                    for i in 0..n {
                        for j in 0..oh {
                            let base = (i * oh + j) * od;
                            axpy(&mut gu[base..base + od], &ot.data()[j * od..(j + 1) * od], g[i * oh + j]);
                        }
                    }
                }
                if let Some(go) = grad_buf(nodes, grads, *o) {
                    for i in 0..n {
                        for j in 0..oh {
                            let base = (i * oh + j) * od;
                            axpy(&mut go[j * od..(j + 1) * od], &ut.data()[base..base + od], g[i * oh + j]);
                        }
                    }
                }
            }
            Op::Custom { x, grad, .. } => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    axpy(gx, grad, g[0]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    xt: &Tensor,
    kt: &Tensor,
    out_shape: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    k: Var,
) {
    let (h, w, cin) = (xt.dim(0), xt.dim(1), xt.dim(2));
    let (kh, kw, cout) = (kt.dim(0), kt.dim(1), kt.dim(3));
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..kh {
                    let Some(iy) = (oy * stride.0 + dy).checked_sub(pad.0).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..kw {
                        let Some(ix) = (ox * stride.1 + dx).checked_sub(pad.1).filter(|&v| v < w)
                        else {
                            continue;
                        };
                        f((oy * ow + ox) * cout, (iy * w + ix) * cin, (dy * kw + dx) * cin * cout);
                    }
                }
            }
        }
    };
    if let Some(gx) = grad_buf(nodes, grads, x) {
        let kd = kt.data();
        visit(&mut |go, xi, ki| {
            let grow = &g[go..go + cout];
            for c in 0..cin {
                gx[xi + c] += dot(grow, &kd[ki + c * cout..ki + (c + 1) * cout]);
            }
        });
    }
    if let Some(gk) = grad_buf(nodes, grads, k) {
        let xd = xt.data();
        visit(&mut |go, xi, ki| {
            let grow = &g[go..go + cout];
            for c in 0..cin {
                axpy(&mut gk[ki + c * cout..ki + (c + 1) * cout], grow, xd[xi + c]);
            }
        });
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let (out, pad) = match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel extent {kernel} exceeds input extent {input}"),
                ));
            }
            ((input - kernel) / stride + 1, 0)
        }
    };
    if out == 0 {
        return Err(Error::shape("conv2d", "zero-sized output"));
    }
    Ok((out, pad))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same extent")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same extent")
}

/// Batch-norm statistics observed on one forward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = map(self.value(x), |a| a * k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", "mask length differs from input"));
        }
        let v = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        self.push(v, Op::MulConst(x, mask))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                if aip != 0.0 {
                    axpy(&mut out[i * n..(i + 1) * n], &tb.data()[p * n..(p + 1) * n], aip);
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        if start + len > n {
            return Err(Error::shape("slice", format!("{start}+{len} exceeds extent {n}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        axis_split(&first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis)?;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let n = t.dim(axis);
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            reshaped.push(self.reshape(x, &s)?);
        }
        self.concat(&reshaped, 0)
    }

    /// Concatenates time slices `t - left ..= t + right` of a `[T, H, D]`
    /// value along the height axis, giving `[(left + 1 + right) * H, D]`.
    /// Slices outside `0..T` contribute zeros.
    pub fn window(&mut self, x: Var, t: usize, left: usize, right: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape("window", format!("expected [T, H, D], got {:?}", xt.shape())));
        }
        let (steps, h, d) = (xt.dim(0), xt.dim(1), xt.dim(2));
        if t >= steps {
            return Err(Error::shape("window", format!("slice {t} outside 0..{steps}")));
        }
        let width = left + 1 + right;
        let block = h * d;
        let mut data = vec![0.0; width * block];
        for k in 0..width {
            if let Some(src) = (t + k).checked_sub(left).filter(|&s| s < steps) {
                data[k * block..(k + 1) * block]
                    .copy_from_slice(&xt.data()[src * block..(src + 1) * block]);
            }
        }
        let v = Tensor::new(vec![width * h, d], data)?;
        self.push(v, Op::Window { x, t, left })
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        if n == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (out[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        if n == 0 {
            return Err(Error::EmptyAxis { op: "log_softmax" });
        }
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (out[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[idx(k)] -= lse;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::LogSoftmax { x, axis })
    }

    /// Row-wise softmax of a `[rows, cols]` value with column `col` masked out.
    pub fn masked_softmax(&mut self, x: Var, col: usize, mode: MaskMode) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("masked_softmax", format!("expected 2-D, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.dim(0), t.dim(1));
        if col >= cols {
            return Err(Error::LabelOutOfRange { label: col, size: cols });
        }
        let mut out = vec![0.0; rows * cols];
        let mut full = (mode == MaskMode::ZeroAfterSoftmax).then(|| vec![0.0; rows * cols]);
        for r in 0..rows {
            let row = t.row(r);
            let include = |k: usize| mode == MaskMode::ZeroAfterSoftmax || k != col;
            let m = (0..cols).filter(|&k| include(k)).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..cols).filter(|&k| include(k)).map(|k| (row[k] - m).exp()).sum();
            for k in 0..cols {
                let p = if include(k) { (row[k] - m).exp() / z } else { 0.0 };
                if let Some(f) = full.as_mut() {
                    f[r * cols + k] = p;
                }
                out[r * cols + k] = if k == col { 0.0 } else { p };
            }
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        self.push(v, Op::MaskedSoftmax { x, col, full })
    }

    /// Euclidean norm along `axis` (the axis is removed).
    pub fn vector_length(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let sq: f64 = (0..n).map(|k| t.data()[(o * n + k) * inner + i].powi(2)).sum();
                out[o * inner + i] = sq.sqrt();
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Norm { x, axis })
    }

    /// `s * |s|^2 / (1 + |s|^2) / |s|` along `axis`, with `squash(0) = 0`.
    pub fn squash(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let sq: f64 = (0..n).map(|k| out[idx(k)].powi(2)).sum();
                let scale = if sq == 0.0 { 0.0 } else { sq.sqrt() / (1.0 + sq) };
                for k in 0..n {
                    out[idx(k)] *= scale;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::Squash { x, axis })
    }

    /// Element-wise maximum over equally shaped branches.
    pub fn maximum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("maxout", "no branches"))?;
        if xs.len() > u8::MAX as usize {
            return Err(Error::shape("maxout", "too many branches"));
        }
        for &x in xs {
            same_shape("maxout", self.value(first), self.value(x))?;
        }
        let mut out = self.value(first).data().to_vec();
        let mut argmax = vec![0u8; out.len()];
        for (b, &x) in xs.iter().enumerate().skip(1) {
            for ((o, a), &v) in out.iter_mut().zip(argmax.iter_mut()).zip(self.value(x).data()) {
                if v > *o {
                    *o = v;
                    *a = b as u8;
                }
            }
        }
        let v = Tensor::new(self.shape(first).to_vec(), out)?;
        self.push(v, Op::Max { xs: xs.to_vec(), argmax })
    }

    /// Cross-correlation of `x: [H, W, C_in]` with `k: [KH, KW, C_in, C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xt, kt) = (self.value(x), self.value(k));
        if xt.rank() != 3 || kt.rank() != 4 || xt.dim(2) != kt.dim(2) {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", xt.shape(), kt.shape())));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "zero stride"));
        }
        let (h, w, cin) = (xt.dim(0), xt.dim(1), xt.dim(2));
        let (kh, kw, cout) = (kt.dim(0), kt.dim(1), kt.dim(3));
        let (oh, ph) = conv_extent(h, kh, stride.0, padding)?;
        let (ow, pw) = conv_extent(w, kw, stride.1, padding)?;
        let mut out = vec![0.0; oh * ow * cout];
        let (xd, kd) = (xt.data(), kt.data());
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for dy in 0..kh {
                    let Some(iy) = (oy * stride.0 + dy).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..kw {
                        let Some(ix) = (ox * stride.1 + dx).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xi = (iy * w + ix) * cin;
                        let ki = (dy * kw + dx) * cin * cout;
                        for c in 0..cin {
                            axpy(orow, &kd[ki + c * cout..ki + (c + 1) * cout], xd[xi + c]);
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![oh, ow, cout], out)?;
        self.push(v, Op::Conv2d { x, k, stride, pad: (ph, pw) })
    }

    /// Per-channel normalization of `x: [.., C]` using statistics over all
    /// leading positions. Returns the observed statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, NormStats)> {
        let t = self.value(x);
        let c = *t.shape().last().ok_or_else(|| Error::shape("batch_norm", "rank 0 input"))?;
        let count = t.len() / c.max(1);
        if count == 0 {
            return Err(Error::EmptyAxis { op: "batch_norm" });
        }
        let mut mean = vec![0.0; c];
        for (i, v) in t.data().iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for (i, v) in t.data().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let out = self.batch_norm_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, NormStats { mean, var }))
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_apply(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&0);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| g.data()[i % c] * xh + b.data()[i % c])
            .collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            v,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
        )
    }

    /// Normalizes every leading-axis slice of `x` over all its remaining
    /// values, then applies element-wise `gain` and `bias`.
    pub fn layer_norm_slice(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::shape("layer_norm_slice", "rank 0 input"));
        }
        let rows = t.dim(0);
        let m = t.len() / rows.max(1);
        if self.value(gain).len() != m || self.value(bias).len() != m {
            return Err(Error::shape("layer_norm_slice", format!("gain/bias must hold {m} values")));
        }
        if m == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm_slice" });
        }
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for k in 0..m {
                xhat[r * m + k] = (row[k] - mean) * inv_std[r];
            }
        }
        let (gn, bs) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| gn[i % m] * xh + bs[i % m])
            .collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// `uhat[i, j] = u[i] · W[i, j]` for `u: [N, I_D]`, `W: [N, O_H, I_D, O_D]`.
    pub fn prediction_vectors(&mut self, u: Var, w: Var) -> Result<Var> {
        let (ut, wt) = (self.value(u), self.value(w));
        if ut.rank() != 2 || wt.rank() != 4 || wt.dim(0) != ut.dim(0) || wt.dim(2) != ut.dim(1) {
            return Err(Error::shape(
                "prediction_vectors",
                format!("{:?} with kernel {:?}", ut.shape(), wt.shape()),
            ));
        }
        let (n, id) = (ut.dim(0), ut.dim(1));
        let (oh, od) = (wt.dim(1), wt.dim(3));
        let mut out = vec![0.0; n * oh * od];
        for i in 0..n {
            let ui = &ut.data()[i * id..(i + 1) * id];
            for j in 0..oh {
                let orow = &mut out[(i * oh + j) * od..(i * oh + j + 1) * od];
                for (d, &ud) in ui.iter().enumerate() {
                    if ud != 0.0 {
                        axpy(orow, &wt.data()[((i * oh + j) * id + d) * od..][..od], ud);
                    }
                }
            }
        }
        let v = Tensor::new(vec![n, oh, od], out)?;
        self.push(v, Op::Predict { u, w })
    }

    /// `s[j] = Σ_i c[i, j] uhat[i, j]`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (ct, ut) = (self.value(c), self.value(uhat));
        if ut.rank() != 3 || ct.shape() != &ut.shape()[..2] {
            return Err(Error::shape("weighted_sum", format!("{:?} with {:?}", ct.shape(), ut.shape())));
        }
        let (n, oh, od) = (ut.dim(0), ut.dim(1), ut.dim(2));
        let mut out = vec![0.0; oh * od];
        for i in 0..n {
            for j in 0..oh {
                let cij = ct.data()[i * oh + j];
                axpy(&mut out[j * od..(j + 1) * od], &ut.data()[(i * oh + j) * od..][..od], cij);
            }
        }
        let v = Tensor::new(vec![oh, od], out)?;
        self.push(v, Op::WeightedSum { c, uhat })
    }

    /// `a[i, j] = uhat[i, j] · o[j]`.
    pub fn agreement(&mut self, uhat: Var, o: Var) -> Result<Var> {
        let (ut, ot) = (self.value(uhat), self.value(o));
        if ut.rank() != 3 || ot.shape() != &ut.shape()[1..] {
            return Err(Error::shape("agreement", format!("{:?} with {:?}", ut.shape(), ot.shape())));
        }
        let (n, oh, od) = (ut.dim(0), ut.dim(1), ut.dim(2));
        let mut out = vec![0.0; n * oh];
        for i in 0..n {
            for j in 0..oh {
                out[i * oh + j] = dot(&ut.data()[(i * oh + j) * od..][..od], &ot.data()[j * od..(j + 1) * od]);
            }
        }
        let v = Tensor::new(vec![n, oh], out)?;
        self.push(v, Op::Agreement { uhat, o })
    }

    /// Records a scalar whose gradient with respect to `x` is already known.
    pub(crate) fn custom_scalar(
        &mut self,
        x: Var,
        name: &'static str,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var> {
        debug_assert_eq!(grad.len(), self.value(x).len());
        self.push(Tensor::scalar(value), Op::Custom { x, name, grad })
    }
}
