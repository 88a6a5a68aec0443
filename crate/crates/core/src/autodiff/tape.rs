//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every forward op appends a node holding its output value. `backward`
//! walks the record in strict reverse order, accumulating gradients
//! additively into each input. A tape is single-use: call [`Tape::reset`]
//! before recording the next step.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use super::kernels::{self, ConvDims, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{dim_err, param_err, Error, Result};
use crate::moe::Routing;
use crate::tensor::{Real, Tensor};

static CORRUPT_CONV_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Negative-control hook for the gradient-check harness: when enabled, the
/// conv2d input gradient is deliberately scaled by 1.5.
pub fn set_conv_backward_fault(enabled: bool) {
    CORRUPT_CONV_BACKWARD.store(enabled, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    ScaleBy { x: Var, s: Var },
    ChannelBias { x: Var, b: Var },
    RowBias { x: Var, b: Var },
    Expand { p: Var },
    MulSpatial { x: Var, m: Var },
    Relu(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    MaskedRowSoftmax { x: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Resize { x: Var },
    AvgPool { x: Var, factor: usize },
    LocalMean { x: Var, window: usize },
    LocalVar { x: Var, window: usize, mean: Vec<R> },
    TopKMix { scores: Var, experts: Vec<Var>, routing: Routing, renormalize: bool },
    RoutedConv(Box<RoutedConv<R>>),
    WeightedCe { logits: Var, labels: Vec<usize>, weights: Vec<R> },
    Focal { logits: Var, targets: Vec<bool>, gamma: R },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct RoutedConv<R> {
    x: Var,
    kernels: Vec<Var>,
    scores: Var,
    routing: Routing,
    renormalize: bool,
    geom: ConvGeom,
    dims: ConvDims,
    /// Pixels routed to each expert, ascending.
    pixels: Vec<Vec<usize>>,
    /// Expert outputs `[c, pixels[j].len()]` at the routed pixels.
    outputs: Vec<Vec<R>>,
}

/// Column sub-matrix at the listed pixels.
fn gather_cols<R: Real>(col: &[R], taps: usize, po: usize, pixels: &[usize]) -> Vec<R> {
    let n = pixels.len();
    let mut out = vec![R::zero(); taps * n];
    for r in 0..taps {
        let src = &col[r * po..(r + 1) * po];
        for (o, &p) in out[r * n..(r + 1) * n].iter_mut().zip(pixels) {
            *o = src[p];
        }
    }
    out
}

/// Normaliser of the selected scores at pixel `p` (one when not renormalising).
fn routed_weights<R: Real>(s: &[R], p_count: usize, sel: &[usize], p: usize, renormalize: bool) -> R {
    if renormalize {
        sel.iter().map(|&e| s[e * p_count + p]).sum::<R>()
    } else {
        R::one()
    }
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Mutable gradient buffer of `v`, created on first touch. `None` when `v`
/// does not participate in differentiation.
fn gbuf<'a, R: Real>(grads: &'a mut [Option<Vec<R>>], nodes: &[Node<R>], v: Var) -> Option<&'a mut [R]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]).as_mut_slice())
}

fn add_into<R: Real>(grads: &mut [Option<Vec<R>>], nodes: &[Node<R>], v: Var, contrib: &[R]) {
    if let Some(buf) = gbuf(grads, nodes, v) {
        for (a, &b) in buf.iter_mut().zip(contrib) {
            *a += b;
        }
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node so the tape can record a fresh step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Contract("tape already differentiated; reset before recording".into()));
        }
        let value = value.ensure_finite(name)?;
        let requires_grad = match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are pushed directly"),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push_leaf(value, Op::Leaf, false)
    }

    /// Differentiable input leaf.
    pub fn leaf(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of one parameter on the same
    /// tape return the same variable, so shared weights accumulate gradient.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push_leaf(store.tensor(id).clone(), Op::Param(id), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Routes later `param(id)` binds to `var` instead of the stored tensor.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`; absent for
    /// constants and before differentiation.
    pub fn grad(&self, v: Var) -> Option<Tensor<R>> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let value = &self.nodes[v.0].value;
        let data = self.grads[v.0].clone().unwrap_or_else(|| vec![R::zero(); value.numel()]);
        Some(Tensor::from_parts(value.shape().to_vec(), data))
    }

    /// Gradients for every bound parameter, in parameter-id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<R>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(id, v)| matches!(self.nodes[v.0].op, Op::Param(pid) if pid == **id))
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds every bound parameter's gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<R>) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g.data());
        }
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let (cin, h, w) = self.value(x).chw()?;
        let ks = self.value(k).shape();
        let [cout, kcin, kh, kw] = match ks {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return dim_err("conv2d", format!("kernel must be rank 4, got {ks:?}")),
        };
        if kcin != cin {
            return dim_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return param_err("conv2d", format!("kernel must be square and odd, got {kh}x{kw}"));
        }
        if geom.dilation == 0 || geom.stride == 0 {
            return param_err("conv2d", "dilation and stride must be positive");
        }
        let (Some(ho), Some(wo)) = (geom.out_len(h, kh), geom.out_len(w, kw)) else {
            return dim_err("conv2d", format!("{h}x{w} input too small for kernel span"));
        };
        let dims = ConvDims {
            cin,
            h,
            w,
            cout,
            k: kh,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), dims, geom);
        self.push(Tensor::from_parts(vec![cout, ho, wo], out), Op::Conv2d { x, k, geom }, "conv2d", &[x, k])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<R>, name: &'static str, f: impl Fn(R, R) -> R) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, op, name, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor), "scale", &[x])
    }

    /// `s * x` for a one-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err("scale_by", "scale must hold exactly one value");
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| sv * v);
        self.push(t, Op::ScaleBy { x, s }, "scale_by", &[x, s])
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C,H,W]` map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(b).numel() != c {
            return dim_err("channel_bias", format!("{c} channels, bias has {}", self.value(b).numel()));
        }
        let bias = self.value(b).data().to_vec();
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / plane])
            .collect();
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::ChannelBias { x, b }, "channel_bias", &[x, b])
    }

    /// Adds `b[j]` to column `j` of every row of a `[M,N]` matrix.
    pub fn row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [m, n] = self.matrix_dims("row_bias", x)?;
        if self.value(b).numel() != n {
            return dim_err("row_bias", format!("{n} columns, bias has {}", self.value(b).numel()));
        }
        let bias = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        self.push(Tensor::from_parts(vec![m, n], data), Op::RowBias { x, b }, "row_bias", &[x, b])
    }

    /// Broadcasts a `[C]` vector to a `[C,h,w]` map.
    pub fn expand(&mut self, p: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return param_err("expand", "spatial extents must be positive");
        }
        let c = self.value(p).numel();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in self.value(p).data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::Expand { p }, "expand", &[p])
    }

    /// Multiplies every channel of `x: [C,H,W]` by the map `m: [1,H,W]`.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(m).shape() != [1, h, w] {
            return dim_err("mul_spatial", format!("map {:?} vs features {c}x{h}x{w}", self.value(m).shape()));
        }
        let mv = self.value(m).data().to_vec();
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[i % plane])
            .collect();
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::MulSpatial { x, m }, "mul_spatial", &[x, m])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > R::zero() { v } else { R::zero() });
        self.push(t, Op::Relu(x), "relu", &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), "tanh", &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = R::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut total = R::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, "softmax", &[x])
    }

    /// Row softmax of a `[M,N]` matrix restricted to the columns where
    /// `keep[j]` holds; excluded columns get weight exactly zero. A row with
    /// no surviving column is all zeros.
    pub fn masked_row_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let [m, n] = self.matrix_dims("masked_row_softmax", x)?;
        if keep.len() != n {
            return dim_err("masked_row_softmax", format!("{n} columns, mask has {}", keep.len()));
        }
        let src = self.value(x).data();
        let mut out = vec![R::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mut max = R::neg_infinity();
            for j in 0..n {
                if keep[j] {
                    max = max.max(row[j]);
                }
            }
            if max == R::neg_infinity() {
                continue;
            }
            let mut total = R::zero();
            for j in 0..n {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    total += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= total;
            }
        }
        // The mask is recoverable from the output (exact zeros) together with
        // the input, so only the output is kept for the backward pass.
        self.push(Tensor::from_parts(vec![m, n], out), Op::MaskedRowSoftmax { x }, "masked_row_softmax", &[x])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<[usize; 2]> {
        match self.value(v).shape() {
            [m, n] => Ok([*m, *n]),
            s => dim_err(op, format!("expected matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.matrix_dims("matmul", a)?;
        let [k2, n] = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", format!("[{m},{k}] x [{k2},{n}]"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [m, n] = self.matrix_dims("transpose", x)?;
        let out = transpose_raw(self.value(x).data(), m, n);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), "transpose", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape", &[x])
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return param_err("concat", "nothing to concatenate");
        };
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[1..] != tail[..] {
                return dim_err("concat", format!("{s:?} does not match trailing {tail:?}"));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), "concat", parts)
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres.
    pub fn upsample(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale == 0 {
            return param_err("bilinear_upsample", "scale must be at least 1");
        }
        let (_, h, w) = self.value(x).chw()?;
        self.resize(x, h * scale, w * scale)
    }

    /// Bilinear resize of a `[C,H,W]` map to `[C,ho,wo]` (half-pixel centres).
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if ho == 0 || wo == 0 {
            return param_err("resize", "target extents must be positive");
        }
        let out = kernels::resize_forward(self.value(x).data(), c, h, w, ho, wo);
        self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::Resize { x }, "resize", &[x])
    }

    /// Non-overlapping `factor`x`factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return param_err("avg_pool", format!("factor {factor} does not tile {h}x{w}"));
        }
        let (ho, wo) = (h / factor, w / factor);
        let src = self.value(x).data();
        let inv = R::lit(1.0 / (factor * factor) as f64);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = R::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[(ch * h + oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::AvgPool { x, factor }, "avg_pool", &[x])
    }

    fn check_window(window: usize) -> Result<()> {
        if window < 3 || window % 2 == 0 {
            return param_err("local_stats", format!("window must be odd and >= 3, got {window}"));
        }
        Ok(())
    }

    /// Sliding-window mean with edge-replication padding.
    pub fn local_mean(&mut self, x: Var, window: usize) -> Result<Var> {
        Self::check_window(window)?;
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::local_mean(self.value(x).data(), c, h, w, window);
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::LocalMean { x, window }, "local_mean", &[x])
    }

    /// Sliding-window population variance with edge-replication padding.
    pub fn local_var(&mut self, x: Var, window: usize) -> Result<Var> {
        Self::check_window(window)?;
        let (c, h, w) = self.value(x).chw()?;
        let mean = kernels::local_mean(self.value(x).data(), c, h, w, window);
        let out = kernels::local_var(self.value(x).data(), &mean, c, h, w, window);
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::LocalVar { x, window, mean },
            "local_var",
            &[x],
        )
    }

    /// Per-pixel weighted sum of the routed experts:
    /// `out[:, p] = sum_j w_j(p) * experts[rho_j(p)][:, p]`, with `w_j` the
    /// selected scores (optionally renormalised over the selection).
    pub fn topk_mix(&mut self, scores: Var, experts: &[Var], routing: Routing, renormalize: bool) -> Result<Var> {
        let (ne, h, w) = self.value(scores).chw()?;
        if experts.len() != ne || routing.experts() != ne || routing.pixels() != h * w {
            return dim_err(
                "sparse_fuse",
                format!("{} experts, {ne} score planes, routing over {} experts", experts.len(), routing.experts()),
            );
        }
        let (c, eh, ew) = self.value(experts[0]).chw()?;
        for &e in experts {
            if self.value(e).shape() != [c, h, w] || (eh, ew) != (h, w) {
                return dim_err("sparse_fuse", "expert outputs must share the score map's spatial shape");
            }
        }
        let p_count = h * w;
        let s = self.value(scores).data();
        let mut out = vec![R::zero(); c * p_count];
        for p in 0..p_count {
            let sel = routing.selected(p);
            let norm = if renormalize {
                sel.iter().map(|&e| s[e * p_count + p]).sum::<R>()
            } else {
                R::one()
            };
            for &e in sel {
                let wgt = s[e * p_count + p] / norm;
                let ev = self.value(experts[e]).data();
                for ch in 0..c {
                    out[ch * p_count + p] += wgt * ev[ch * p_count + p];
                }
            }
        }
        let mut inputs = vec![scores];
        inputs.extend_from_slice(experts);
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::TopKMix {
                scores,
                experts: experts.to_vec(),
                routing,
                renormalize,
            },
            "sparse_fuse",
            &inputs,
        )
    }

    /// Sparse expert mixture evaluated only where each expert is routed:
    /// `out[:, p] = sum_j w_j(p) * (kernels[rho_j(p)] * x)[:, p]`. Equal to
    /// [`Tape::topk_mix`] over dense expert convolutions, without computing
    /// the unselected experts.
    pub fn routed_conv(
        &mut self,
        x: Var,
        kernels: &[Var],
        scores: Var,
        routing: Routing,
        renormalize: bool,
        geom: ConvGeom,
    ) -> Result<Var> {
        let (ne, h, w) = self.value(scores).chw()?;
        if kernels.is_empty() || kernels.len() != ne || routing.experts() != ne || routing.pixels() != h * w {
            return dim_err(
                "sparse_fuse",
                format!("{} kernels, {ne} score planes, routing over {} experts", kernels.len(), routing.experts()),
            );
        }
        let ks = self.value(kernels[0]).shape().to_vec();
        if ks.len() != 4 || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return dim_err("sparse_fuse", format!("expert kernel shape {ks:?}"));
        }
        if kernels.iter().any(|&k| self.value(k).shape() != ks.as_slice()) {
            return dim_err("sparse_fuse", "experts differ in shape");
        }
        let (cin, xh, xw) = self.value(x).chw()?;
        if cin != ks[1] || (xh, xw) != (h, w) {
            return dim_err("sparse_fuse", format!("input {cin}x{xh}x{xw} vs kernel {ks:?} and scores {h}x{w}"));
        }
        if geom.stride != 1 || geom.out_len(h, ks[2]) != Some(h) || geom.out_len(w, ks[2]) != Some(w) {
            return param_err("sparse_fuse", "expert convolutions must preserve resolution");
        }
        let dims = ConvDims {
            cin,
            h,
            w,
            cout: ks[0],
            k: ks[2],
            ho: h,
            wo: w,
        };
        let p_count = h * w;
        let taps = cin * dims.k * dims.k;
        let c = dims.cout;
        let mut pixels = vec![Vec::new(); ne];
        for p in 0..p_count {
            for &e in routing.selected(p) {
                pixels[e].push(p);
            }
        }
        let col = kernels::im2col(self.value(x).data(), dims, geom);
        let outputs: Vec<Vec<R>> = pixels
            .iter()
            .zip(kernels)
            .map(|(list, &k)| {
                let mut y = vec![R::zero(); c * list.len()];
                if !list.is_empty() {
                    let sub = gather_cols(&col, taps, p_count, list);
                    kernels::gemm_rows(self.value(k).data(), &sub, &mut y, c, taps, list.len());
                }
                y
            })
            .collect();
        let s = self.value(scores).data();
        let mut out = vec![R::zero(); c * p_count];
        let mut cursor = vec![0usize; ne];
        for p in 0..p_count {
            let sel = routing.selected(p);
            let norm = routed_weights(s, p_count, sel, p, renormalize);
            for &e in sel {
                let wgt = s[e * p_count + p] / norm;
                let (y, n, i) = (&outputs[e], pixels[e].len(), cursor[e]);
                for ch in 0..c {
                    out[ch * p_count + p] += wgt * y[ch * n + i];
                }
                cursor[e] += 1;
            }
        }
        let mut inputs = vec![x, scores];
        inputs.extend_from_slice(kernels);
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::RoutedConv(Box::new(RoutedConv {
                x,
                kernels: kernels.to_vec(),
                scores,
                routing,
                renormalize,
                geom,
                dims,
                pixels,
                outputs,
            })),
            "sparse_fuse",
            &inputs,
        )
    }

    /// Mean over pixels of `weights[y] * -log softmax(logits)[y]`.
    /// `logits` is `[K, ...]` with one label per trailing position.
    pub fn weighted_ce(&mut self, logits: Var, labels: &[usize], weights: &[R]) -> Result<Var> {
        let shape = self.value(logits).shape();
        let k = shape[0];
        let p_count: usize = shape[1..].iter().product();
        if labels.len() != p_count || weights.len() != k {
            return dim_err(
                "weighted_ce",
                format!("{k} classes x {p_count} pixels vs {} labels, {} weights", labels.len(), weights.len()),
            );
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} outside 0..{k}")));
        }
        let z = self.value(logits).data();
        let mut total = R::zero();
        for (p, &y) in labels.iter().enumerate() {
            let lse = log_sum_exp((0..k).map(|c| z[c * p_count + p]));
            total += weights[y] * (lse - z[y * p_count + p]);
        }
        let loss = total / R::lit(p_count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            "weighted_ce",
            &[logits],
        )
    }

    /// Mean binary focal loss `-(1-p_t)^gamma log p_t` on logistic logits.
    pub fn focal(&mut self, logits: Var, targets: &[bool], gamma: R) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return dim_err("focal_loss", format!("{} logits vs {} targets", z.len(), targets.len()));
        }
        let mut total = R::zero();
        for (&zi, &t) in z.iter().zip(targets) {
            let s = if t { zi } else { -zi };
            let log_pt = -softplus(-s);
            let one_minus = sigmoid(-s);
            total += -pow_or_one(one_minus, gamma) * log_pt;
        }
        let loss = total / R::lit(z.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                gamma,
            },
            "focal_loss",
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), "mean", &[x])
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every
    /// differentiable node recorded before it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; reset first".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![R::one()]);
        let Tape { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backward_op(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<R: Real>(x: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn log_sum_exp<R: Real>(vals: impl Iterator<Item = R> + Clone) -> R {
    let max = vals.clone().fold(R::neg_infinity(), R::max);
    max + vals.map(|v| (v - max).exp()).sum::<R>().ln()
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

/// `base^gamma`, with the convention `0^0 = 1`.
#[inline]
fn pow_or_one<R: Real>(base: R, gamma: R) -> R {
    if gamma == R::zero() {
        R::one()
    } else {
        base.powf(gamma)
    }
}

fn backward_op<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], node: &Node<R>, g: &[R]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Conv2d { x, k, geom } => {
            let xv = &nodes[x.0].value;
            let kv = &nodes[k.0].value;
            let xs = xv.shape();
            let ks = kv.shape();
            let os = out.shape();
            let dims = ConvDims {
                cin: xs[0],
                h: xs[1],
                w: xs[2],
                cout: ks[0],
                k: ks[2],
                ho: os[1],
                wo: os[2],
            };
            if nodes[x.0].requires_grad {
                let mut gx = kernels::conv2d_backward_input(g, kv.data(), dims, *geom);
                if CORRUPT_CONV_BACKWARD.load(Ordering::SeqCst) {
                    for v in &mut gx {
                        *v *= R::lit(1.5);
                    }
                }
                add_into(grads, nodes, *x, &gx);
            }
            if nodes[k.0].requires_grad {
                let gk = kernels::conv2d_backward_kernel(g, xv.data(), dims, *geom);
                add_into(grads, nodes, *k, &gk);
            }
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g);
            add_into(grads, nodes, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, g);
            if let Some(buf) = gbuf(grads, nodes, *b) {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(buf) = gbuf(grads, nodes, *a) {
                for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                    *o += gv * y;
                }
            }
            if let Some(buf) = gbuf(grads, nodes, *b) {
                for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                    *o += gv * x;
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * *f;
                }
            }
        }
        Op::ScaleBy { x, s } => {
            let sv = nodes[s.0].value.data()[0];
            let xv = nodes[x.0].value.data();
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * sv;
                }
            }
            if let Some(buf) = gbuf(grads, nodes, *s) {
                buf[0] += g.iter().zip(xv).map(|(&gv, &v)| gv * v).sum::<R>();
            }
        }
        Op::ChannelBias { x, b } => {
            add_into(grads, nodes, *x, g);
            let plane = out.shape()[1] * out.shape()[2];
            if let Some(buf) = gbuf(grads, nodes, *b) {
                for (c, o) in buf.iter_mut().enumerate() {
                    *o += g[c * plane..(c + 1) * plane].iter().copied().sum::<R>();
                }
            }
        }
        Op::RowBias { x, b } => {
            add_into(grads, nodes, *x, g);
            let n = out.shape()[1];
            if let Some(buf) = gbuf(grads, nodes, *b) {
                for row in g.chunks(n) {
                    for (o, &gv) in buf.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Expand { p } => {
            let plane = out.shape()[1] * out.shape()[2];
            if let Some(buf) = gbuf(grads, nodes, *p) {
                for (c, o) in buf.iter_mut().enumerate() {
                    *o += g[c * plane..(c + 1) * plane].iter().copied().sum::<R>();
                }
            }
        }
        Op::MulSpatial { x, m } => {
            let plane = out.shape()[1] * out.shape()[2];
            let xv = nodes[x.0].value.data();
            let mv = nodes[m.0].value.data();
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i] * mv[i % plane];
                }
            }
            if let Some(buf) = gbuf(grads, nodes, *m) {
                for (i, (&gv, &v)) in g.iter().zip(xv).enumerate() {
                    buf[i % plane] += gv * v;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    if y > R::zero() {
                        *o += gv;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * (R::one() - y * y);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: R = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedRowSoftmax { x } => {
            let n = out.shape()[1];
            let y = out.data();
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        buf[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let [m, k] = [nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]];
            let n = nodes[b.0].value.shape()[1];
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if nodes[a.0].requires_grad {
                let bt = transpose_raw(bv, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                add_into(grads, nodes, *a, &ga);
            }
            if nodes[b.0].requires_grad {
                let at = transpose_raw(av, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                add_into(grads, nodes, *b, &gb);
            }
        }
        Op::Transpose(x) => {
            let [n, m] = [out.shape()[0], out.shape()[1]];
            let gt = transpose_raw(g, n, m);
            add_into(grads, nodes, *x, &gt);
        }
        Op::Reshape(x) => add_into(grads, nodes, *x, g),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                add_into(grads, nodes, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Resize { x } => {
            let (c, h, w) = nodes[x.0].value.chw().expect("rank-3 input");
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            if nodes[x.0].requires_grad {
                let gx = kernels::resize_backward(g, c, h, w, ho, wo);
                add_into(grads, nodes, *x, &gx);
            }
        }
        Op::AvgPool { x, factor } => {
            let (c, h, w) = nodes[x.0].value.chw().expect("rank-3 input");
            let (ho, wo) = (h / factor, w / factor);
            let inv = R::lit(1.0 / (factor * factor) as f64);
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            buf[(ch * h + yy) * w + xx] += g[(ch * ho + yy / factor) * wo + xx / factor] * inv;
                        }
                    }
                }
            }
        }
        Op::LocalMean { x, window } => {
            let (c, h, w) = nodes[x.0].value.chw().expect("rank-3 input");
            if nodes[x.0].requires_grad {
                let inv = R::lit(1.0 / (window * window) as f64);
                let gx = kernels::window_scatter(g, c, h, w, *window, |_, _| inv);
                add_into(grads, nodes, *x, &gx);
            }
        }
        Op::LocalVar { x, window, mean } => {
            let (c, h, w) = nodes[x.0].value.chw().expect("rank-3 input");
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let two_inv = R::lit(2.0 / (window * window) as f64);
                let gx = kernels::window_scatter(g, c, h, w, *window, |p, q| two_inv * (xv[q] - mean[p]));
                add_into(grads, nodes, *x, &gx);
            }
        }
        Op::TopKMix {
            scores,
            experts,
            routing,
            renormalize,
        } => {
            let c = out.shape()[0];
            let p_count = out.shape()[1] * out.shape()[2];
            let s = nodes[scores.0].value.data();
            let mut gs = vec![R::zero(); s.len()];
            let mut ge: Vec<Option<Vec<R>>> = experts
                .iter()
                .map(|e| nodes[e.0].requires_grad.then(|| vec![R::zero(); c * p_count]))
                .collect();
            for p in 0..p_count {
                let sel = routing.selected(p);
                let norm = if *renormalize {
                    sel.iter().map(|&e| s[e * p_count + p]).sum::<R>()
                } else {
                    R::one()
                };
                // a_j = <g[:, p], E_j[:, p]>
                let dots: Vec<R> = sel
                    .iter()
                    .map(|&e| {
                        let ev = nodes[experts[e].0].value.data();
                        (0..c).map(|ch| g[ch * p_count + p] * ev[ch * p_count + p]).sum()
                    })
                    .collect();
                let mixed: R = if *renormalize {
                    sel.iter().zip(&dots).map(|(&e, &a)| s[e * p_count + p] / norm * a).sum()
                } else {
                    R::zero()
                };
                for (&e, &a) in sel.iter().zip(&dots) {
                    let wgt = s[e * p_count + p] / norm;
                    gs[e * p_count + p] += if *renormalize { (a - mixed) / norm } else { a };
                    if let Some(buf) = ge[e].as_mut() {
                        for ch in 0..c {
                            buf[ch * p_count + p] += wgt * g[ch * p_count + p];
                        }
                    }
                }
            }
            add_into(grads, nodes, *scores, &gs);
            for (e, buf) in experts.iter().zip(ge) {
                if let Some(buf) = buf {
                    add_into(grads, nodes, *e, &buf);
                }
            }
        }
        Op::RoutedConv(rc) => {
            let RoutedConv {
                x,
                kernels: ks,
                scores,
                routing,
                renormalize,
                geom,
                dims,
                pixels,
                outputs,
            } = rc.as_ref();
            let c = dims.cout;
            let p_count = dims.h * dims.w;
            let taps = dims.cin * dims.k * dims.k;
            let s = nodes[scores.0].value.data();
            let ne = ks.len();
            // gy_j[:, i] = w_j(p_i) * g[:, p_i]
            let mut gy: Vec<Vec<R>> = pixels.iter().map(|l| vec![R::zero(); c * l.len()]).collect();
            let mut gs = vec![R::zero(); s.len()];
            let mut cursor = vec![0usize; ne];
            let mut dots = Vec::with_capacity(routing.k());
            for p in 0..p_count {
                let sel = routing.selected(p);
                let norm = routed_weights(s, p_count, sel, p, *renormalize);
                dots.clear();
                for &e in sel {
                    let (y, n, i) = (&outputs[e], pixels[e].len(), cursor[e]);
                    dots.push((0..c).map(|ch| g[ch * p_count + p] * y[ch * n + i]).sum::<R>());
                }
                let mixed: R = if *renormalize {
                    sel.iter().zip(&dots).map(|(&e, &a)| s[e * p_count + p] / norm * a).sum()
                } else {
                    R::zero()
                };
                for (&e, &a) in sel.iter().zip(&dots) {
                    let wgt = s[e * p_count + p] / norm;
                    gs[e * p_count + p] += if *renormalize { (a - mixed) / norm } else { a };
                    let (n, i) = (pixels[e].len(), cursor[e]);
                    for ch in 0..c {
                        gy[e][ch * n + i] = wgt * g[ch * p_count + p];
                    }
                    cursor[e] += 1;
                }
            }
            add_into(grads, nodes, *scores, &gs);
            let need_x = nodes[x.0].requires_grad;
            let need_k = ks.iter().any(|k| nodes[k.0].requires_grad);
            if !need_x && !need_k {
                return;
            }
            let col = kernels::im2col(nodes[x.0].value.data(), *dims, *geom);
            let mut gcol = if need_x { vec![R::zero(); taps * p_count] } else { Vec::new() };
            for ((list, gyj), &kv) in pixels.iter().zip(&gy).zip(ks) {
                let n = list.len();
                if n == 0 {
                    continue;
                }
                if nodes[kv.0].requires_grad {
                    let sub = gather_cols(&col, taps, p_count, list);
                    let mut gk = vec![R::zero(); c * taps];
                    for co in 0..c {
                        for r in 0..taps {
                            gk[co * taps + r] = kernels::dot(&gyj[co * n..(co + 1) * n], &sub[r * n..(r + 1) * n]);
                        }
                    }
                    add_into(grads, nodes, kv, &gk);
                }
                if need_x {
                    let kd = nodes[kv.0].value.data();
                    let mut row = vec![R::zero(); n];
                    for r in 0..taps {
                        row.iter_mut().for_each(|v| *v = R::zero());
                        for co in 0..c {
                            let wv = kd[co * taps + r];
                            for (a, &gv) in row.iter_mut().zip(&gyj[co * n..(co + 1) * n]) {
                                *a += wv * gv;
                            }
                        }
                        let dst = &mut gcol[r * p_count..(r + 1) * p_count];
                        for (&p, &v) in list.iter().zip(&row) {
                            dst[p] += v;
                        }
                    }
                }
            }
            if need_x {
                let mut gx = vec![R::zero(); dims.cin * dims.h * dims.w];
                kernels::col2im_add(&gcol, *dims, *geom, &mut gx);
                add_into(grads, nodes, *x, &gx);
            }
        }
        Op::WeightedCe { logits, labels, weights } => {
            let z = nodes[logits.0].value.data();
            let k = weights.len();
            let p_count = labels.len();
            let scale = g[0] / R::lit(p_count as f64);
            if let Some(buf) = gbuf(grads, nodes, *logits) {
                for (p, &y) in labels.iter().enumerate() {
                    let lse = log_sum_exp((0..k).map(|c| z[c * p_count + p]));
                    let wy = weights[y] * scale;
                    for c in 0..k {
                        let prob = (z[c * p_count + p] - lse).exp();
                        let target = if c == y { R::one() } else { R::zero() };
                        buf[c * p_count + p] += wy * (prob - target);
                    }
                }
            }
        }
        Op::Focal { logits, targets, gamma } => {
            let z = nodes[logits.0].value.data();
            let scale = g[0] / R::lit(z.len() as f64);
            if let Some(buf) = gbuf(grads, nodes, *logits) {
                for ((o, &zi), &t) in buf.iter_mut().zip(z).zip(targets) {
                    let s = if t { zi } else { -zi };
                    let p = sigmoid(s);
                    let q = sigmoid(-s);
                    let log_p = -softplus(-s);
                    // d/ds of -(1-p)^g log p
                    let ds = if *gamma == R::zero() {
                        -q
                    } else {
                        *gamma * p * q.powf(*gamma) * log_p - q.powf(*gamma + R::one())
                    };
                    *o += scale * if t { ds } else { -ds };
                }
            }
        }
        Op::Sum(x) => {
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::Mean(x) => {
            let n = R::lit(nodes[x.0].value.numel() as f64);
            if let Some(buf) = gbuf(grads, nodes, *x) {
                for o in buf.iter_mut() {
                    *o += g[0] / n;
                }
            }
        }
    }
}
