use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{bilinear_taps, col2im, gemm, im2col, sigmoid, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::Tensor;

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    Concat(Vec<Var>),
    Upsample(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    GatherPixels {
        x: Var,
        pixels: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order of the computation.
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "Var used with a foreign graph");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf sharing storage with the caller (used for parameters).
    pub fn leaf_shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let t = Tensor::new([m, n], out)?.check_finite("matmul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, `b: [Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.shape(b), sw[0]),
                );
            }
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", "kernel larger than padded input");
        }
        let geom = ConvGeom {
            c_in: ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let p = geom.cols_len();
        let krows = geom.cols_rows();
        let mut out = vec![0.0; n * co * p];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            par::for_each_chunk_mut(&mut out, co * p, |i, dst| {
                let xi = &xd[i * ci * h * wd..(i + 1) * ci * h * wd];
                if geom.is_pointwise() {
                    gemm(co, krows, p, wdat, (krows, 1), xi, (p, 1), 0.0, dst, (p, 1));
                } else {
                    let mut cols = vec![0.0; krows * p];
                    im2col(xi, &geom, &mut cols);
                    gemm(
                        co,
                        krows,
                        p,
                        wdat,
                        (krows, 1),
                        &cols,
                        (p, 1),
                        0.0,
                        dst,
                        (p, 1),
                    );
                }
                if let Some(bias) = bias {
                    for (c, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            });
        }
        let t = Tensor::new([n, co, geom.h_out, geom.w_out], out)?.check_finite("conv2d")?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || !sx[1].is_multiple_of(groups) {
            return shape_err("group_norm", format!("{sx:?} into {groups} groups"));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group_norm", "affine parameters must be [C]");
        }
        let n = sx[0];
        let spatial: usize = sx[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let start = (i * c + g * cpg) * spatial;
                let seg = &xd[start..start + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + EPS).sqrt();
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let off = start + cc * spatial;
                    for s in 0..spatial {
                        out[off + s] = (xd[off + s] - mean) * rstd * gd[ch] + bd[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let t = Tensor::new(sx, out)?.check_finite("group_norm")?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Result<Var> {
        let t = self
            .value(x)
            .map(|v| a.apply(v))
            .check_finite("nonlinearity")?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Act(x, a), rg))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Silu)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let t = if ta.same_shape(tb) {
            ta.zip_map(tb, f)?
        } else if tb.len() == 1 && tb.rank() == 0 {
            let s = tb.item();
            ta.map(|v| f(v, s))
        } else {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        };
        let t = t.check_finite(name)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    /// Elementwise sum. `b` may be a rank-0 scalar; no other broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).scale(c).check_finite("scale")?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// Adds `b: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return shape_err("add_bias", format!("{sx:?} + {:?}", self.shape(b)));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bd = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        let t = t.check_finite("add_bias")?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// Adds per-sample channel offsets `v: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(v) != [sx[0], sx[1]] {
            return shape_err("add_channel", format!("{sx:?} + {:?}", self.shape(v)));
        }
        let inner: usize = sx[2..].iter().product();
        let vd = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val += vd[i / inner];
        }
        let t = t.check_finite("add_channel")?;
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(t, Op::AddChannel(x, v), rg))
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if first.len() < 2 {
            return shape_err("concat", "inputs must have rank >= 2");
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return shape_err("concat", format!("{s:?} vs {first:?}"));
            }
            total_c += s[1];
        }
        let mut out = vec![0.0; n * total_c * inner];
        let mut c_off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let d = self.value(p).data();
            for i in 0..n {
                let src = &d[i * c * inner..(i + 1) * c * inner];
                let dst = (i * total_c + c_off) * inner;
                out[dst..dst + c * inner].copy_from_slice(src);
            }
            c_off += c;
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Bilinear resize of `[N, C, h, w]` to `[N, C, out_h, out_w]` with corner
    /// alignment: output pixel `i` samples source coordinate `i·(h-1)/(out_h-1)`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || out_h == 0 || out_w == 0 {
            return shape_err("upsample_bilinear", format!("{sx:?} -> {out_h}x{out_w}"));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; nc * out_h * out_w];
        for plane in 0..nc {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[i * out_w + j] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let t = Tensor::new([sx[0], sx[1], out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Upsample(x), rg))
    }

    /// Mean softmax cross-entropy of `logits: [M, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            );
        }
        let (m, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelRange {
                label: bad,
                classes: k,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            // Running mean: exact when every row has the same loss.
            loss += (lse - row[labels[i]] - loss) / (i + 1) as f64;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss).check_finite("softmax_cross_entropy")?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            t,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).mean()).check_finite("mean")?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    /// Gathers per-pixel channel vectors from `x: [N, C, H, W]` into `[P, C]`.
    /// Pixel indices are flat over `N·H·W` (sample-major).
    pub fn gather_pixels(&mut self, x: Var, pixels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("gather_pixels", format!("{s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if let Some(&bad) = pixels.iter().find(|&&p| p >= n * hw) {
            return shape_err("gather_pixels", format!("pixel {bad} out of {}", n * hw));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(pixels.len() * c);
        for &p in pixels {
            let (i, q) = (p / hw, p % hw);
            for ch in 0..c {
                out.push(xd[(i * c + ch) * hw + q]);
            }
        }
        let t = Tensor::new([pixels.len(), c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            t,
            Op::GatherPixels {
                x,
                pixels: pixels.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Sinusoidal timestep embedding `[N, dim]`; constant (not differentiable).
    pub fn embed_time(&mut self, ts: &[f64], dim: usize) -> Result<Var> {
        let t = sinusoidal_embedding(ts, dim)?;
        Ok(self.constant(t))
    }

    /// Backward sweep from the scalar `loss`, producing gradients for every
    /// differentiable node. The graph itself is not consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0)
    }

    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if loss.graph != self.id {
            return Err(Error::NotInGraph);
        }
        if self.value(loss).len() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let top = loss.idx as usize;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=top).map(|_| None).collect();
        if self.nodes[top].requires_grad {
            grads[top] = Some(vec![seed]);
        }
        for i in (0..=top).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(g) => {
                    let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?
                        .check_finite("gradient")?;
                    Some(t)
                }
                None => None,
            });
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    /// `d loss / d wrt`, shaped like `wrt`. Zero when `wrt` is differentiable
    /// but does not influence `loss`.
    pub fn gradient(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        if wrt.graph != self.id || loss.graph != self.id || !self.requires_grad(wrt) {
            return Err(Error::NotInGraph);
        }
        if wrt.idx > loss.idx {
            return Ok(Tensor::zeros(self.shape(wrt).to_vec()));
        }
        let grads = self.backward(loss)?;
        Ok(grads
            .get(wrt)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(wrt).to_vec())))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx as usize].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let slot = |v: Var| v.idx as usize;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    accumulate_with(&mut grads[slot(*a)], m * k, |da| {
                        gemm(m, n, k, g, (n, 1), bd, (1, n), 1.0, da, (k, 1));
                    });
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    accumulate_with(&mut grads[slot(*b)], k * n, |db| {
                        gemm(k, m, n, ad, (1, k), g, (n, 1), 1.0, db, (n, 1));
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let spatial: usize = sx[2..].iter().product();
                let cpg = c / groups;
                let m = (cpg * spatial) as f64;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for s in 0..n {
                    for gr in 0..*groups {
                        let k = s * groups + gr;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let start = (s * c + gr * cpg) * spatial;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for cc in 0..cpg {
                            let ch = gr * cpg + cc;
                            let off = start + cc * spatial;
                            for p in 0..spatial {
                                let xh = (xd[off + p] - mu) * rs;
                                let go = g[off + p];
                                dgamma[ch] += go * xh;
                                dbeta[ch] += go;
                                let dxh = go * gd[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        for cc in 0..cpg {
                            let ch = gr * cpg + cc;
                            let off = start + cc * spatial;
                            for p in 0..spatial {
                                let xh = (xd[off + p] - mu) * rs;
                                let dxh = g[off + p] * gd[ch];
                                dx[off + p] = rs / m * (m * dxh - sum_dxh - xh * sum_dxh_xh);
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[slot(*x)], dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[slot(*gamma)], dgamma);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[slot(*beta)], dbeta);
                }
            }
            Op::Act(x, a) => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let d = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(go, (&xv, &yv))| go * a.derivative(xv, yv))
                    .collect();
                accumulate(&mut grads[slot(*x)], d);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(*a) {
                    accumulate(&mut grads[slot(*a)], g.to_vec());
                }
                if self.wants(*b) {
                    let d = if self.value(*b).rank() == 0 && self.value(*a).rank() != 0 {
                        vec![sign * g.iter().sum::<f64>()]
                    } else {
                        g.iter().map(|v| sign * v).collect()
                    };
                    accumulate(&mut grads[slot(*b)], d);
                }
            }
            Op::Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let scalar_b = tb.rank() == 0 && ta.rank() != 0;
                if self.wants(*a) {
                    let d = if scalar_b {
                        let s = tb.item();
                        g.iter().map(|v| v * s).collect()
                    } else {
                        g.iter().zip(tb.data()).map(|(v, y)| v * y).collect()
                    };
                    accumulate(&mut grads[slot(*a)], d);
                }
                if self.wants(*b) {
                    let dot: Vec<f64> = g.iter().zip(ta.data()).map(|(v, x)| v * x).collect();
                    let d = if scalar_b {
                        vec![dot.iter().sum()]
                    } else {
                        dot
                    };
                    accumulate(&mut grads[slot(*b)], d);
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[slot(*x)], g.iter().map(|v| v * c).collect());
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[slot(*x)], g.to_vec());
                }
                if self.wants(*b) {
                    let sx = self.shape(*x);
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (k, v) in g.iter().enumerate() {
                        db[(k / inner) % c] += v;
                    }
                    accumulate(&mut grads[slot(*b)], db);
                }
            }
            Op::AddChannel(x, v) => {
                if self.wants(*x) {
                    accumulate(&mut grads[slot(*x)], g.to_vec());
                }
                if self.wants(*v) {
                    let sx = self.shape(*x);
                    let inner: usize = sx[2..].iter().product();
                    let dv = g.chunks(inner).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads[slot(*v)], dv);
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (n, total_c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut c_off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for i in 0..n {
                            let src = (i * total_c + c_off) * inner;
                            d.extend_from_slice(&g[src..src + c * inner]);
                        }
                        accumulate(&mut grads[slot(p)], d);
                    }
                    c_off += c;
                }
            }
            Op::Upsample(x) => {
                let sx = self.shape(*x);
                let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let so = node.value.shape();
                let (oh, ow) = (so[2], so[3]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut dx = vec![0.0; nc * h * w];
                for plane in 0..nc {
                    let go = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let v = go[i * ow + j];
                            dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += v * wy * (1.0 - wx);
                            dst[y1 * w + x1] += v * wy * wx;
                        }
                    }
                }
                accumulate(&mut grads[slot(*x)], dx);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let m = labels.len() as f64;
                let scale = g[0] / m;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                accumulate(&mut grads[slot(*logits)], d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[slot(*x)], vec![g[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[slot(*x)], vec![g[0]; n]);
            }
            Op::GatherPixels { x, pixels } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let len = self.value(*x).len();
                accumulate_with(&mut grads[slot(*x)], len, |dx| {
                    for (r, &p) in pixels.iter().enumerate() {
                        let (i, q) = (p / hw, p % hw);
                        for ch in 0..c {
                            dx[(i * c + ch) * hw + q] += g[r * c + ch];
                        }
                    }
                });
            }
            Op::Reshape(x) => accumulate(&mut grads[slot(*x)], g.to_vec()),
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sw = self.shape(w);
        let co = sw[0];
        let n = self.shape(x)[0];
        let p = geom.cols_len();
        let krows = geom.cols_rows();
        let xin = geom.c_in * geom.h * geom.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);

        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![0.0; co];
                for (k, row) in g.chunks(p).enumerate() {
                    db[k % co] += row.iter().sum::<f64>();
                }
                accumulate(&mut grads[b.idx as usize], db);
            }
        }
        if !want_x && !want_w {
            return;
        }
        // Per-sample partial weight gradients, reduced afterwards in sample order.
        type Partials = (Option<Vec<f64>>, Option<Vec<f64>>);
        let per_sample: Vec<Partials> = par::map_range(n, |i| {
            let gi = &g[i * co * p..(i + 1) * co * p];
            let xi = &xd[i * xin..(i + 1) * xin];
            let cols_owned;
            let cols: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                let mut c = vec![0.0; krows * p];
                im2col(xi, geom, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let dw = want_w.then(|| {
                let mut dw = vec![0.0; co * krows];
                gemm(
                    co,
                    p,
                    krows,
                    gi,
                    (p, 1),
                    cols,
                    (1, p),
                    0.0,
                    &mut dw,
                    (krows, 1),
                );
                dw
            });
            let dx = want_x.then(|| {
                let mut dcols = vec![0.0; krows * p];
                gemm(
                    krows,
                    co,
                    p,
                    wd,
                    (1, krows),
                    gi,
                    (p, 1),
                    0.0,
                    &mut dcols,
                    (p, 1),
                );
                if geom.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; xin];
                    col2im(&dcols, geom, &mut dx);
                    dx
                }
            });
            (dw, dx)
        });
        if want_w {
            let mut dw = vec![0.0; co * krows];
            for (d, _) in &per_sample {
                if let Some(d) = d {
                    dw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
            }
            accumulate(&mut grads[w.idx as usize], dw);
        }
        if want_x {
            let mut dx = Vec::with_capacity(n * xin);
            for (_, d) in per_sample {
                dx.extend(d.expect("dx computed when wanted"));
            }
            accumulate(&mut grads[x.idx as usize], dx);
        }
    }
}

/// Sinusoidal embedding: the first half holds `sin(t·f_i)`, the second half
/// `cos(t·f_i)`, with `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(ts: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        out.extend(freqs.iter().map(|f| (t * f).sin()));
        out.extend(freqs.iter().map(|f| (t * f).cos()));
    }
    Tensor::new([ts.len(), dim], out)
}
