//! Define-by-run recording of primitive applications.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and the adjoint pass walks it back to front.

use super::kernels::{self, ConvGeom};
use super::tensor::{shape_err, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with the batch statistics.
    Train { eps: f32 },
    /// Normalize with fixed running statistics.
    Eval {
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    },
}

pub(crate) enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var, batched: bool },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, invstd: Vec<f32>, train: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    MeanAxis { a: Var, axis: usize },
    Sum { a: Var },
    Mean { a: Var },
    L2NormRows { a: Var },
    NormalizeRows { a: Var, norms: Vec<f32> },
    SqDistRows { a: Var, b: Var },
    CosineRows { a: Var, b: Var },
    Bce { s: Var, y: Var },
    Resize { a: Var },
    IndexSelect { a: Var, idx: Vec<usize> },
    Concat0 { parts: Vec<Var> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2NormRows { .. } => "l2_norm",
            Op::NormalizeRows { .. } => "normalize",
            Op::SqDistRows { .. } => "sq_dist",
            Op::CosineRows { .. } => "cosine",
            Op::Bce { .. } => "bce",
            Op::Resize { .. } => "resize",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat0 { .. } => "concat",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Probability clamp applied by [`Graph::bce`].
pub const BCE_CLAMP: f32 = 1e-7;
/// Denominator guard of [`Graph::cosine_rows`].
pub const COSINE_EPS: f32 = 1e-8;
/// Floor applied to row norms before dividing by them.
pub const NORM_FLOOR: f32 = 1e-12;

/// One recording. Confined to the thread that builds it.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    check_finite: bool,
    clamp_events: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Empty recording with the non-finite check enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
            clamp_events: 0,
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped by [`Graph::bce`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Copy of `v` cut off from the recording.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn suffix_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(self.value(b).len())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, TensorError> {
        let inner = self.suffix_broadcast(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % inner]))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// `a - b` with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar { a }, &[a])
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a shared `[K,N]` matrix applied to every row of `a`
    /// (`a` may carry any number of leading axes), or a `[B,K,N]` stack
    /// matched against `a: [B,M,K]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let (out, batched) = if sb.len() == 2 {
            let rows = ta.len() / k;
            let mut out = vec![0.0; rows * n];
            kernels::gemm(rows, k, n, ta, tb, &mut out);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (Tensor::from_parts(shape, out), false)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ta[bi * m * k..(bi + 1) * m * k],
                    &tb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (Tensor::from_parts(shape, out), true)
        };
        self.push(out, Op::MatMul { a, b, batched }, &[a, b])
    }

    /// Reorder axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(shape_err("permute", format!("{perm:?} for {shape:?}")));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(shape_err("permute", format!("repeated axis in {perm:?}")));
            }
        }
        let data = kernels::permute(&shape, perm, self.value(a).data());
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::from_parts(out_shape, data);
        self.push(out, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape { a }, &[a])
    }

    /// Collapse everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let lead = s.first().copied().unwrap_or(1);
        let rest = self.value(a).len() / lead;
        self.reshape(a, &[lead, rest])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu { a }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", "gamma/beta must be [last_dim]"));
        }
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                xhat[r * d + j] = ((row[j] as f64 - mean) * rs) as f32;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-channel batch normalization of `[B,C,H,W]` (or `[B,C]`).
    ///
    /// In training mode the returned statistics are the batch mean and the
    /// unbiased batch variance, for updating running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BnMode,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>), TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("{s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", "gamma/beta must be [C]"));
        }
        let m = b * spatial;
        let xd = t.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; c];
        let mut stats = None;
        let train = matches!(mode, BnMode::Train { .. });
        match mode {
            BnMode::Train { eps } => {
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for bi in 0..b {
                        let base = (bi * c + ch) * spatial;
                        sum += xd[base..base + spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0f64;
                    for bi in 0..b {
                        let base = (bi * c + ch) * spatial;
                        sq += xd[base..base + spatial]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / m as f64;
                    let is = 1.0 / (var + *eps as f64).sqrt();
                    invstd[ch] = is as f32;
                    means[ch] = mean as f32;
                    vars[ch] = if m > 1 {
                        (sq / (m - 1) as f64) as f32
                    } else {
                        var as f32
                    };
                    for bi in 0..b {
                        let base = (bi * c + ch) * spatial;
                        for i in base..base + spatial {
                            xhat[i] = ((xd[i] as f64 - mean) * is) as f32;
                        }
                    }
                }
                stats = Some((means, vars));
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running stats must be [C]"));
                }
                for ch in 0..c {
                    invstd[ch] = 1.0 / (var[ch] + eps).sqrt();
                    for bi in 0..b {
                        let base = (bi * c + ch) * spatial;
                        for i in base..base + spatial {
                            xhat[i] = (xd[i] - mean[ch]) * invstd[ch];
                        }
                    }
                }
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                v * g[ch] + be[ch]
            })
            .collect();
        let out = Tensor::from_parts(s.to_vec(), data);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Cross-correlation of `x: [B,Cin,H,W]` (or `[Cin,H,W]`) with
    /// `w: [Cout,Cin,kH,kW]`, plus an optional per-channel bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let unbatched = sx.len() == 3;
        let (b, cin, h, wd) = match sx.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(shape_err("conv2d", format!("input {sx:?}"))),
        };
        let [cout, kcin, kh, kw] = sw.as_slice() else {
            return Err(shape_err("conv2d", format!("kernel {sw:?}")));
        };
        let (cout, kh, kw) = (*cout, *kh, *kw);
        if *kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(shape_err("conv2d", "bias must be [Cout]"));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let mut out = vec![0.0; b * cout * plane];
        let mut cols = vec![0.0; geom.col_rows() * plane];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for bi in 0..b {
            kernels::im2col(&geom, &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &mut cols);
            kernels::gemm(
                cout,
                geom.col_rows(),
                plane,
                wdata,
                &cols,
                &mut out[bi * cout * plane..(bi + 1) * cout * plane],
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[(i / plane) % cout];
            }
        }
        let shape = if unbatched {
            vec![cout, oh, ow]
        } else {
            vec![b, cout, oh, ow]
        };
        let out = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(out, Op::Conv2d { x, w, bias, geom }, &inputs)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for j in 0..n {
                    acc += d[(o * n + j) * inner + i] as f64;
                }
                out[o * inner + i] = (acc / n as f64) as f32;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        self.push(out, Op::MeanAxis { a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sum();
        self.push(Tensor::scalar(v), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let v = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(v as f32), Op::Mean { a }, &[a])
    }

    fn rows_of(&self, op: &'static str, a: Var) -> Result<(usize, usize, Vec<usize>), TensorError> {
        let s = self.shape(a);
        let d = *s.last().ok_or_else(|| shape_err(op, "scalar input"))?;
        Ok((self.value(a).len() / d, d, s[..s.len() - 1].to_vec()))
    }

    /// Euclidean norm of each row (last axis).
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, d, shape) = self.rows_of("l2_norm", a)?;
        let x = self.value(a).data();
        let out = (0..rows)
            .map(|r| {
                x[r * d..(r + 1) * d]
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt() as f32
            })
            .collect();
        let out = Tensor::from_parts(shape, out);
        self.push(out, Op::L2NormRows { a }, &[a])
    }

    /// Scale each row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, d, _) = self.rows_of("normalize", a)?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let n = (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32)
                .max(NORM_FLOOR);
            norms.push(n);
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(out, Op::NormalizeRows { a, norms }, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Squared Euclidean distance between matching rows.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sq_dist", a, b)?;
        let (rows, d, shape) = self.rows_of("sq_dist", a)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| {
                (r * d..(r + 1) * d)
                    .map(|i| ((x[i] - y[i]) as f64).powi(2))
                    .sum::<f64>() as f32
            })
            .collect();
        let out = Tensor::from_parts(shape, out);
        self.push(out, Op::SqDistRows { a, b }, &[a, b])
    }

    /// Cosine similarity of matching rows, `a.b / (|a||b| + 1e-8)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("cosine", a, b)?;
        let (rows, d, shape) = self.rows_of("cosine", a)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| {
                let (xr, yr) = (&x[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                let (dot, na, nb) = cosine_parts(xr, yr);
                (dot / (na * nb + COSINE_EPS as f64)) as f32
            })
            .collect();
        let out = Tensor::from_parts(shape, out);
        self.push(out, Op::CosineRows { a, b }, &[a, b])
    }

    /// Mean binary cross-entropy of probabilities `s` against labels `y`.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; clamped entries pass
    /// no gradient and are counted in [`Graph::clamp_events`].
    pub fn bce(&mut self, s: Var, y: Var) -> Result<Var, TensorError> {
        self.same_shape("bce", s, y)?;
        let (sd, yd) = (self.value(s).data(), self.value(y).data());
        let mut clamped = 0;
        let mut acc = 0.0f64;
        for (&p, &t) in sd.iter().zip(yd) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if pc != p {
                clamped += 1;
            }
            let (pc, t) = (pc as f64, t as f64);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        if clamped > 0 {
            log::debug!("bce: clamped {clamped} probabilities");
        }
        let v = (acc / sd.len() as f64) as f32;
        self.clamp_events += clamped;
        self.push(Tensor::scalar(v), Op::Bce { s, y }, &[s, y])
    }

    /// Bilinear resize of `[B,C,h,w]` to `[B,C,oh,ow]` with half-pixel
    /// centres and edge clamping.
    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(shape_err("resize", format!("{s:?}")));
        };
        let (planes, h, w) = (b * c, *h, *w);
        if oh == 0 || ow == 0 {
            return Err(shape_err("resize", "zero output size"));
        }
        let ty = kernels::bilinear_taps(h, oh);
        let tx = kernels::bilinear_taps(w, ow);
        let x = self.value(a).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (oy, ty) in ty.iter().enumerate() {
                for (ox, tx) in tx.iter().enumerate() {
                    let top = src[ty.lo * w + tx.lo] * (1.0 - tx.frac) + src[ty.lo * w + tx.hi] * tx.frac;
                    let bot = src[ty.hi * w + tx.lo] * (1.0 - tx.frac) + src[ty.hi * w + tx.hi] * tx.frac;
                    out[p * oh * ow + oy * ow + ox] = top * (1.0 - ty.frac) + bot * ty.frac;
                }
            }
        }
        let out = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        self.push(out, Op::Resize { a }, &[a])
    }

    /// Gather rows of the leading axis; indices may repeat.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let lead = *s.first().ok_or_else(|| shape_err("index_select", "scalar input"))?;
        if idx.is_empty() {
            return Err(shape_err("index_select", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= lead) {
            return Err(shape_err("index_select", format!("index {bad} >= {lead}")));
        }
        let inner = self.value(a).len() / lead;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let out = Tensor::from_parts(shape, out);
        self.push(
            out,
            Op::IndexSelect {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(shape_err("concat", format!("{s:?} vs [_, {tail:?}]")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::from_parts(shape, out);
        self.push(
            out,
            Op::Concat0 {
                parts: parts.to_vec(),
            },
            parts,
        )
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6;
const GELU_K: f32 = 0.044_715;

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn cosine_parts(x: &[f32], y: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        dot += a as f64 * b as f64;
        na += (a as f64).powi(2);
        nb += (b as f64).powi(2);
    }
    (dot, na.sqrt(), nb.sqrt())
}
