use super::graph::{cosine_parts, gelu_grad, Graph, Op, Var, BCE_CLAMP, COSINE_EPS};
use super::kernels::{self, ConvGeom};
use super::tensor::{Tensor, TensorError};

/// Gradients of a scalar with respect to the leaves of a recording.
///
/// Every leaf that requires a gradient has an entry; leaves with no path to
/// the loss hold zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Take ownership of the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

type Slots = Vec<Option<Vec<f32>>>;

fn slot<'a>(g: &Graph, slots: &'a mut Slots, v: Var) -> Option<&'a mut [f32]> {
    let node = &g.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(slots[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn add_into(g: &Graph, slots: &mut Slots, v: Var, src: &[f32]) {
    if let Some(dst) = slot(g, slots, v) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Accumulate `src` (shaped like the broadcast output) into a suffix-broadcast operand.
fn add_reduced(g: &Graph, slots: &mut Slots, v: Var, src: &[f32], sign: f32) {
    if let Some(dst) = slot(g, slots, v) {
        let inner = dst.len();
        for (i, s) in src.iter().enumerate() {
            dst[i % inner] += sign * s;
        }
    }
}

impl Graph {
    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut slots = self.backprop(loss, 0);
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                    return None;
                }
                let data = slots[i].take().unwrap_or_else(|| vec![0.0; n.value.len()]);
                Some(Tensor::from_parts(n.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient of scalar `root` with respect to the intermediate `wrt`.
    ///
    /// Only nodes recorded after `wrt` are visited, so this is cheap when
    /// `wrt` sits near the end of the recording.
    pub fn grad_of(&self, root: Var, wrt: Var) -> Result<Tensor, TensorError> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(root).to_vec()));
        }
        let shape = self.shape(wrt).to_vec();
        if !self.nodes[wrt.0].requires_grad {
            return Ok(Tensor::zeros(&shape));
        }
        let mut slots = self.backprop(root, wrt.0);
        let data = slots[wrt.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.value(wrt).len()]);
        Ok(Tensor::from_parts(shape, data))
    }

    fn backprop(&self, root: Var, floor: usize) -> Slots {
        let mut slots: Slots = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return slots;
        }
        slots[root.0] = Some(vec![1.0]);
        for i in (floor..=root.0).rev() {
            let Some(gout) = slots[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.adjoint(&node.op, &node.value, &gout, &mut slots);
            slots[i] = Some(gout);
        }
        slots
    }

    fn adjoint(&self, op: &Op, out: &Tensor, g: &[f32], slots: &mut Slots) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_into(self, slots, *a, g);
                add_reduced(self, slots, *b, g, 1.0);
            }
            Op::Sub { a, b } => {
                add_into(self, slots, *a, g);
                add_reduced(self, slots, *b, g, -1.0);
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let inner = xb.len();
                if self.requires_grad(*a) {
                    let ga: Vec<f32> = g.iter().enumerate().map(|(i, &v)| v * xb[i % inner]).collect();
                    add_into(self, slots, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f32> = g.iter().zip(xa).map(|(&v, &x)| v * x).collect();
                    add_reduced(self, slots, *b, &gb, 1.0);
                }
            }
            Op::Scale { a, c } => {
                if let Some(dst) = slot(self, slots, *a) {
                    for (d, &v) in dst.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => add_into(self, slots, *a, g),
            Op::MatMul { a, b, batched } => self.matmul_adjoint(*a, *b, *batched, g, slots),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = kernels::permute(out.shape(), &inv, g);
                add_into(self, slots, *a, &back);
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                if let Some(dst) = slot(self, slots, *a) {
                    for ((d, &v), &xi) in dst.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                if let Some(dst) = slot(self, slots, *a) {
                    for ((d, &v), &xi) in dst.iter_mut().zip(g).zip(x) {
                        *d += v * gelu_grad(xi);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(dst) = slot(self, slots, *a) {
                    for ((d, &v), &y) in dst.iter_mut().zip(g).zip(out.data()) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *out.shape().last().unwrap();
                if let Some(dst) = slot(self, slots, *a) {
                    for ((dr, gr), yr) in dst.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dd, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (i, &v) in g.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                        db[i % d] += v;
                    }
                    add_into(self, slots, *gamma, &dg);
                    add_into(self, slots, *beta, &db);
                }
                if let Some(dst) = slot(self, slots, *x) {
                    let mut dxh = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxh[j] = g[base + j] * gam[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[base + j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for j in 0..d {
                            dst[base + j] += rs * (dxh[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let s = out.shape();
                let (b, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, &v) in g.iter().enumerate() {
                    let ch = (i / spatial) % c;
                    dg[ch] += v * xhat[i];
                    db[ch] += v;
                }
                add_into(self, slots, *gamma, &dg);
                add_into(self, slots, *beta, &db);
                if let Some(dst) = slot(self, slots, *x) {
                    let m = (b * spatial) as f32;
                    for ch in 0..c {
                        let k = gam[ch] * invstd[ch];
                        for bi in 0..b {
                            let base = (bi * c + ch) * spatial;
                            for i in base..base + spatial {
                                dst[i] += if *train {
                                    k / m * (m * g[i] - db[ch] - xhat[i] * dg[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => self.conv_adjoint(*x, *w, *bias, geom, g, slots),
            Op::MeanAxis { a, axis } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(dst) = slot(self, slots, *a) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                dst[(o * n + j) * inner + i] += g[o * inner + i] / n as f32;
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(dst) = slot(self, slots, *a) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(dst) = slot(self, slots, *a) {
                    let n = dst.len() as f32;
                    dst.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::L2NormRows { a } => {
                let x = self.value(*a).data();
                let d = x.len() / out.len();
                if let Some(dst) = slot(self, slots, *a) {
                    for (r, (&n, &gv)) in out.data().iter().zip(g).enumerate() {
                        if n > 0.0 {
                            for j in r * d..(r + 1) * d {
                                dst[j] += gv * x[j] / n;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { a, norms } => {
                let y = out.data();
                let d = y.len() / norms.len();
                if let Some(dst) = slot(self, slots, *a) {
                    for (r, &n) in norms.iter().enumerate() {
                        let rg = r * d..(r + 1) * d;
                        let dot: f32 = y[rg.clone()].iter().zip(&g[rg.clone()]).map(|(a, b)| a * b).sum();
                        for j in rg {
                            dst[j] += (g[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::SqDistRows { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let d = xa.len() / out.len();
                let da: Vec<f32> = (0..xa.len()).map(|i| 2.0 * (xa[i] - xb[i]) * g[i / d]).collect();
                add_into(self, slots, *a, &da);
                add_reduced(self, slots, *b, &da, -1.0);
            }
            Op::CosineRows { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let d = xa.len() / out.len();
                let mut da = vec![0.0; xa.len()];
                let mut db = vec![0.0; xa.len()];
                for (r, &gv) in g.iter().enumerate() {
                    let rg = r * d..(r + 1) * d;
                    let (ar, br) = (&xa[rg.clone()], &xb[rg.clone()]);
                    let (dot, na, nb) = cosine_parts(ar, br);
                    let den = na * nb + COSINE_EPS as f64;
                    let gv = gv as f64;
                    for j in 0..d {
                        let (aj, bj) = (ar[j] as f64, br[j] as f64);
                        let ta = if na > 0.0 { dot * nb * aj / (na * den * den) } else { 0.0 };
                        let tb = if nb > 0.0 { dot * na * bj / (nb * den * den) } else { 0.0 };
                        da[r * d + j] = (gv * (bj / den - ta)) as f32;
                        db[r * d + j] = (gv * (aj / den - tb)) as f32;
                    }
                }
                add_into(self, slots, *a, &da);
                add_into(self, slots, *b, &db);
            }
            Op::Bce { s, y } => {
                let (sd, yd) = (self.value(*s).data(), self.value(*y).data());
                let n = sd.len() as f64;
                let gv = g[0] as f64;
                if self.requires_grad(*s) {
                    let ds: Vec<f32> = sd
                        .iter()
                        .zip(yd)
                        .map(|(&p, &t)| {
                            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            if pc != p {
                                return 0.0;
                            }
                            let (p, t) = (p as f64, t as f64);
                            (gv * (-(t / p) + (1.0 - t) / (1.0 - p)) / n) as f32
                        })
                        .collect();
                    add_into(self, slots, *s, &ds);
                }
                if self.requires_grad(*y) {
                    let dy: Vec<f32> = sd
                        .iter()
                        .map(|&p| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
                            (-gv * (p.ln() - (1.0 - p).ln()) / n) as f32
                        })
                        .collect();
                    add_into(self, slots, *y, &dy);
                }
            }
            Op::Resize { a } => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                if let Some(dst) = slot(self, slots, *a) {
                    for p in 0..planes {
                        let d = &mut dst[p * h * w..(p + 1) * h * w];
                        for (oy, ty) in ty.iter().enumerate() {
                            for (ox, tx) in tx.iter().enumerate() {
                                let v = g[p * oh * ow + oy * ow + ox];
                                let (wy0, wy1) = (1.0 - ty.frac, ty.frac);
                                let (wx0, wx1) = (1.0 - tx.frac, tx.frac);
                                d[ty.lo * w + tx.lo] += v * wy0 * wx0;
                                d[ty.lo * w + tx.hi] += v * wy0 * wx1;
                                d[ty.hi * w + tx.lo] += v * wy1 * wx0;
                                d[ty.hi * w + tx.hi] += v * wy1 * wx1;
                            }
                        }
                    }
                }
            }
            Op::IndexSelect { a, idx } => {
                let inner = out.len() / idx.len();
                if let Some(dst) = slot(self, slots, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            dst[i * inner + j] += g[k * inner + j];
                        }
                    }
                }
            }
            Op::Concat0 { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(self, slots, p, &g[off..off + n]);
                    off += n;
                }
            }
        }
    }

    fn matmul_adjoint(&self, a: Var, b: Var, batched: bool, g: &[f32], slots: &mut Slots) {
        let (ta, tb) = (self.value(a), self.value(b));
        let sb = tb.shape();
        let k = *ta.shape().last().unwrap();
        let n = sb[sb.len() - 1];
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        if !batched {
            let rows = ta.len() / k;
            if need_a {
                let mut ga = vec![0.0; ta.len()];
                kernels::gemm_nt(rows, n, k, g, tb.data(), &mut ga);
                add_into(self, slots, a, &ga);
            }
            if need_b {
                let mut gb = vec![0.0; tb.len()];
                kernels::gemm_tn(rows, k, n, ta.data(), g, &mut gb);
                add_into(self, slots, b, &gb);
            }
            return;
        }
        let m = ta.shape()[ta.ndim() - 2];
        let batch = ta.len() / (m * k);
        if need_a {
            let mut ga = vec![0.0; ta.len()];
            for bi in 0..batch {
                kernels::gemm_nt(
                    m,
                    n,
                    k,
                    &g[bi * m * n..(bi + 1) * m * n],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                );
            }
            add_into(self, slots, a, &ga);
        }
        if need_b {
            let mut gb = vec![0.0; tb.len()];
            for bi in 0..batch {
                kernels::gemm_tn(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                );
            }
            add_into(self, slots, b, &gb);
        }
    }

    fn conv_adjoint(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        g: &[f32],
        slots: &mut Slots,
    ) {
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let sample = geom.cin * geom.h * geom.w;
        let b = xd.len() / sample;
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        let cout = wd.len() / rows;
        if let Some(bv) = bias {
            if let Some(dst) = slot(self, slots, bv) {
                for (i, &v) in g.iter().enumerate() {
                    dst[(i / plane) % cout] += v;
                }
            }
        }
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; rows * plane];
        let mut gw = if need_w { vec![0.0; wd.len()] } else { Vec::new() };
        let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dcols = if need_x { vec![0.0; rows * plane] } else { Vec::new() };
        for bi in 0..b {
            let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
            if need_w {
                kernels::im2col(geom, &xd[bi * sample..(bi + 1) * sample], &mut cols);
                kernels::gemm_nt(cout, plane, rows, gb, &cols, &mut gw);
            }
            if need_x {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                kernels::gemm_tn(cout, rows, plane, wd, gb, &mut dcols);
                kernels::col2im(geom, &dcols, &mut gx[bi * sample..(bi + 1) * sample]);
            }
        }
        if need_w {
            add_into(self, slots, w, &gw);
        }
        if need_x {
            add_into(self, slots, x, &gx);
        }
    }
}
