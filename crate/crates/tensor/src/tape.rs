use crate::error::{Result, TensorError};
use crate::linalg::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    gen: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Silu(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward evaluation for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and appends a node. Nodes are appended
/// in evaluation order, so the node list is already topologically sorted.
/// [`Tape::reset`] starts a new forward pass and invalidates earlier
/// [`Var`]s; using one afterwards is a [`TensorError::StaleGraph`].
#[derive(Debug, Default)]
pub struct Tape {
    gen: u32,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all recorded nodes and start a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.gen = self.gen.wrapping_add(1);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.gen != self.gen || v.idx >= self.nodes.len() {
            return Err(TensorError::StaleGraph);
        }
        Ok(&self.nodes[v.idx].value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { idx: self.nodes.len() - 1, gen: self.gen }
    }

    fn shape_err(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::Shape { node: self.nodes.len(), op, detail }
    }

    /// Record a leaf value. Non-finite entries are rejected.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite(&format!("input to node {}", self.nodes.len()))?;
        Ok(self.push(value, Op::Leaf))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.check(x)?;
        let wv = self.check(w)?;
        if xv.shape().len() != 4 || wv.shape().len() != 4 {
            return Err(self.shape_err(
                "conv2d",
                format!("expected 4-d input and kernel, got {:?} and {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, ci, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (co, kci, k, k2) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        if kci != ci || k != k2 || h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(
                self.shape_err("conv2d", format!("input {:?} incompatible with kernel {:?}", xv.shape(), wv.shape()))
            );
        }
        if let Some(b) = b {
            let bv = self.check(b)?;
            if bv.shape() != [co] {
                return Err(self.shape_err("conv2d", format!("bias shape {:?}", bv.shape())));
            }
        }
        let geom = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let hw = geom.ho * geom.wo;
        let kk = ci * k * k;
        let mut out = vec![0.0; n * co * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };
        let xd = xv.data();
        let wdata = wv.data();
        for i in 0..n {
            let xi = &xd[i * ci * h * wd..(i + 1) * ci * h * wd];
            let yi = &mut out[i * co * hw..(i + 1) * co * hw];
            let src = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols[..]
            };
            gemm(co, kk, hw, wdata, false, src, false, yi, false);
        }
        if let Some(b) = b {
            let bd = self.check(b)?.data().to_vec();
            for i in 0..n {
                for (c, bias) in bd.iter().enumerate() {
                    let s = (i * co + c) * hw;
                    out[s..s + hw].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(vec![n, co, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.shape().len() != 4 {
            return Err(self.shape_err("upsample2x", format!("{:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let mut out = vec![0.0; n * c * 4 * h * w];
        let xd = xv.data();
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = self.check(x)?;
        let gv = self.check(gamma)?;
        let bv = self.check(beta)?;
        if xv.shape().len() < 2 {
            return Err(self.shape_err("group_norm", format!("{:?}", xv.shape())));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        if groups == 0 || c % groups != 0 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(self.shape_err(
                "group_norm",
                format!("input {:?}, {} groups, affine {:?}", xv.shape(), groups, gv.shape()),
            ));
        }
        let spatial = xv.len() / (n * c);
        let per = (c / groups) * spatial;
        let xd = xv.data();
        let (gd, bd) = (gv.data(), bv.data());
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let s = (i * c + g * (c / groups)) * spatial;
                let seg = &xd[s..s + per];
                let mean = seg.iter().sum::<f64>() / per as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..per {
                    let ch = g * (c / groups) + j / spatial;
                    out[s + j] = (seg[j] - mean) * rstd * gd[ch] + bd[ch];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.check(x)?.map(f);
        Ok(self.push(value, op))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `log(sigmoid(x))`, always `<= 0`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| -softplus(-v), Op::LogSigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    /// Broadcast-add `v: [N, C]` over the spatial axes of `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let vv = self.check(v)?;
        if xv.shape().len() != 4 || vv.shape() != [xv.dim(0), xv.dim(1)] {
            return Err(self.shape_err("add_channel", format!("{:?} vs {:?}", xv.shape(), vv.shape())));
        }
        let hw = xv.dim(2) * xv.dim(3);
        let mut data = xv.data().to_vec();
        for (p, &b) in vv.data().iter().enumerate() {
            data[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += b);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddChannel(x, v)))
    }

    /// Concatenate along the channel axis (skip connections).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        let value = Tensor::concat_channels(av, bv)
            .map_err(|_| self.shape_err("concat", format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.shape().len() != 4 {
            return Err(self.shape_err("global_avg_pool", format!("{:?}", xv.shape())));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.dim(2) * xv.dim(3);
        let data = xv.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Dense layer `y = x W^T + b` with `x: [N, I]`, `W: [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.check(x)?;
        let wv = self.check(w)?;
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.dim(1) != wv.dim(1) {
            return Err(self.shape_err("linear", format!("{:?} vs {:?}", xv.shape(), wv.shape())));
        }
        let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.check(b)?;
            if bv.shape() != [o] {
                return Err(self.shape_err("linear", format!("bias shape {:?}", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv.data()).for_each(|(y, b)| *y += b);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let s = xv.sum() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape() != bv.shape() {
            return Err(self.shape_err("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let s = av.data().iter().zip(bv.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    /// Propagate `seed` (default: ones) from `out` back to every recorded node.
    pub fn backward(&self, out: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let ov = self.check(out)?;
        let seed = match seed {
            Some(s) if s.shape() != ov.shape() => {
                return Err(TensorError::Shape {
                    node: out.idx,
                    op: "backward",
                    detail: format!("seed {:?} vs output {:?}", s.shape(), ov.shape()),
                })
            }
            Some(s) => s,
            None => Tensor::full(ov.shape().to_vec(), 1.0),
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.idx] = Some(seed);
        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            gen: self.gen,
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(id) => Some((id, i)),
                    _ => None,
                })
                .collect(),
        })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let gm = *geom;
                let hw = gm.ho * gm.wo;
                let kk = gm.ci * gm.k * gm.k;
                let xd = self.val(*x).data();
                let wd = self.val(*w).data();
                let mut dw = vec![0.0; gm.co * kk];
                let mut dx = vec![0.0; gm.n * gm.ci * gm.h * gm.w];
                let mut cols = vec![0.0; kk * hw];
                let per_x = gm.ci * gm.h * gm.w;
                for n in 0..gm.n {
                    let gy = &gd[n * gm.co * hw..(n + 1) * gm.co * hw];
                    let xi = &xd[n * per_x..(n + 1) * per_x];
                    if gm.is_pointwise() {
                        gemm(gm.co, hw, kk, gy, false, xi, true, &mut dw, true);
                        gemm(kk, gm.co, hw, wd, true, gy, false, &mut dx[n * per_x..(n + 1) * per_x], false);
                    } else {
                        im2col(xi, &gm, &mut cols);
                        gemm(gm.co, hw, kk, gy, false, &cols, true, &mut dw, true);
                        gemm(kk, gm.co, hw, wd, true, gy, false, &mut cols, false);
                        col2im(&cols, &gm, &mut dx[n * per_x..(n + 1) * per_x]);
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; gm.co];
                    for (p, plane) in gd.chunks(hw).enumerate() {
                        db[p % gm.co] += plane.iter().sum::<f64>();
                    }
                    add_into(&mut grads[b.idx], Tensor::new(vec![gm.co], db).unwrap());
                }
                add_into(&mut grads[w.idx], Tensor::new(self.val(*w).shape().to_vec(), dw).unwrap());
                add_into(&mut grads[x.idx], Tensor::new(self.val(*x).shape().to_vec(), dx).unwrap());
            }
            Op::Upsample2x(x) => {
                let xs = self.val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let mut dx = vec![0.0; xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                add_into(&mut grads[x.idx], Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.val(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let spatial = xv.len() / (n * c);
                let cpg = c / groups;
                let per = cpg * spatial;
                let xd = xv.data();
                let gam = self.val(*gamma).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for gi in 0..*groups {
                        let s = (i * c + gi * cpg) * spatial;
                        let m = mean[i * groups + gi];
                        let r = rstd[i * groups + gi];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..per {
                            let ch = gi * cpg + j / spatial;
                            let xhat = (xd[s + j] - m) * r;
                            dgamma[ch] += gd[s + j] * xhat;
                            dbeta[ch] += gd[s + j];
                            let dxh = gd[s + j] * gam[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xhat;
                        }
                        let md = sum_d / per as f64;
                        let mdx = sum_dx / per as f64;
                        for j in 0..per {
                            let ch = gi * cpg + j / spatial;
                            let xhat = (xd[s + j] - m) * r;
                            let dxh = gd[s + j] * gam[ch];
                            dx[s + j] = r * (dxh - md - xhat * mdx);
                        }
                    }
                }
                add_into(&mut grads[x.idx], Tensor::new(xv.shape().to_vec(), dx).unwrap());
                add_into(&mut grads[gamma.idx], Tensor::new(vec![c], dgamma).unwrap());
                add_into(&mut grads[beta.idx], Tensor::new(vec![c], dbeta).unwrap());
            }
            Op::Silu(x) => {
                let xv = self.val(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gg)| {
                    let s = sigmoid(v);
                    gg * s * (1.0 + v * (1.0 - s))
                });
                let t = Tensor::new(xv.shape().to_vec(), d.collect()).unwrap();
                add_into(&mut grads[x.idx], t);
            }
            Op::Softplus(x) => {
                let xv = self.val(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gg)| gg * sigmoid(v));
                let t = Tensor::new(xv.shape().to_vec(), d.collect()).unwrap();
                add_into(&mut grads[x.idx], t);
            }
            Op::LogSigmoid(x) => {
                let xv = self.val(*x);
                let d = xv.data().iter().zip(gd).map(|(&v, &gg)| gg * sigmoid(-v));
                let t = Tensor::new(xv.shape().to_vec(), d.collect()).unwrap();
                add_into(&mut grads[x.idx], t);
            }
            Op::Scale(x, s) => add_into(&mut grads[x.idx], g.map(|v| v * s)),
            Op::Add(a, b) => {
                add_into(&mut grads[a.idx], g.clone());
                add_into(&mut grads[b.idx], g.clone());
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.idx], g.clone());
                add_into(&mut grads[b.idx], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let da = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.idx], Tensor::new(av.shape().to_vec(), da).unwrap());
                add_into(&mut grads[b.idx], Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::AddChannel(x, v) => {
                let vs = self.val(*v).shape().to_vec();
                let hw = g.len() / (vs[0] * vs[1]);
                let dv = gd.chunks(hw).map(|p| p.iter().sum::<f64>()).collect();
                add_into(&mut grads[x.idx], g.clone());
                add_into(&mut grads[v.idx], Tensor::new(vs, dv).unwrap());
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let n = av.dim(0);
                let (pa, pb) = (av.len() / n, bv.len() / n);
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in gd.chunks(pa + pb) {
                    da.extend_from_slice(&row[..pa]);
                    db.extend_from_slice(&row[pa..]);
                }
                add_into(&mut grads[a.idx], Tensor::new(av.shape().to_vec(), da).unwrap());
                add_into(&mut grads[b.idx], Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.val(*x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &gg in gd {
                    dx.extend(std::iter::repeat_n(gg / hw as f64, hw));
                }
                add_into(&mut grads[x.idx], Tensor::new(xs, dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                let mut dx = vec![0.0; n * i];
                let mut dw = vec![0.0; o * i];
                gemm(n, o, i, gd, false, wv.data(), false, &mut dx, false);
                gemm(o, n, i, gd, true, xv.data(), false, &mut dw, false);
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    add_into(&mut grads[b.idx], Tensor::new(vec![o], db).unwrap());
                }
                add_into(&mut grads[x.idx], Tensor::new(vec![n, i], dx).unwrap());
                add_into(&mut grads[w.idx], Tensor::new(vec![o, i], dw).unwrap());
            }
            Op::Sum(x) => {
                let xs = self.val(*x).shape().to_vec();
                add_into(&mut grads[x.idx], Tensor::full(xs, gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                let v = gd[0] / xv.len() as f64;
                add_into(&mut grads[x.idx], Tensor::full(xv.shape().to_vec(), v));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = 2.0 * gd[0] / av.len() as f64;
                let da: Vec<f64> = av.data().iter().zip(bv.data()).map(|(p, q)| k * (p - q)).collect();
                let db = da.iter().map(|v| -v).collect();
                add_into(&mut grads[a.idx], Tensor::new(av.shape().to_vec(), da).unwrap());
                add_into(&mut grads[b.idx], Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
        }
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    gen: u32,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value (e.g. an input leaf).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.gen != self.gen {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`, zero where unused.
    /// Parameters read more than once accumulate.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id.index()].axpy(1.0, g);
            }
        }
        out
    }
}
