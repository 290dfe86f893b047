//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Nodes only carry
//! gradients when one of their inputs does, so frozen networks and constant
//! inputs cost nothing in the backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvTransposeGeom};
use crate::tensor::{gemm_ex, Layout, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeom,
    },
    ReflectPad(Var, usize),
    InstanceNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2(Var, Vec<usize>),
    SpectralScale {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    DctPool(Var, Tensor),
    ChannelScale(Var, Var),
    ChannelAffine(Var, Vec<f64>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gather {
        x: Var,
        sample: usize,
        indices: Vec<usize>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    MatMulNT(Var, Var),
    NceDiag {
        logits: Var,
        tau: f64,
        probs: Vec<f64>,
    },
    Gram(Var),
    CatBatch(Vec<Var>),
    SliceBatch(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Reverse-mode gradients, indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.g(v)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let g = self.g(a);
        self.push(t, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let g = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Div(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Sum of scalars (or equal-shape tensors), skipping none.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Shape("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has the same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let g = self.g(a);
        self.push(t, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let g = self.g(a);
        self.push(t, Op::Mean(a), g)
    }

    /// Frobenius norm `sqrt(Σ x²)` as a scalar.
    pub fn frob_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Convolution with zero padding; `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (bs, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("conv2d: bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom::conv(c, h, wd, k, stride, pad).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d: {h}x{wd} input too small for kernel {k} (pad {pad})"
            ))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            bs,
            &geom,
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[bs, o, geom.out_h, geom.out_w], out)?;
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, g))
    }

    /// Transposed convolution; `w: [I, O, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (bs, c, h, wd) = self.value(x).dims4()?;
        let (ci, o, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return shape_err(format!(
                "conv_transpose2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let geom = ConvTransposeGeom::new(c, o, h, wd, k, stride, pad, output_pad)
            .ok_or_else(|| Error::Shape("conv_transpose2d: negative output size".into()))?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            bs,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[bs, o, geom.out_h, geom.out_w], out)?;
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, g))
    }

    pub fn reflect_pad(&mut self, x: Var, p: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if p >= h || p >= w {
            return shape_err(format!("reflect_pad: pad {p} too large for {h}x{w}"));
        }
        let out = kernels::reflect_pad(self.value(x).data(), b * c, h, w, p);
        let t = Tensor::new(&[b, c, h + 2 * p, w + 2 * p], out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::ReflectPad(x, p), g))
    }

    /// Per-(sample, channel) normalization over the spatial plane, with optional affine.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return shape_err(format!(
                    "instance_norm: affine {:?} for {c} channels",
                    self.shape(p)
                ));
            }
        }
        let n = h * w;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; b * c * n];
        let mut inv_std = vec![0.0; b * c];
        for (p, (plane, xh)) in src.chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, &v) in xh.iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gm = gamma.map(|v| self.value(v).data().to_vec());
            let bt = beta.map(|v| self.value(v).data().to_vec());
            for (p, plane) in out.chunks_mut(n).enumerate() {
                let ch = p % c;
                let s = gm.as_ref().map_or(1.0, |g| g[ch]);
                let t = bt.as_ref().map_or(0.0, |b| b[ch]);
                plane.iter_mut().for_each(|v| *v = s * *v + t);
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let g = self.g(x) || gamma.is_some_and(|v| self.g(v)) || beta.is_some_and(|v| self.g(v));
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return shape_err(format!("max_pool2: {h}x{w} too small"));
        }
        let (out, arg) = kernels::max_pool2(self.value(x).data(), b * c, h, w);
        let t = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::MaxPool2(x, arg), g))
    }

    /// `W / σ` with `σ = uᵀ W v`, where `W` is viewed as `[rows, rest]` and `u`, `v`
    /// are held constant.
    pub fn spectral_scale(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let rows = shape[0];
        let cols = self.value(w).len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return shape_err(format!(
                "spectral_scale: u {} / v {} for weight {:?}",
                u.len(),
                v.len(),
                shape
            ));
        }
        let wd = self.value(w).data();
        let sigma = bilinear(u, wd, v);
        if !(sigma.is_finite() && sigma.abs() > 0.0) {
            return Err(Error::Numeric(format!(
                "spectral_scale: degenerate sigma {sigma}"
            )));
        }
        let t = self.value(w).map(|x| x / sigma);
        let g = self.g(w);
        Ok(self.push(
            t,
            Op::SpectralScale {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            g,
        ))
    }

    /// Project each channel plane onto its fixed basis: `[B, C, H, W] -> [B, C]`.
    pub fn dct_pool(&mut self, x: Var, basis: &Tensor) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if basis.shape() != [c, h, w] {
            return shape_err(format!(
                "dct_pool: basis {:?} for input {:?}",
                basis.shape(),
                self.shape(x)
            ));
        }
        let n = h * w;
        let src = self.value(x).data();
        let bd = basis.data();
        let out: Vec<f64> = (0..b * c)
            .map(|p| {
                let ch = p % c;
                src[p * n..(p + 1) * n]
                    .iter()
                    .zip(&bd[ch * n..(ch + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let t = Tensor::new(&[b, c], out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::DctPool(x, basis.clone()), g))
    }

    /// Multiply every plane of `x: [B, C, H, W]` by `s: [B, C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(s) != [b, c] {
            return shape_err(format!(
                "channel_scale: scale {:?} for input {:?}",
                self.shape(s),
                self.shape(x)
            ));
        }
        let n = h * w;
        let sd = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sd[p]);
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let g = self.g(x) || self.g(s);
        Ok(self.push(t, Op::ChannelScale(x, s), g))
    }

    /// Constant per-channel affine map `x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return shape_err(format!("channel_affine: {} channels expected", c));
        }
        let n = h * w;
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_mut(n).enumerate() {
            let ch = p % c;
            plane
                .iter_mut()
                .for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        let t = Tensor::new(self.shape(x), out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::ChannelAffine(x, scale.to_vec()), g))
    }

    /// `x Wᵀ + b` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if win != din {
            return shape_err(format!(
                "linear: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let mut out = vec![0.0; n * dout];
        gemm_ex(
            n,
            din,
            dout,
            self.value(x).data(),
            Layout::N,
            self.value(w).data(),
            Layout::T,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return shape_err(format!("linear: bias {:?}", self.shape(b)));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
            }
        }
        let t = Tensor::new(&[n, dout], out)?;
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(t, Op::Linear { x, w, b }, g))
    }

    /// Gather the feature vectors of one sample at flat spatial `indices`: `[S, C]`.
    pub fn gather_positions(&mut self, x: Var, sample: usize, indices: &[usize]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = h * w;
        if sample >= b || indices.iter().any(|&i| i >= n) {
            return shape_err(format!(
                "gather_positions: index out of range for {:?}",
                self.shape(x)
            ));
        }
        let src = self.value(x).data();
        let base = sample * c * n;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            for ch in 0..c {
                out.push(src[base + ch * n + i]);
            }
        }
        let t = Tensor::new(&[indices.len(), c], out)?;
        let g = self.g(x);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                sample,
                indices: indices.to_vec(),
            },
            g,
        ))
    }

    /// Rows divided by `‖row‖₂ + 1e-7`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let norms: Vec<f64> = src
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = src.to_vec();
        for (row, &nm) in out.chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nm.max(NORM_EPS));
        }
        let t = Tensor::new(&[n, d], out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::L2NormalizeRows(x, norms), g))
    }

    /// `a bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!(
                "matmul_nt: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_ex(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::T,
            &mut out,
            0.0,
        );
        let t = Tensor::new(&[m, n], out)?;
        let g = self.g(a) || self.g(b);
        Ok(self.push(t, Op::MatMulNT(a, b), g))
    }

    /// Mean over rows of `-log softmax(row / τ)[i]` for square `[S, S]` logits,
    /// i.e. InfoNCE with the diagonal as the positive.
    pub fn nce_diag(&mut self, logits: Var, tau: f64) -> Result<Var> {
        let (s, s2) = self.value(logits).dims2()?;
        if s != s2 || s == 0 {
            return shape_err(format!("nce_diag: logits {:?}", self.shape(logits)));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; s * s];
        let mut total = 0.0;
        for i in 0..s {
            let row = &src[i * s..(i + 1) * s];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v / tau - mx).exp();
                probs[i * s + j] = e;
                z += e;
            }
            probs[i * s..(i + 1) * s].iter_mut().for_each(|p| *p /= z);
            // -log p_ii = logsumexp - l_ii
            total += mx + z.ln() - row[i] / tau;
        }
        let t = Tensor::scalar(total / s as f64);
        let g = self.g(logits);
        Ok(self.push(t, Op::NceDiag { logits, tau, probs }, g))
    }

    /// Per-sample Gram matrices `F Fᵀ / (C H W)`: `[B, C, H, W] -> [B, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = h * w;
        let norm = 1.0 / (c * n) as f64;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * c];
        for s in 0..b {
            let f = &src[s * c * n..(s + 1) * c * n];
            gemm_ex(
                c,
                n,
                c,
                f,
                Layout::N,
                f,
                Layout::T,
                &mut out[s * c * c..(s + 1) * c * c],
                0.0,
            );
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let t = Tensor::new(&[b, c, c], out)?;
        let g = self.g(x);
        Ok(self.push(t, Op::Gram(x), g))
    }

    pub fn cat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::cat_batch(&ts)?;
        let g = parts.iter().any(|&v| self.g(v));
        Ok(self.push(t, Op::CatBatch(parts.to_vec()), g))
    }

    /// Samples `start..start + len` along the leading dimension.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start + len > shape[0] {
            return shape_err(format!("slice_batch: {start}+{len} of {:?}", shape));
        }
        let per = self.value(x).len() / shape[0];
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut s = shape;
        s[0] = len;
        let t = Tensor::new(&s, data)?;
        let g = self.g(x);
        Ok(self.push(t, Op::SliceBatch(x, start), g))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.grad {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Grads(grads))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.g(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.g(v) {
            let t = f();
            self.acc(grads, v, t);
        }
    }

    fn backprop(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || gout.clone());
                self.acc_with(grads, *b, || gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || gout.clone());
                self.acc_with(grads, *b, || gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if a == b {
                    self.acc_with(grads, *a, || gout.zip_map(av, |g, x| 2.0 * g * x));
                } else {
                    self.acc_with(grads, *a, || gout.zip_map(bv, |g, y| g * y));
                    self.acc_with(grads, *b, || gout.zip_map(av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || gout.zip_map(bv, |g, y| g / y));
                self.acc_with(grads, *b, || {
                    let q = av.zip_map(bv, |x, y| -x / (y * y));
                    gout.zip_map(&q, |g, q| g * q)
                });
            }
            Op::Scale(a, c) => self.acc_with(grads, *a, || gout.map(|v| v * c)),
            Op::AddScalar(a) => self.acc_with(grads, *a, || gout.clone()),
            Op::Relu(a) => self.acc_with(grads, *a, || {
                gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })
            }),
            Op::LeakyRelu(a, s) => self.acc_with(grads, *a, || {
                gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { s * g })
            }),
            Op::Tanh(a) => self.acc_with(grads, *a, || {
                gout.zip_map(&node.value, |g, y| g * (1.0 - y * y))
            }),
            Op::Sigmoid(a) => self.acc_with(grads, *a, || {
                gout.zip_map(&node.value, |g, y| g * y * (1.0 - y))
            }),
            Op::Softplus(a) => self.acc_with(grads, *a, || {
                gout.zip_map(self.value(*a), |g, x| g * sigmoid(x))
            }),
            Op::Abs(a) => self.acc_with(grads, *a, || {
                gout.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
            }),
            Op::Sqrt(a) => self.acc_with(grads, *a, || {
                gout.zip_map(&node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })
            }),
            Op::Sum(a) => {
                let g = gd[0];
                self.acc_with(grads, *a, || Tensor::full(self.shape(*a), g));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g = gd[0] / n;
                self.acc_with(grads, *a, || Tensor::full(self.shape(*a), g));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (bs, _, _, _) = self.value(*x).dims4()?;
                let o = self.shape(*w)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    bs,
                    geom,
                    self.value(*w).data(),
                    o,
                    gd,
                    self.g(*x),
                    self.g(*w),
                    b.is_some_and(|b| self.g(b)),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (bs, _, _, _) = self.value(*x).dims4()?;
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    bs,
                    geom,
                    self.value(*w).data(),
                    gd,
                    self.g(*x),
                    self.g(*w),
                    b.is_some_and(|b| self.g(b)),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::ReflectPad(x, p) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::reflect_pad_backward(gd, b * c, h, w, *p);
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let gm = gamma.map(|v| self.value(v).data().to_vec());
                if gamma.is_some_and(|v| self.g(v)) {
                    let mut dg = vec![0.0; c];
                    for (p, (gp, xp)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        dg[p % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                    self.acc(grads, gamma.unwrap(), Tensor::new(&[c], dg)?);
                }
                if beta.is_some_and(|v| self.g(v)) {
                    let mut db = vec![0.0; c];
                    for (p, gp) in gd.chunks(n).enumerate() {
                        db[p % c] += gp.iter().sum::<f64>();
                    }
                    self.acc(grads, beta.unwrap(), Tensor::new(&[c], db)?);
                }
                if self.g(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let nf = n as f64;
                    for (p, ((dxp, gp), xp)) in dx
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let s = gm.as_ref().map_or(1.0, |g| g[p % c]);
                        let sum_g: f64 = gp.iter().sum::<f64>() * s;
                        let sum_gx: f64 = gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>() * s;
                        let is = inv_std[p];
                        for ((d, &g), &xh) in dxp.iter_mut().zip(gp).zip(xp) {
                            *d = is / nf * (nf * g * s - sum_g - xh * sum_gx);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &g) in arg.iter().zip(gd) {
                    dx[i] += g;
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::SpectralScale { w, u, v, sigma } => {
                let wd = self.value(*w).data();
                let inner: f64 = gd.iter().zip(wd).map(|(a, b)| a * b).sum();
                let cols = v.len();
                let coef = inner / (sigma * sigma);
                let mut dw: Vec<f64> = gd.iter().map(|g| g / sigma).collect();
                for (r, &ur) in u.iter().enumerate() {
                    for (c, &vc) in v.iter().enumerate() {
                        dw[r * cols + c] -= coef * ur * vc;
                    }
                }
                self.acc(grads, *w, Tensor::new(self.shape(*w), dw)?);
            }
            Op::DctPool(x, basis) => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let bd = basis.data();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, plane) in dx.chunks_mut(n).enumerate() {
                    let ch = p % c;
                    let g = gd[p];
                    plane
                        .iter_mut()
                        .zip(&bd[ch * n..(ch + 1) * n])
                        .for_each(|(d, b)| *d = g * b);
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::ChannelScale(x, s) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let xd = self.value(*x).data();
                let sd = self.value(*s).data();
                if self.g(*x) {
                    let mut dx = gd.to_vec();
                    for (p, plane) in dx.chunks_mut(n).enumerate() {
                        plane.iter_mut().for_each(|v| *v *= sd[p]);
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.g(*s) {
                    let ds: Vec<f64> = gd
                        .chunks(n)
                        .zip(xd.chunks(n))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::new(self.shape(*s), ds)?);
                }
            }
            Op::ChannelAffine(x, scale) => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let mut dx = gd.to_vec();
                for (p, plane) in dx.chunks_mut(n).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= scale[p % c]);
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2()?;
                let dout = self.shape(*w)[0];
                if self.g(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm_ex(
                        n,
                        dout,
                        din,
                        gd,
                        Layout::N,
                        self.value(*w).data(),
                        Layout::N,
                        &mut dx,
                        0.0,
                    );
                    self.acc(grads, *x, Tensor::new(&[n, din], dx)?);
                }
                if self.g(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm_ex(
                        dout,
                        n,
                        din,
                        gd,
                        Layout::T,
                        self.value(*x).data(),
                        Layout::N,
                        &mut dw,
                        0.0,
                    );
                    self.acc(grads, *w, Tensor::new(&[dout, din], dw)?);
                }
                if let Some(b) = b.filter(|b| self.g(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.acc(grads, b, Tensor::new(&[dout], db)?);
                }
            }
            Op::Gather { x, sample, indices } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let base = sample * c * n;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (s, &i) in indices.iter().enumerate() {
                    for ch in 0..c {
                        dx[base + ch * n + i] += gd[s * c + ch];
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::L2NormalizeRows(x, norms) => {
                let (_, d) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                for (r, ((dxr, xr), gr)) in dx
                    .chunks_mut(d)
                    .zip(xd.chunks(d))
                    .zip(gd.chunks(d))
                    .enumerate()
                {
                    let nm = norms[r];
                    let den = nm.max(NORM_EPS);
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    // below the floor the divisor is constant
                    let k = if nm >= NORM_EPS {
                        xg / (nm * nm * nm)
                    } else {
                        0.0
                    };
                    for ((o, &xv), &g) in dxr.iter_mut().zip(xr).zip(gr) {
                        *o = g / den - xv * k;
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.shape(*b)[0];
                if self.g(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_ex(
                        m,
                        n,
                        k,
                        gd,
                        Layout::N,
                        self.value(*b).data(),
                        Layout::N,
                        &mut da,
                        0.0,
                    );
                    self.acc(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.g(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_ex(
                        n,
                        m,
                        k,
                        gd,
                        Layout::T,
                        self.value(*a).data(),
                        Layout::N,
                        &mut db,
                        0.0,
                    );
                    self.acc(grads, *b, Tensor::new(&[n, k], db)?);
                }
            }
            Op::NceDiag { logits, tau, probs } => {
                let s = self.shape(*logits)[0];
                let g = gd[0] / (s as f64 * tau);
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g).collect();
                for i in 0..s {
                    dl[i * s + i] -= g;
                }
                self.acc(grads, *logits, Tensor::new(&[s, s], dl)?);
            }
            Op::Gram(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let norm = 1.0 / (c * n) as f64;
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                for s in 0..b {
                    let gs = &gd[s * c * c..(s + 1) * c * c];
                    let mut sym = vec![0.0; c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * norm;
                        }
                    }
                    gemm_ex(
                        c,
                        c,
                        n,
                        &sym,
                        Layout::N,
                        &xd[s * c * n..(s + 1) * c * n],
                        Layout::N,
                        &mut dx[s * c * n..(s + 1) * c * n],
                        0.0,
                    );
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::CatBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.g(p) {
                        self.acc(
                            grads,
                            p,
                            Tensor::new(self.shape(p), gd[off..off + len].to_vec())?,
                        );
                    }
                    off += len;
                }
            }
            Op::SliceBatch(x, start) => {
                let shape = self.shape(*x);
                let per = self.value(*x).len() / shape[0];
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * per..start * per + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, Tensor::new(shape, dx)?);
            }
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `uᵀ W v` for row-major `W: [u.len(), v.len()]`.
pub fn bilinear(u: &[f64], w: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            ur * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum()
}
