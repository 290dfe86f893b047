//! Building blocks: spectral-normalized convolution, the SN residual block,
//! instance normalization and frequency channel attention.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{bilinear, Graph, Var};
use crate::params::{normal_init, Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight-init standard deviation shared by the generator and discriminator.
pub const INIT_STD: f64 = 0.02;

const UNIT_EPS: f64 = 1e-12;
const SN_TAG: u8 = 1;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(UNIT_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Power-iteration state for one weight matrix viewed as `[rows, cols]`.
///
/// `v` is the matching right vector; keeping it makes the estimate
/// `σ = uᵀ W v` reproducible after a reload.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub n_power_iterations: usize,
}

impl SpectralNormState {
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u = normal_init(&[rows], 1.0, rng).into_data();
        let mut v = normal_init(&[cols], 1.0, rng).into_data();
        normalize(&mut u);
        normalize(&mut v);
        Self {
            u,
            v,
            n_power_iterations: 1,
        }
    }
}

/// One power-iteration round on row-major `w: [rows, cols]`, in place.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64]) {
    // v <- normalize(Wᵀ u)
    v.iter_mut().for_each(|x| *x = 0.0);
    for r in 0..rows {
        let ur = u[r];
        for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += wv * ur;
        }
    }
    normalize(v);
    // u <- normalize(W v)
    for r in 0..rows {
        u[r] = w[r * cols..(r + 1) * cols]
            .iter()
            .zip(v.iter())
            .map(|(a, b)| a * b)
            .sum();
    }
    normalize(u);
}

#[derive(Clone, Debug)]
pub struct SpectralNormalized {
    pub weight: Tensor,
    pub sigma: f64,
    pub state: SpectralNormState,
}

/// `W / σ̂` where `σ̂` is the power-iteration estimate of the top singular value
/// after `state.n_power_iterations` further rounds. Weights of rank > 2 are
/// flattened to `[shape[0], rest]`.
pub fn spectral_normalize(w: &Tensor, state: &SpectralNormState) -> Result<SpectralNormalized> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("spectral_normalize: scalar weight".into()))?;
    let cols = w.len() / rows.max(1);
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::Shape(format!(
            "spectral_normalize: state ({}, {}) for weight {:?}",
            state.u.len(),
            state.v.len(),
            w.shape()
        )));
    }
    if !w.all_finite() {
        return Err(Error::Numeric(
            "spectral_normalize: non-finite weight".into(),
        ));
    }
    if w.max_abs() == 0.0 {
        return Err(Error::Numeric(
            "spectral_normalize: zero matrix has no spectral norm".into(),
        ));
    }
    let mut next = state.clone();
    for _ in 0..state.n_power_iterations {
        power_iteration(w.data(), rows, cols, &mut next.u, &mut next.v);
    }
    let sigma = bilinear(&next.u, w.data(), &next.v);
    Ok(SpectralNormalized {
        weight: w.map(|x| x / sigma),
        sigma,
        state: next,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(&[out_channels, in_channels, kernel, kernel], std, rng),
            true,
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            padding,
        }
    }

    pub fn forward_with_weight(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        w: Var,
    ) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let bias = self.bias.map(|id| b.var(g, id));
        match self.padding {
            Padding::Zero => g.conv2d(x, w, bias, self.stride, self.pad),
            Padding::Reflect if self.pad > 0 => {
                let p = g.reflect_pad(x, self.pad)?;
                g.conv2d(p, w, bias, self.stride, 0)
            }
            Padding::Reflect => g.conv2d(x, w, bias, self.stride, 0),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        self.forward_with_weight(g, b, x, w)
    }
}

/// A convolution whose weight is divided by its estimated spectral norm.
#[derive(Clone, Debug)]
pub struct SnConv {
    pub conv: Conv,
    pub u: ParamId,
    pub v: ParamId,
    pub enabled: bool,
}

impl SnConv {
    /// Wrap `conv`, seeding the power-iteration vectors and running `warmup` rounds.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        conv: Conv,
        enabled: bool,
        warmup: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = conv.out_channels;
        let cols = conv.in_channels * conv.kernel * conv.kernel;
        let mut st = SpectralNormState::random(rows, cols, rng);
        let w = store.get(conv.weight).data().to_vec();
        for _ in 0..warmup {
            power_iteration(&w, rows, cols, &mut st.u, &mut st.v);
        }
        let u = store.add(
            format!("{name}.sn_u"),
            Tensor::new(&[rows], st.u).unwrap(),
            false,
        );
        let v = store.add(
            format!("{name}.sn_v"),
            Tensor::new(&[cols], st.v).unwrap(),
            false,
        );
        Self {
            conv,
            u,
            v,
            enabled,
        }
    }

    pub fn state(&self, store: &ParamStore) -> SpectralNormState {
        SpectralNormState {
            u: store.get(self.u).data().to_vec(),
            v: store.get(self.v).data().to_vec(),
            n_power_iterations: 1,
        }
    }

    /// Advance the stored vectors by `n` rounds against the current weight.
    pub fn power_iterate(&self, store: &mut ParamStore, n: usize) {
        if !self.enabled {
            return;
        }
        let rows = self.conv.out_channels;
        let w = store.get(self.conv.weight).data().to_vec();
        let cols = w.len() / rows;
        let mut u = store.get(self.u).data().to_vec();
        let mut v = store.get(self.v).data().to_vec();
        for _ in 0..n {
            power_iteration(&w, rows, cols, &mut u, &mut v);
        }
        store.get_mut(self.u).data_mut().copy_from_slice(&u);
        store.get_mut(self.v).data_mut().copy_from_slice(&v);
    }

    /// Current estimate `uᵀ W v`.
    pub fn sigma(&self, store: &ParamStore) -> f64 {
        bilinear(
            store.get(self.u).data(),
            store.get(self.conv.weight).data(),
            store.get(self.v).data(),
        )
    }

    /// The normalized weight as it enters the convolution.
    pub fn weight_var(&self, g: &mut Graph, b: &mut Binder) -> Result<Var> {
        let id = self.conv.weight;
        if !self.enabled {
            return Ok(b.var(g, id));
        }
        let (u, v) = (self.u, self.v);
        b.cached(id, SN_TAG, |b| {
            let w = b.var(g, id);
            // an all-zero kernel stays zero instead of dividing by a zero norm
            if g.value(w).max_abs() == 0.0 {
                return Ok(w);
            }
            let store = b.store();
            g.spectral_scale(w, store.get(u).data(), store.get(v).data())
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let w = self.weight_var(g, b)?;
        self.conv.forward_with_weight(g, b, x, w)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub affine: Option<(ParamId, ParamId)>,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
                store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            )
        });
        Self { affine, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let (gm, bt) = match self.affine {
            Some((gm, bt)) => (Some(b.var(g, gm)), Some(b.var(g, bt))),
            None => (None, None),
        };
        g.instance_norm(x, gm, bt, self.eps)
    }
}

/// Instance normalization on plain tensors, with optional per-channel affine.
pub fn instance_norm(x: &Tensor, eps: f64, affine: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h * w < 2 {
        return Err(Error::Shape(
            "instance_norm needs at least 2 spatial positions".into(),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (gm, bt) = match affine {
        Some((a, b)) => (Some(g.constant(a.clone())), Some(g.constant(b.clone()))),
        None => (None, None),
    };
    let y = g.instance_norm(xv, gm, bt, eps)?;
    Ok(g.value(y).clone())
}

/// `x + f(x)` with `f = SNConv → IN → ReLU → SNConv → IN`, 3×3 kernels and reflection padding.
#[derive(Clone, Debug)]
pub struct SnResBlock {
    pub channels: usize,
    pub conv1: SnConv,
    pub norm1: InstanceNorm,
    pub conv2: SnConv,
    pub norm2: InstanceNorm,
}

impl SnResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut mk = |store: &mut ParamStore, n: &str| {
            let c = Conv::new(
                store,
                &format!("{name}.{n}"),
                channels,
                channels,
                3,
                1,
                1,
                Padding::Reflect,
                false,
                INIT_STD,
                rng,
            );
            SnConv::new(
                store,
                &format!("{name}.{n}"),
                c,
                spectral_norm,
                SN_WARMUP,
                rng,
            )
        };
        let conv1 = mk(store, "conv1");
        let conv2 = mk(store, "conv2");
        Self {
            channels,
            conv1,
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), channels, true),
            conv2,
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), channels, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::Shape(format!(
                "residual block has {} channels, input has {c}",
                self.channels
            )));
        }
        let h = self.conv1.forward(g, b, x)?;
        let h = self.norm1.forward(g, b, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h)?;
        let h = self.norm2.forward(g, b, h)?;
        g.add(x, h)
    }

    pub fn sn_convs(&self) -> [&SnConv; 2] {
        [&self.conv1, &self.conv2]
    }
}

/// Power-iteration rounds run when an SN layer is created.
pub const SN_WARMUP: usize = 15;

/// FCA layout: channel groups, one 2-D DCT frequency each, and the MLP reduction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcaConfig {
    pub channel_groups: usize,
    pub dct_frequencies: Vec<(usize, usize)>,
    pub reduction_ratio: usize,
}

impl FcaConfig {
    /// The `groups` lowest frequencies in zigzag order, reduction 16.
    pub fn lowest(groups: usize) -> Self {
        Self {
            channel_groups: groups,
            dct_frequencies: zigzag(groups),
            reduction_ratio: 16,
        }
    }

    /// Every group on the DC basis.
    pub fn dc_only(groups: usize, reduction_ratio: usize) -> Self {
        Self {
            channel_groups: groups,
            dct_frequencies: vec![(0, 0); groups],
            reduction_ratio,
        }
    }
}

/// First `n` `(row, col)` frequency pairs in JPEG zigzag order.
pub fn zigzag(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n);
    let mut s = 0;
    while out.len() < n {
        let diag: Vec<(usize, usize)> = (0..=s).map(|i| (i, s - i)).collect();
        // odd diagonals run top-right to bottom-left
        if s % 2 == 1 {
            out.extend(diag.iter().take(n - out.len()));
        } else {
            out.extend(diag.iter().rev().take(n - out.len()));
        }
        s += 1;
    }
    out
}

/// Orthonormal DCT-II basis value for frequency `freq` at position `pos` of `n`.
pub fn dct_basis(freq: usize, pos: usize, n: usize) -> f64 {
    let c = (PI * freq as f64 * (pos as f64 + 0.5) / n as f64).cos() / (n as f64).sqrt();
    if freq == 0 {
        c
    } else {
        c * 2f64.sqrt()
    }
}

/// Per-channel 2-D DCT filters `[C, H, W]` for `cfg`.
pub fn dct_filters(channels: usize, h: usize, w: usize, cfg: &FcaConfig) -> Result<Tensor> {
    if cfg.channel_groups == 0 || !channels.is_multiple_of(cfg.channel_groups) {
        return Err(Error::Shape(format!(
            "{channels} channels not divisible into {} groups",
            cfg.channel_groups
        )));
    }
    if cfg.dct_frequencies.len() != cfg.channel_groups {
        return Err(Error::Shape(format!(
            "{} frequencies for {} groups",
            cfg.dct_frequencies.len(),
            cfg.channel_groups
        )));
    }
    if let Some(&(u, v)) = cfg.dct_frequencies.iter().find(|&&(u, v)| u >= h || v >= w) {
        return Err(Error::Shape(format!(
            "frequency ({u}, {v}) outside a {h}x{w} plane"
        )));
    }
    let per = channels / cfg.channel_groups;
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        let (fu, fv) = cfg.dct_frequencies[c / per];
        for y in 0..h {
            let by = dct_basis(fu, y, h);
            for x in 0..w {
                data[(c * h + y) * w + x] = by * dct_basis(fv, x, w);
            }
        }
    }
    Tensor::new(&[channels, h, w], data)
}

/// Frequency channel attention: DCT pooling, a bottleneck MLP and sigmoid channel gates.
#[derive(Clone, Debug)]
pub struct Fca {
    pub cfg: FcaConfig,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: Tensor,
    pub fc1: ParamId,
    pub fc2: ParamId,
}

impl Fca {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        cfg: FcaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let filters = dct_filters(channels, height, width, &cfg)?;
        let hidden = (channels / cfg.reduction_ratio.max(1)).max(1);
        let u1 = 1.0 / (channels as f64).sqrt();
        let u2 = 1.0 / (hidden as f64).sqrt();
        let fc1 = store.add(
            format!("{name}.fc1"),
            Tensor::from_fn(&[hidden, channels], |_| rng.random_range(-u1..u1)),
            true,
        );
        let fc2 = store.add(
            format!("{name}.fc2"),
            Tensor::from_fn(&[channels, hidden], |_| rng.random_range(-u2..u2)),
            true,
        );
        Ok(Self {
            cfg,
            channels,
            height,
            width,
            filters,
            fc1,
            fc2,
        })
    }

    /// Returns the reweighted features and the `[B, C]` channel gates.
    pub fn forward_with_gates(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::Shape(format!(
                "FCA built for [{}, {}, {}], got [{c}, {h}, {w}]",
                self.channels, self.height, self.width
            )));
        }
        let pooled = g.dct_pool(x, &self.filters)?;
        let (w1, w2) = (b.var(g, self.fc1), b.var(g, self.fc2));
        let hdn = g.linear(pooled, w1, None)?;
        let hdn = g.relu(hdn);
        let logits = g.linear(hdn, w2, None)?;
        let gates = g.sigmoid(logits);
        Ok((g.channel_scale(x, gates)?, gates))
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        Ok(self.forward_with_gates(g, b, x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn identity_has_unit_spectral_norm() {
        let w = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let mut rng = stream(1, Stream::Init);
        let st = SpectralNormState::random(3, 3, &mut rng);
        let out = spectral_normalize(&w, &st).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-12);
        for (a, b) in out.weight.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let nu: f64 = out.state.u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((nu - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_converges_to_largest_entry() {
        let w = Tensor::new(&[2, 2], vec![2., 0., 0., 1.]).unwrap();
        let mut rng = stream(2, Stream::Init);
        let mut st = SpectralNormState::random(2, 2, &mut rng);
        st.n_power_iterations = 60;
        let out = spectral_normalize(&w, &st).unwrap();
        assert!((out.sigma - 2.0).abs() < 1e-9);
        let d = out.weight.data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[3] - 0.5).abs() < 1e-9);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_an_error() {
        let w = Tensor::zeros(&[2, 3]);
        let mut rng = stream(3, Stream::Init);
        let st = SpectralNormState::random(2, 3, &mut rng);
        assert!(matches!(
            spectral_normalize(&w, &st),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zigzag_order_matches_jpeg() {
        assert_eq!(
            zigzag(10),
            vec![
                (0, 0),
                (0, 1),
                (1, 0),
                (2, 0),
                (1, 1),
                (0, 2),
                (0, 3),
                (1, 2),
                (2, 1),
                (3, 0)
            ]
        );
        let z = zigzag(16);
        assert_eq!(z.len(), 16);
        assert!(z.iter().all(|&(u, v)| u < 6 && v < 6));
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let n = 7;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n)
                    .map(|p| dct_basis(a, p, n) * dct_basis(b, p, n))
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fca_rejects_frequencies_outside_plane() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, Stream::Init);
        let r = Fca::new(&mut store, "fca", 32, 4, 4, FcaConfig::lowest(16), &mut rng);
        assert!(r.is_err());
        let r = Fca::new(
            &mut store,
            "fca2",
            30,
            8,
            8,
            FcaConfig::lowest(16),
            &mut rng,
        );
        assert!(r.is_err());
    }
}
