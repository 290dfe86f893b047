//! Entropy-ranked anchor selection for the patch-wise contrastive loss, and the
//! per-layer projection heads that embed the gathered patches.

use rand::Rng;

use crate::config::AnchorSource;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_batch::FeatureTap;
use crate::par;
use crate::params::{normal_init, Binder, ParamId, ParamStore};
use crate::tensor::{gemm_ex, Layout, Tensor};

/// Row entropies of `softmax(F Fᵀ / √C)` for `f: [HW, C]`.
pub fn attention_entropy(f: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = f.dims2()?;
    if n < 2 || c == 0 {
        return Err(Error::Shape(format!(
            "attention_entropy needs at least 2 positions and 1 channel, got {:?}",
            f.shape()
        )));
    }
    if !f.all_finite() {
        return Err(Error::Numeric(
            "attention_entropy: non-finite features".into(),
        ));
    }
    const ROWS: usize = 64;
    let d = f.data();
    let scale = 1.0 / (c as f64).sqrt();
    let blocks = par::map_range(n.div_ceil(ROWS), |bi| {
        let r0 = bi * ROWS;
        let rows = ROWS.min(n - r0);
        let mut logits = vec![0.0; rows * n];
        gemm_ex(
            rows,
            c,
            n,
            &d[r0 * c..(r0 + rows) * c],
            Layout::N,
            d,
            Layout::T,
            &mut logits,
            0.0,
        );
        logits
            .chunks(n)
            .map(|row| {
                // H = log Z − Σ p l over logits shifted by their max
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mut z, mut zl) = (0.0, 0.0);
                for &l in row {
                    let s = (l - max) * scale;
                    let e = s.exp();
                    z += e;
                    zl += e * s;
                }
                (z.ln() - zl / z).max(0.0)
            })
            .collect::<Vec<f64>>()
    });
    Ok(blocks.concat())
}

/// Positions of the `s` smallest values, ties broken by lower index; returned sorted by rank.
pub fn select_lowest(values: &[f64], s: usize) -> Result<Vec<usize>> {
    if s > values.len() {
        return Err(Error::Selection(format!(
            "cannot select {s} anchors from {} positions",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(s);
    Ok(idx)
}

/// Sample `sample` of a `[B, C, H, W]` map as position-major rows `[HW, C]`.
pub fn position_rows(feat: &Tensor, sample: usize) -> Result<Tensor> {
    let (b, c, h, w) = feat.dims4()?;
    if sample >= b {
        return Err(Error::Shape(format!("sample {sample} of batch {b}")));
    }
    let hw = h * w;
    let src = &feat.data()[sample * c * hw..(sample + 1) * c * hw];
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = src[ch * hw + p];
        }
    }
    Tensor::new(&[hw, c], out)
}

/// Entropy-ranked anchors for one sample of one layer.
pub fn rank_anchors(feat: &Tensor, sample: usize, s: usize) -> Result<Vec<usize>> {
    let rows = position_rows(feat, sample)?;
    if s > rows.shape()[0] {
        return Err(Error::Selection(format!(
            "cannot select {s} anchors from {} positions",
            rows.shape()[0]
        )));
    }
    let h = attention_entropy(&rows)?;
    select_lowest(&h, s)
}

#[derive(Clone, Debug)]
struct Head {
    in_channels: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One two-layer projection MLP per tapped layer.
#[derive(Clone, Debug)]
pub struct PatchHeads {
    pub nce_dim: usize,
    pub params: ParamStore,
    heads: Vec<Head>,
}

impl PatchHeads {
    pub fn new(channels: &[usize], nce_dim: usize, rng: &mut impl Rng) -> Self {
        let mut s = ParamStore::new();
        let heads = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Head {
                in_channels: c,
                w1: s.add(
                    format!("h{l}.fc1.weight"),
                    normal_init(&[nce_dim, c], 0.02, rng),
                    true,
                ),
                b1: s.add(format!("h{l}.fc1.bias"), Tensor::zeros(&[nce_dim]), true),
                w2: s.add(
                    format!("h{l}.fc2.weight"),
                    normal_init(&[nce_dim, nce_dim], 0.02, rng),
                    true,
                ),
                b2: s.add(format!("h{l}.fc2.bias"), Tensor::zeros(&[nce_dim]), true),
            })
            .collect();
        Self {
            nce_dim,
            params: s,
            heads,
        }
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    /// Embed `x: [S, C]` through head `layer` and L2-normalize each row.
    pub fn project(&self, g: &mut Graph, b: &mut Binder, layer: usize, x: Var) -> Result<Var> {
        let h = self
            .heads
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("no projection head for layer {layer}")))?;
        if g.shape(x).get(1) != Some(&h.in_channels) {
            return Err(Error::Shape(format!(
                "head {layer} expects {} channels, got {:?}",
                h.in_channels,
                g.shape(x)
            )));
        }
        let (w1, b1, w2, b2) = (
            b.var(g, h.w1),
            b.var(g, h.b1),
            b.var(g, h.w2),
            b.var(g, h.b2),
        );
        let z = g.linear(x, w1, Some(b1))?;
        let z = g.relu(z);
        let z = g.linear(z, w2, Some(b2))?;
        g.l2_normalize_rows(z)
    }
}

/// Selected anchors with their embedded query (generated) and key (real) vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    pub layer_id: usize,
    pub indices: Vec<usize>,
    /// `[S, D]`, from the generated image's features.
    pub queries: Tensor,
    /// `[S, D]`; row `i` is the positive for query `i`, the other rows its negatives.
    pub positives: Tensor,
}

/// Graph-side counterpart of [`PatchBank`].
#[derive(Clone, Debug)]
pub struct GraphBank {
    pub layer_id: usize,
    pub indices: Vec<usize>,
    pub queries: Var,
    pub positives: Var,
}

/// Rank positions of one sample by entropy, gather the same positions from both
/// maps and embed them. Keys are detached from the graph.
#[allow(clippy::too_many_arguments)]
pub fn select_anchors_graph(
    g: &mut Graph,
    b: &mut Binder,
    heads: &PatchHeads,
    layer: usize,
    feat_x: Var,
    feat_gx: Var,
    sample: usize,
    s: usize,
    source: AnchorSource,
) -> Result<GraphBank> {
    if g.shape(feat_x) != g.shape(feat_gx) {
        return Err(Error::Shape(format!(
            "anchor maps differ: {:?} vs {:?}",
            g.shape(feat_x),
            g.shape(feat_gx)
        )));
    }
    let rank_on = match source {
        AnchorSource::Generated => feat_gx,
        AnchorSource::Input => feat_x,
    };
    let indices = rank_anchors(g.value(rank_on), sample, s)?;
    let q = g.gather_positions(feat_gx, sample, &indices)?;
    let k = g.gather_positions(feat_x, sample, &indices)?;
    let k = g.detach(k);
    let queries = heads.project(g, b, layer, q)?;
    let positives = heads.project(g, b, layer, k)?;
    let positives = g.detach(positives);
    Ok(GraphBank {
        layer_id: layer,
        indices,
        queries,
        positives,
    })
}

/// Tensor-level anchor selection for sample 0.
pub fn select_anchors(
    feat_x: &FeatureTap,
    feat_gx: &FeatureTap,
    s: usize,
    heads: &PatchHeads,
    source: AnchorSource,
) -> Result<PatchBank> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&heads.params);
    let x = g.constant(feat_x.data.clone());
    let gx = g.constant(feat_gx.data.clone());
    let bank = select_anchors_graph(&mut g, &mut b, heads, feat_x.layer_id, x, gx, 0, s, source)?;
    Ok(PatchBank {
        layer_id: bank.layer_id,
        indices: bank.indices,
        queries: g.value(bank.queries).clone(),
        positives: g.value(bank.positives).clone(),
    })
}
