//! Training objectives: adversarial, patch-wise InfoNCE, semantic and style
//! contrastive terms, their weighted dual combination and the total.

use std::fmt;

use crate::config::{GanMode, GenAdvForm};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_batch::FeatureTap;
use crate::qs_attn::{GraphBank, PatchBank};
use crate::tensor::Tensor;

/// Per-layer weights of the semantic term, shallow to deep.
pub const SEMANTIC_WEIGHTS: [f64; 5] = [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0];
/// Denominator guard of the semantic ratio.
pub const SEMANTIC_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Discriminator objective as a loss to minimize.
pub fn adv_d_graph(g: &mut Graph, d_real: Var, d_fake: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Logistic => {
            // −log σ(r) = softplus(−r), −log(1 − σ(f)) = softplus(f)
            let nr = g.scale(d_real, -1.0);
            let a = g.softplus(nr);
            let a = g.mean(a);
            let b = g.softplus(d_fake);
            let b = g.mean(b);
            g.add(a, b)
        }
        GanMode::LeastSquares => {
            let r = g.add_scalar(d_real, -1.0);
            let r = g.square(r);
            let r = g.mean(r);
            let f = g.square(d_fake);
            let f = g.mean(f);
            let s = g.add(r, f)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// Generator adversarial loss.
pub fn adv_g_graph(g: &mut Graph, d_fake: Var, mode: GanMode, form: GenAdvForm) -> Result<Var> {
    Ok(match (mode, form) {
        // log(1 − σ(f)) = −softplus(f)
        (GanMode::Logistic, GenAdvForm::Saturating) => {
            let s = g.softplus(d_fake);
            let m = g.mean(s);
            g.scale(m, -1.0)
        }
        // −log σ(f) = softplus(−f)
        (GanMode::Logistic, GenAdvForm::NonSaturating) => {
            let n = g.scale(d_fake, -1.0);
            let s = g.softplus(n);
            g.mean(s)
        }
        (GanMode::LeastSquares, _) => {
            let r = g.add_scalar(d_fake, -1.0);
            let r = g.square(r);
            g.mean(r)
        }
    })
}

/// Adversarial loss on plain logits, generator side in the saturating form.
pub fn adversarial_loss(
    d_real: &Tensor,
    d_fake: &Tensor,
    mode: GanMode,
    side: Side,
) -> Result<f64> {
    adversarial_loss_with(d_real, d_fake, mode, side, GenAdvForm::Saturating)
}

pub fn adversarial_loss_with(
    d_real: &Tensor,
    d_fake: &Tensor,
    mode: GanMode,
    side: Side,
    form: GenAdvForm,
) -> Result<f64> {
    if !d_real.all_finite() || !d_fake.all_finite() {
        return Err(Error::Numeric("adversarial_loss: non-finite logits".into()));
    }
    let mut g = Graph::new();
    let r = g.constant(d_real.clone());
    let f = g.constant(d_fake.clone());
    let l = match side {
        Side::Discriminator => adv_d_graph(&mut g, r, f, mode)?,
        Side::Generator => adv_g_graph(&mut g, f, mode, form)?,
    };
    Ok(g.value(l).item())
}

/// InfoNCE for one query against its positive and negatives, all unit vectors.
pub fn patch_nce(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let lp = dot(q, k_pos);
    // −log(e^lp / (e^lp + Σ e^ln)) = log(1 + Σ e^(ln − lp))
    let shifted: Vec<f64> = k_negs.iter().map(|k| dot(q, k) - lp).collect();
    let m = shifted.iter().fold(0.0f64, |m, &v| m.max(v));
    let s: f64 = shifted.iter().map(|v| (v - m).exp()).sum();
    if m == 0.0 {
        s.ln_1p()
    } else {
        m + ((-m).exp() + s).ln()
    }
}

/// Mean InfoNCE over every anchor of every bank, weighting each layer by its anchor count.
pub fn patch_loss_graph(g: &mut Graph, banks: &[GraphBank], tau: f64) -> Result<Var> {
    if banks.is_empty() {
        return Err(Error::Selection("patch_loss over zero banks".into()));
    }
    let total: usize = banks.iter().map(|b| b.indices.len()).sum();
    if total == 0 {
        return Err(Error::Selection("patch_loss over empty banks".into()));
    }
    let mut terms = Vec::with_capacity(banks.len());
    for b in banks {
        let logits = g.matmul_nt(b.queries, b.positives)?;
        let l = g.nce_diag(logits, tau)?;
        terms.push(g.scale(l, b.indices.len() as f64 / total as f64));
    }
    g.add_all(&terms)
}

pub fn patch_loss(banks: &[PatchBank], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let gb: Vec<GraphBank> = banks
        .iter()
        .map(|b| GraphBank {
            layer_id: b.layer_id,
            indices: b.indices.clone(),
            queries: g.constant(b.queries.clone()),
            positives: g.constant(b.positives.clone()),
        })
        .collect();
    if gb.iter().any(|b| b.indices.is_empty()) {
        return Err(Error::Selection("patch_loss over an empty bank".into()));
    }
    let l = patch_loss_graph(&mut g, &gb, tau)?;
    Ok(g.value(l).item())
}

fn check_layers(g: &Graph, a: &[Var], b: &[Var], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: {} layers vs {}",
            a.len(),
            b.len()
        )));
    }
    for (&x, &y) in a.iter().zip(b) {
        if g.shape(x) != g.shape(y) {
            return Err(Error::Shape(format!(
                "{what}: tap shapes {:?} vs {:?}",
                g.shape(x),
                g.shape(y)
            )));
        }
    }
    Ok(())
}

/// `Σ ω_i ‖A_i − P_i‖₁ / (‖A_i − N_i‖₁ + 1e−7)`.
pub fn semantic_graph(g: &mut Graph, a: &[Var], p: &[Var], n: &[Var]) -> Result<Var> {
    check_layers(g, a, p, "semantic_loss")?;
    check_layers(g, a, n, "semantic_loss")?;
    if a.len() != SEMANTIC_WEIGHTS.len() {
        return Err(Error::Shape(format!(
            "semantic_loss needs {} layers, got {}",
            SEMANTIC_WEIGHTS.len(),
            a.len()
        )));
    }
    let mut terms = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let dp = g.sub(a[i], p[i])?;
        let dp = g.abs(dp);
        let num = g.sum(dp);
        let dn = g.sub(a[i], n[i])?;
        let dn = g.abs(dn);
        let den = g.sum(dn);
        let den = g.add_scalar(den, SEMANTIC_EPS);
        let r = g.div(num, den)?;
        terms.push(g.scale(r, SEMANTIC_WEIGHTS[i]));
    }
    g.add_all(&terms)
}

/// `Σ_l ‖gram(A_l) − gram(B_l)‖_F`.
pub fn gram_distance_graph(g: &mut Graph, a: &[Var], b: &[Var]) -> Result<Var> {
    check_layers(g, a, b, "style_loss")?;
    if a.is_empty() {
        return Err(Error::Shape("style_loss over zero layers".into()));
    }
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let gx = g.gram(x)?;
        let gy = g.gram(y)?;
        let d = g.sub(gx, gy)?;
        terms.push(g.frob_norm(d));
    }
    g.add_all(&terms)
}

/// `max(d(A, P) − d(A, N) + α, 0)` over Gram distances.
pub fn style_graph(g: &mut Graph, a: &[Var], p: &[Var], n: &[Var], alpha: f64) -> Result<Var> {
    let dp = gram_distance_graph(g, a, p)?;
    let dn = gram_distance_graph(g, a, n)?;
    let d = g.sub(dp, dn)?;
    let d = g.add_scalar(d, alpha);
    Ok(g.relu(d))
}

fn taps_to_vars(g: &mut Graph, taps: &[FeatureTap]) -> Vec<Var> {
    taps.iter().map(|t| g.constant(t.data.clone())).collect()
}

pub fn semantic_loss(a: &[FeatureTap], p: &[FeatureTap], n: &[FeatureTap]) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vp, vn) = (
        taps_to_vars(&mut g, a),
        taps_to_vars(&mut g, p),
        taps_to_vars(&mut g, n),
    );
    let l = semantic_graph(&mut g, &va, &vp, &vn)?;
    Ok(g.value(l).item())
}

pub fn style_loss(a: &[FeatureTap], p: &[FeatureTap], n: &[FeatureTap], alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vp, vn) = (
        taps_to_vars(&mut g, a),
        taps_to_vars(&mut g, p),
        taps_to_vars(&mut g, n),
    );
    let l = style_graph(&mut g, &va, &vp, &vn, alpha)?;
    Ok(g.value(l).item())
}

/// The margin hinge on precomputed distances.
pub fn style_from_distances(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    (d_pos - d_neg + alpha).max(0.0)
}

/// Per-sample normalized Gram matrices `[B, C, C]` of a `[B, C, H, W]` map.
pub fn gram(f: &FeatureTap) -> Result<Tensor> {
    gram_matrix(&f.data)
}

pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    if !f.all_finite() {
        return Err(Error::Numeric("gram: non-finite features".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let m = g.gram(x)?;
    Ok(g.value(m).clone())
}

pub fn dual_loss(semantic: f64, style: f64, lambda_semantic: f64, lambda_style: f64) -> f64 {
    lambda_semantic * semantic + lambda_style * style
}

/// Per-iteration loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub patch_x: f64,
    pub patch_y: f64,
    pub semantic: f64,
    pub style: f64,
    pub dual: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 8] = [
        "adv_g", "adv_d", "patch_x", "patch_y", "semantic", "style", "dual", "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_g,
            self.adv_d,
            self.patch_x,
            self.patch_y,
            self.semantic,
            self.style,
            self.dual,
            self.total,
        ]
    }

    /// The first non-finite component, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, v)| (*n, v))
    }

    /// Fill `dual` and `total` from the components, failing on any non-finite value.
    pub fn finalize(
        &mut self,
        lambda_semantic: f64,
        lambda_style: f64,
        iteration: u64,
    ) -> Result<()> {
        self.dual = dual_loss(self.semantic, self.style, lambda_semantic, lambda_style);
        self.total = total_loss(self);
        match self.non_finite() {
            Some((component, value)) => Err(Error::NonFinite {
                iteration,
                component: component.into(),
                value,
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in Self::FIELDS.iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}={v:.6}")?;
        }
        Ok(())
    }
}

/// `adv_g + patch_x + patch_y + dual`.
pub fn total_loss(r: &LossReport) -> f64 {
    r.adv_g + r.patch_x + r.patch_y + r.dual
}
