//! Fast invariant suite: gradient checks, Gram/SVD/entropy oracles and
//! closed-form loss cases.

use std::fmt::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocks::{spectral_normalize, SpectralNormState};
use crate::config::{GanMode, TrainConfig};
use crate::discriminator::ImageBuffer;
use crate::error::Result;
use crate::gradcheck;
use crate::graph::{Graph, Var};
use crate::image_batch::{FeatureTap, ImageBatch};
use crate::losses::{self, Side};
use crate::qs_attn::{attention_entropy, rank_anchors};
use crate::rng::{keyed, Stream, StreamRng};
use crate::tensor::Tensor;
use crate::trainer::lr_at;

/// Faults that can be injected to confirm the suite detects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Gram,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub quick: bool,
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut Ctx) -> Result<String>;

struct Ctx {
    rng: StreamRng,
    fault: Option<Fault>,
}

impl Ctx {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.sample::<f64, _>(StandardNormal))
    }

    fn gram(&self, f: &Tensor) -> Result<Tensor> {
        let m = losses::gram_matrix(f)?;
        Ok(match self.fault {
            Some(Fault::Gram) => m.map(|v| v * 1.01),
            None => m,
        })
    }
}

fn fail(msg: String) -> Result<String> {
    Err(crate::Error::Numeric(msg))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        fail(msg()).map(|_| ())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<()> {
    ensure((got - want).abs() <= tol, || {
        format!("{name}: got {got}, want {want}")
    })
}

fn gram_oracle(c: &mut Ctx) -> Result<String> {
    let ones = Tensor::ones(&[1, 2, 2, 2]);
    let m = c.gram(&ones)?;
    for &v in m.data() {
        close("all-ones gram", v, 0.5, 1e-12)?;
    }
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (b, ch, h, w) = (2, 3, 4, 5);
        let f = c.randn(&[b, ch, h, w]);
        let m = c.gram(&f)?;
        let d = f.data();
        let hw = h * w;
        for s in 0..b {
            for i in 0..ch {
                for j in 0..ch {
                    let mut acc = 0.0;
                    for k in 0..hw {
                        acc += d[(s * ch + i) * hw + k] * d[(s * ch + j) * hw + k];
                    }
                    let want = acc / (ch * hw) as f64;
                    let got = m.data()[(s * ch + i) * ch + j];
                    worst = worst.max((got - want).abs());
                    let sym = m.data()[(s * ch + j) * ch + i];
                    ensure(got == sym, || "gram not symmetric".into())?;
                }
            }
            let mat = DMatrix::from_row_slice(ch, ch, &m.data()[s * ch * ch..(s + 1) * ch * ch]);
            let min_eig = mat.symmetric_eigenvalues().min();
            ensure(min_eig >= -1e-12, || format!("gram eigenvalue {min_eig}"))?;
        }
    }
    ensure(worst <= 1e-6, || {
        format!("gram differs from brute force by {worst:e}")
    })?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn svd_oracle(c: &mut Ctx) -> Result<String> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for k in 0..6 {
        let (rows, cols) = (3 + k, 9 + 2 * k);
        let w = c.randn(&[rows, cols]);
        let mut st = SpectralNormState::random(rows, cols, &mut c.rng);
        st.n_power_iterations = 20;
        let sn = spectral_normalize(&w, &st)?;
        let s = DMatrix::from_row_slice(rows, cols, sn.weight.data())
            .singular_values()
            .max();
        lo = lo.min(s);
        hi = hi.max(s);
    }
    ensure(lo >= 0.99 && hi <= 1.01, || {
        format!("normalized σ in [{lo}, {hi}]")
    })?;
    Ok(format!("σ in [{lo:.4}, {hi:.4}]"))
}

fn brute_entropy(f: &Tensor) -> Vec<f64> {
    let (n, ch) = (f.shape()[0], f.shape()[1]);
    let d = f.data();
    (0..n)
        .map(|i| {
            let l: Vec<f64> = (0..n)
                .map(|j| {
                    (0..ch).map(|k| d[i * ch + k] * d[j * ch + k]).sum::<f64>() / (ch as f64).sqrt()
                })
                .collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            -l.iter()
                .map(|v| {
                    let p = (v - m).exp() / z;
                    if p > 0.0 {
                        p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

fn entropy_oracle(c: &mut Ctx) -> Result<String> {
    let mut worst = 0.0f64;
    for t in 0..10 {
        let (ch, h, w) = (2 + t % 4, 3 + t % 5, 4 + t % 4);
        let feat = c.randn(&[1, ch, h, w]);
        let rows = crate::qs_attn::position_rows(&feat, 0)?;
        let got = attention_entropy(&rows)?;
        let want = brute_entropy(&rows);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let s = (h * w) / 3;
        let sel = rank_anchors(&feat, 0, s)?;
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| want[a].total_cmp(&want[b]).then(a.cmp(&b)));
        ensure(sel == order[..s], || {
            format!("anchor selection {sel:?} vs {:?}", &order[..s])
        })?;
    }
    ensure(worst <= 1e-9, || format!("entropy deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn loss_closed_forms(c: &mut Ctx) -> Result<String> {
    let z = Tensor::zeros(&[1, 1, 4, 4]);
    close(
        "logistic D at σ = 0.5",
        losses::adversarial_loss(&z, &z, GanMode::Logistic, Side::Discriminator)?,
        2.0 * 2f64.ln(),
        1e-9,
    )?;
    let half = Tensor::full(&[1, 1, 4, 4], 0.5);
    close(
        "least-squares D",
        losses::adversarial_loss(&half, &half, GanMode::LeastSquares, Side::Discriminator)?,
        0.25,
        1e-12,
    )?;
    let q = vec![1.0, 0.0];
    close(
        "nce without negatives",
        losses::patch_nce(&q, &q, &[], 0.07),
        0.0,
        1e-12,
    )?;
    close(
        "nce one orthogonal negative",
        losses::patch_nce(&q, &q, &[vec![0.0, 1.0]], 0.07),
        (-1.0f64 / 0.07).exp().ln_1p(),
        1e-15,
    )?;
    let negs = vec![q.clone(); 7];
    close(
        "nce uniform",
        losses::patch_nce(&q, &q, &negs, 0.07),
        8f64.ln(),
        1e-12,
    )?;

    let tap = |v: f64, l: usize| FeatureTap {
        layer_id: l,
        data: Tensor::full(&[1, 1, 1, 2], v),
    };
    // magnitudes large enough that the 1e-7 guard stays below 1e-9
    let a: Vec<FeatureTap> = (0..5).map(|l| tap(0.0, l)).collect();
    let p: Vec<FeatureTap> = (0..5).map(|l| tap(1e3, l)).collect();
    let n: Vec<FeatureTap> = (0..5).map(|l| tap(2e3, l)).collect();
    close(
        "semantic half ratio",
        losses::semantic_loss(&a, &p, &n)?,
        0.96875,
        1e-9,
    )?;
    close(
        "semantic identical",
        losses::semantic_loss(&p, &p, &n)?,
        0.0,
        0.0,
    )?;
    close(
        "style margin met",
        losses::style_from_distances(0.0, 0.1, 0.04),
        0.0,
        0.0,
    )?;
    close(
        "style tie",
        losses::style_from_distances(0.3, 0.3, 0.04),
        0.04,
        1e-12,
    )?;
    close(
        "style violated",
        losses::style_from_distances(0.5, 0.2, 0.04),
        0.34,
        1e-12,
    )?;
    close(
        "dual",
        losses::dual_loss(0.96875, 0.34, 1.0, 0.5),
        1.13875,
        1e-12,
    )?;
    let r = losses::LossReport {
        adv_g: 0.5,
        patch_x: 1.0,
        patch_y: 1.0,
        dual: 1.13875,
        ..Default::default()
    };
    close("total", losses::total_loss(&r), 3.63875, 1e-12)?;

    // style via the Gram under test against distances computed independently
    let f: Vec<FeatureTap> = (0..3)
        .map(|l| FeatureTap {
            layer_id: l,
            data: c.randn(&[1, 3, 2, 2]),
        })
        .collect();
    let pf: Vec<FeatureTap> = f
        .iter()
        .map(|t| FeatureTap {
            layer_id: t.layer_id,
            data: t.data.map(|v| v * 0.5),
        })
        .collect();
    let mut d = 0.0;
    for (x, y) in f.iter().zip(&pf) {
        let gx = losses::gram_matrix(&x.data)?;
        let gy = losses::gram_matrix(&y.data)?;
        d += gx.zip_map(&gy, |a, b| (a - b) * (a - b)).sum().sqrt();
    }
    let got = losses::style_loss(&f, &pf, &f, 0.04)?;
    close("style via gram distances", got, d + 0.04, 1e-9 * (1.0 + d))?;
    Ok("all closed forms exact".into())
}

fn grad_case(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let r = gradcheck::check(inputs, 1e-5, 24, f)?;
    ensure(r.rel_error <= 1e-3, || {
        format!("{name}: relative error {:e}", r.rel_error)
    })?;
    Ok(r.rel_error)
}

fn unit_rows(c: &mut Ctx, n: usize, d: usize) -> Tensor {
    let mut t = c.randn(&[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn gradients_losses(c: &mut Ctx) -> Result<String> {
    let mut worst = 0.0f64;
    let q = unit_rows(c, 5, 4);
    let k = unit_rows(c, 5, 4);
    worst = worst.max(grad_case("patch_nce", &[q, k], |g, v| {
        let l = g.matmul_nt(v[0], v[1])?;
        g.nce_diag(l, 0.07)
    })?);
    let taps: Vec<Tensor> = (0..15)
        .map(|i| c.randn(&[1, 2, 2 + i % 5 % 2, 3]))
        .collect();
    worst = worst.max(grad_case("semantic", &taps, |g, v| {
        losses::semantic_graph(g, &v[0..5], &v[5..10], &v[10..15])
    })?);
    let mut st: Vec<Tensor> = (0..9).map(|_| c.randn(&[1, 3, 2, 2])).collect();
    // keep the hinge active so the gradient is nonzero
    for t in &mut st[6..9] {
        *t = t.map(|v| v * 3.0);
    }
    worst = worst.max(grad_case("style", &st, |g, v| {
        losses::style_graph(g, &v[0..3], &v[3..6], &v[6..9], 0.04)
    })?);
    let dr = c.randn(&[2, 1, 3, 3]);
    let df = c.randn(&[2, 1, 3, 3]);
    worst = worst.max(grad_case("adversarial", &[dr, df], |g, v| {
        losses::adv_d_graph(g, v[0], v[1], GanMode::Logistic)
    })?);
    Ok(format!("max relative error {worst:.1e}"))
}

fn gradients_layers(c: &mut Ctx) -> Result<String> {
    let mut worst = 0.0f64;
    let x = c.randn(&[2, 2, 5, 5]);
    let w = c.randn(&[3, 2, 3, 3]);
    let b = c.randn(&[3]);
    worst = worst.max(grad_case("conv2d", &[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let y = g.square(y);
        Ok(g.sum(y))
    })?);
    let wt = c.randn(&[2, 3, 3, 3]);
    worst = worst.max(grad_case("conv_transpose2d", &[x.clone(), wt], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], None, 2, 1, 1)?;
        let y = g.square(y);
        Ok(g.sum(y))
    })?);
    let gamma = c.randn(&[2]);
    let beta = c.randn(&[2]);
    let probe = c.randn(&[2, 2, 5, 5]);
    worst = worst.max(grad_case(
        "instance_norm",
        &[x.clone(), gamma, beta],
        |g, v| {
            let y = g.instance_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            let p = g.constant(probe.clone());
            let y = g.mul(y, p)?;
            Ok(g.sum(y))
        },
    )?);
    worst = worst.max(grad_case("reflect_pad", &[x], |g, v| {
        let y = g.reflect_pad(v[0], 2)?;
        let y = g.square(y);
        Ok(g.sum(y))
    })?);
    Ok(format!("max relative error {worst:.1e}"))
}

fn schedule(_: &mut Ctx) -> Result<String> {
    let cfg = TrainConfig::default();
    for (e, want) in [(1, 2e-4), (200, 2e-4), (300, 1e-4), (400, 0.0)] {
        close(&format!("lr({e})"), lr_at(e, &cfg)?, want, 1e-18)?;
    }
    Ok("lr(200, 300, 400) exact".into())
}

fn buffer_stats(c: &mut Ctx) -> Result<String> {
    let mut buf = ImageBuffer::new(50, keyed(c.rng.random(), Stream::Buffer, 0));
    let mut swaps = 0usize;
    let total = 10_000;
    for i in 0..50 + total {
        let fresh = ImageBatch::new(Tensor::full(&[1, 3, 16, 16], i as f64 / 20_000.0))?;
        let out = buf.query(&fresh)?;
        ensure(buf.len() <= 50, || format!("pool grew to {}", buf.len()))?;
        if i >= 50 && out.tensor() != fresh.tensor() {
            swaps += 1;
        }
    }
    let freq = swaps as f64 / total as f64;
    ensure((freq - 0.5).abs() <= 0.02, || {
        format!("swap frequency {freq}")
    })?;
    Ok(format!("swap frequency {freq:.3}"))
}

const CHECKS: [(&str, Check, bool); 8] = [
    ("gram oracle", gram_oracle, true),
    ("svd oracle", svd_oracle, true),
    ("entropy oracle", entropy_oracle, true),
    ("loss closed forms", loss_closed_forms, true),
    ("loss gradients", gradients_losses, true),
    ("layer gradients", gradients_layers, false),
    ("buffer statistics", buffer_stats, false),
    ("lr schedule", schedule, false),
];

/// Run the suite; `quick` keeps only the core oracles.
pub fn run(opts: &Options) -> Vec<CheckResult> {
    let mut ctx = Ctx {
        rng: keyed(opts.seed, Stream::Metrics, 0x5e1f),
        fault: opts.fault,
    };
    CHECKS
        .iter()
        .filter(|c| !opts.quick || c.2)
        .map(|&(name, f, _)| match f(&mut ctx) {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

pub fn table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{status}  {:<w$}  {}", r.name, r.detail);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_and_gram_fault_is_caught() {
        let ok = run(&Options {
            quick: true,
            ..Default::default()
        });
        assert!(ok.iter().all(|r| r.passed), "{}", table(&ok));
        let bad = run(&Options {
            quick: true,
            fault: Some(Fault::Gram),
            seed: 0,
        });
        let failed: Vec<_> = bad.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, vec!["gram oracle"]);
    }
}
