//! Evaluation metrics: Fréchet distance on extractor features, sliced
//! Wasserstein distance on Laplacian-pyramid patches, and SSIM.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::features::Vgg16;
use crate::image_batch::rgb_to_tensor;
use crate::par;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

fn mean_cov(f: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = f.dims2()?;
    if n < 2 {
        return Err(Error::Numeric(format!(
            "need at least 2 feature rows, got {n}"
        )));
    }
    let x = f.data();
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mu.iter_mut().zip(&x[r * d..(r + 1) * d]) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| x[r * d + c] - mu[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to `a: [N, D]` and `b: [M, D]`.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, da) = a.dims2()?;
    let (_, db) = b.dims2()?;
    if da != db {
        return Err(Error::Shape(format!("feature dims differ: {da} vs {db}")));
    }
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    Ok(frechet(&ma, &ca, &mb, &cb))
}

/// Extractor embeddings `[N, D]` of equally sized images, one forward pass per image.
pub fn embed_images(vgg: &Vgg16, images: &[RgbImage]) -> Result<Tensor> {
    let rows = images
        .iter()
        .map(|img| vgg.embed(&rgb_to_tensor(img)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::cat_batch(&refs)
}

/// Fréchet distance between the extractor embeddings of two image sets.
pub fn fid_images(vgg: &Vgg16, a: &[RgbImage], b: &[RgbImage]) -> Result<f64> {
    fid(&embed_images(vgg, a)?, &embed_images(vgg, b)?)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet(ma: &[f64], ca: &DMatrix<f64>, mb: &[f64], cb: &DMatrix<f64>) -> f64 {
    let dm: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = sqrtm_psd(ca);
    let inner = &sa * cb * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (dm + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0)
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable 5-tap binomial blur of one `[h, w]` plane, reflected borders.
fn blur(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|k| BINOMIAL5[k] * p[y * w + reflect_index(x as isize + k as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|k| BINOMIAL5[k] * tmp[reflect_index(y as isize + k as isize - 2, h) * w + x])
                .sum();
        }
    }
    out
}

fn downsample(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let b = blur(p, h, w);
    let (oh, ow) = (h / 2, w / 2);
    (0..oh * ow)
        .map(|i| b[(i / ow) * 2 * w + (i % ow) * 2])
        .collect()
}

fn upsample(p: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut z = vec![0.0; oh * ow];
    for y in 0..h.min(oh.div_ceil(2)) {
        for x in 0..w.min(ow.div_ceil(2)) {
            z[2 * y * ow + 2 * x] = 4.0 * p[y * w + x];
        }
    }
    blur(&z, oh, ow)
}

/// Level `level` of the Laplacian pyramid of every plane of `[B, C, H, W]`.
pub fn laplacian_level(img: &Tensor, level: usize) -> Result<Tensor> {
    let (b, c, mut h, mut w) = img.dims4()?;
    let mut planes: Vec<Vec<f64>> = img.data().chunks(h * w).map(|p| p.to_vec()).collect();
    for _ in 0..level {
        planes = planes.iter().map(|p| downsample(p, h, w)).collect();
        h /= 2;
        w /= 2;
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("pyramid level {level} too deep")));
    }
    let (nh, nw) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(b * c * h * w);
    for p in &planes {
        let up = upsample(&downsample(p, h, w), nh, nw, h, w);
        data.extend(p.iter().zip(&up).map(|(a, u)| a - u));
    }
    Tensor::new(&[b, c, h, w], data)
}

pub const SWD_PATCH: usize = 7;
pub const SWD_LEVEL: usize = 1;
pub const SWD_PATCHES_PER_IMAGE: usize = 128;

/// Random `7×7×C` patch descriptors `[N·k, 49·C]` from a pyramid band.
pub fn patch_descriptors(band: &Tensor, per_image: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, c, h, w) = band.dims4()?;
    let p = SWD_PATCH;
    if h < p || w < p {
        return Err(Error::Shape(format!(
            "{h}x{w} band smaller than {p}x{p} patches"
        )));
    }
    let d = band.data();
    let dim = p * p * c;
    let mut out = Vec::with_capacity(b * per_image * dim);
    for i in 0..b {
        for _ in 0..per_image {
            let oy = rng.random_range(0..=h - p);
            let ox = rng.random_range(0..=w - p);
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for y in 0..p {
                    let row = base + (oy + y) * w + ox;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[b * per_image, dim], out)
}

/// Exact 1-D Wasserstein-1 distance between two empirical samples (sorted in place).
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n as f64;
    }
    // integrate |Fa⁻¹(t) − Fb⁻¹(t)| over the merged quantile breakpoints
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let ta = (i + 1) as f64 / n as f64;
        let tb = (j + 1) as f64 / m as f64;
        let next = ta.min(tb);
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if ta <= tb {
            i += 1;
        }
        if tb <= ta {
            j += 1;
        }
    }
    total
}

/// Random unit directions `[k, dim]`.
pub fn random_projections(k: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut data: Vec<f64> = (0..k * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(&[k, dim], data).expect("sizes match")
}

/// Mean over `projections: [k, dim]` of the 1-D W1 between projected descriptor sets.
pub fn swd_descriptors(a: &Tensor, b: &Tensor, projections: &Tensor) -> Result<f64> {
    let (na, d) = a.dims2()?;
    let (nb, d2) = b.dims2()?;
    let (k, d3) = projections.dims2()?;
    if d != d2 || d != d3 {
        return Err(Error::Shape(format!(
            "descriptor dims differ: {d}, {d2}, projections {d3}"
        )));
    }
    if na == 0 || nb == 0 || k == 0 {
        return Err(Error::Numeric("swd over an empty set".into()));
    }
    let project = |x: &Tensor, n: usize, dir: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|r| {
                x.data()[r * d..(r + 1) * d]
                    .iter()
                    .zip(dir)
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect()
    };
    let per: Vec<f64> = par::map_range(k, |i| {
        let dir = &projections.data()[i * d..(i + 1) * d];
        let mut pa = project(a, na, dir);
        let mut pb = project(b, nb, dir);
        wasserstein_1d(&mut pa, &mut pb)
    });
    Ok(per.iter().sum::<f64>() / k as f64)
}

/// Sliced Wasserstein distance between two image sets `[N, 3, H, W]`.
pub fn swd(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut impl Rng) -> Result<f64> {
    let (na, ca, ..) = a.dims4()?;
    let (nb, cb, ..) = b.dims4()?;
    if na < 2 || nb < 2 {
        return Err(Error::Numeric(format!(
            "swd needs >= 2 images per set, got {na} and {nb}"
        )));
    }
    if ca != cb {
        return Err(Error::Shape(format!("channel counts differ: {ca} vs {cb}")));
    }
    let la = laplacian_level(a, SWD_LEVEL)?;
    let lb = laplacian_level(b, SWD_LEVEL)?;
    // both sets sample the same patch positions
    let pos_seed: u64 = rng.random();
    let da = patch_descriptors(
        &la,
        SWD_PATCHES_PER_IMAGE,
        &mut StreamRng::seed_from_u64(pos_seed),
    )?;
    let db = patch_descriptors(
        &lb,
        SWD_PATCHES_PER_IMAGE,
        &mut StreamRng::seed_from_u64(pos_seed),
    )?;
    let proj = random_projections(n_projections, da.shape()[1], rng);
    swd_descriptors(&da, &db, &proj)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of `[-1, 1]` images.
pub const SSIM_RANGE: f64 = 2.0;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all windows, channels and images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (_, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} smaller than the SSIM window"
        )));
    }
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let k = gaussian_window();
    let planes = a.len() / (h * w);
    let per: Vec<(f64, usize)> = par::map_range(planes, |i| {
        let pa = &a.data()[i * h * w..(i + 1) * h * w];
        let pb = &b.data()[i * h * w..(i + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        let mut s = 0.0;
        for j in 0..mu_a.len() {
            let (ma, mb) = (mu_a[j], mu_b[j]);
            let va = aa[j] - ma * ma;
            let vb = bb[j] - mb * mb;
            let cov = ab[j] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        (s, mu_a.len())
    });
    let (s, n) = per.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w1_unequal_sizes() {
        // {0, 1} vs {0, 0.5, 1}: quantile functions differ on [1/3, 1/2) by 0.5 and [1/2, 2/3) by 0.5
        let w = wasserstein_1d(&mut [0.0, 1.0], &mut [0.0, 0.5, 1.0]);
        assert!((w - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_laplacian() {
        let t = Tensor::full(&[1, 3, 32, 32], 0.3);
        let l = laplacian_level(&t, 1).unwrap();
        assert_eq!(l.shape(), &[1, 3, 16, 16]);
        assert!(l.max_abs() < 1e-12);
    }
}
