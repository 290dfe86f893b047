//! Unpaired two-domain data: folder ingestion, resize/crop/flip augmentation
//! and the synthetic circles/squares domains.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image_batch::{rgb_to_tensor, ImageBatch};
use crate::rng::{keyed, Stream, StreamRng};
use crate::tensor::Tensor;

/// Anti-aliasing subsamples per pixel side.
pub const SUPERSAMPLE: usize = 4;
const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Striped circles.
    X,
    /// Checkered squares.
    Y,
}

impl Domain {
    pub fn train_dir(self) -> &'static str {
        match self {
            Domain::X => "trainA",
            Domain::Y => "trainB",
        }
    }

    pub fn test_dir(self) -> &'static str {
        match self {
            Domain::X => "testA",
            Domain::Y => "testB",
        }
    }
}

/// A rendered synthetic image and its subsample-resolution shape mask.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: RgbImage,
    /// Row-major `mask_size²` foreground flags, one per subsample.
    pub mask: Vec<bool>,
    pub mask_size: usize,
}

impl Rendered {
    /// Fraction of subsamples inside the shape, per pixel.
    pub fn coverage(&self) -> Vec<f64> {
        let s = self.mask_size / SUPERSAMPLE;
        let mut c = vec![0.0; s * s];
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                let (y, x) = (i / self.mask_size, i % self.mask_size);
                c[(y / SUPERSAMPLE) * s + x / SUPERSAMPLE] += 1.0;
            }
        }
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Render one image of `domain` at `size × size`.
pub fn render(domain: Domain, size: usize, rng: &mut impl Rng) -> Rendered {
    let sz = size as f64;
    let color = hsv(rng.random::<f64>(), 0.75, 0.9);
    let period = (sz / 8.0).max(2.0);
    let shape: Box<dyn Fn(f64, f64) -> bool> = match domain {
        Domain::X => {
            let r = rng.random_range(0.22 * sz..0.34 * sz);
            let cx = rng.random_range(r + 1.0..sz - r - 1.0);
            let cy = rng.random_range(r + 1.0..sz - r - 1.0);
            Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        }
        Domain::Y => {
            let a = rng.random_range(0.4 * sz..0.6 * sz);
            let x0 = rng.random_range(1.0..sz - a - 1.0);
            let y0 = rng.random_range(1.0..sz - a - 1.0);
            Box::new(move |x, y| x >= x0 && x < x0 + a && y >= y0 && y < y0 + a)
        }
    };
    let texture = |x: f64, y: f64| -> f64 {
        let band = |t: f64| ((t / (period / 2.0)).floor() as i64).rem_euclid(2);
        let dark = match domain {
            Domain::X => band(y) == 1,
            Domain::Y => (band(x) + band(y)) % 2 == 1,
        };
        if dark {
            0.45
        } else {
            1.0
        }
    };
    let ms = size * SUPERSAMPLE;
    let mut mask = vec![false; ms * ms];
    let mut acc = vec![[0.0f64; 3]; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for sy in 0..ms {
        let y = (sy as f64 + 0.5) * step;
        for sx in 0..ms {
            let x = (sx as f64 + 0.5) * step;
            let inside = shape(x, y);
            mask[sy * ms + sx] = inside;
            let px = if inside {
                let t = texture(x, y);
                [color[0] * t, color[1] * t, color[2] * t]
            } else {
                BACKGROUND
            };
            let a = &mut acc[(sy / SUPERSAMPLE) * size + sx / SUPERSAMPLE];
            for c in 0..3 {
                a[c] += px[c];
            }
        }
    }
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let image = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let a = acc[y as usize * size + x as usize];
        let q = |v: f64| (v / n * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([q(a[0]), q(a[1]), q(a[2])])
    });
    Rendered {
        image,
        mask,
        mask_size: ms,
    }
}

/// `n` images of one domain; `split` 0 is the training split, 1 the test split.
pub fn synthetic_domain(
    domain: Domain,
    n: usize,
    size: usize,
    seed: u64,
    split: u64,
) -> Vec<Rendered> {
    let key = split * 2 + matches!(domain, Domain::Y) as u64;
    let mut rng = keyed(seed, Stream::Synthetic, key);
    (0..n).map(|_| render(domain, size, &mut rng)).collect()
}

/// Write `trainA`, `trainB`, `testA`, `testB` PNG folders under `root`.
pub fn make_synthetic(root: &Path, n: usize, n_test: usize, size: usize, seed: u64) -> Result<()> {
    if n == 0 || size < 16 {
        return Err(Error::Dataset(format!(
            "synthetic set needs n >= 1 and size >= 16, got n = {n}, size = {size}"
        )));
    }
    for domain in [Domain::X, Domain::Y] {
        for (split, count, dir) in [(0, n, domain.train_dir()), (1, n_test, domain.test_dir())] {
            let d = root.join(dir);
            fs::create_dir_all(&d)?;
            for (i, r) in synthetic_domain(domain, count, size, seed, split)
                .iter()
                .enumerate()
            {
                r.image.save(d.join(format!("{i:04}.png")))?;
            }
        }
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Sorted image files of a folder.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Decode every image of `dir`, skipping unreadable files with a warning.
pub fn load_folder(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let files = list_images(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        match image::open(f) {
            Ok(img) => {
                let name = f.file_name().unwrap().to_string_lossy().into_owned();
                out.push((name, img.to_rgb8()));
            }
            Err(e) => warn!("skipping unreadable image {}: {e}", f.display()),
        }
    }
    if out.is_empty() && !files.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

pub fn resize_square(img: &RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img.clone()
    } else {
        imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Stack images, each resized to `size`, into one batch.
pub fn to_batch(images: &[RgbImage], size: usize) -> Result<ImageBatch> {
    let ts: Vec<Tensor> = images
        .iter()
        .map(|i| rgb_to_tensor(&resize_square(i, size)))
        .collect();
    let refs: Vec<&Tensor> = ts.iter().collect();
    ImageBatch::new(Tensor::cat_batch(&refs)?)
}

/// Two unaligned image pools with the training augmentation.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    /// Images already resized to `load_size`.
    x: Vec<RgbImage>,
    y: Vec<RgbImage>,
    pub load_size: usize,
    pub crop_size: usize,
    pub flip: bool,
    pub batch_size: usize,
    shuffle_seed: u64,
    cursor: u64,
}

impl UnpairedDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_images(
        x: Vec<RgbImage>,
        y: Vec<RgbImage>,
        load_size: usize,
        crop_size: usize,
        flip: bool,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::Dataset(format!(
                "both domains must be non-empty (|X| = {}, |Y| = {})",
                x.len(),
                y.len()
            )));
        }
        if crop_size > load_size {
            return Err(Error::Dataset(format!(
                "crop {crop_size} exceeds load size {load_size}"
            )));
        }
        let prep = |v: Vec<RgbImage>| v.iter().map(|i| resize_square(i, load_size)).collect();
        Ok(Self {
            x: prep(x),
            y: prep(y),
            load_size,
            crop_size,
            flip,
            batch_size,
            shuffle_seed,
            cursor: 0,
        })
    }

    /// Training split: folders under `dataroot`, or rendered synthetic domains.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let (x, y) = match &cfg.dataroot {
            Some(root) => (
                folder_images(&root.join(Domain::X.train_dir()))?,
                folder_images(&root.join(Domain::Y.train_dir()))?,
            ),
            None => synthetic_pair(cfg, 0, cfg.synthetic_n),
        };
        Self::from_images(
            x,
            y,
            cfg.load_size,
            cfg.crop_size,
            cfg.flip,
            cfg.batch_size,
            cfg.seed,
        )
    }

    pub fn len_x(&self) -> usize {
        self.x.len()
    }

    pub fn len_y(&self) -> usize {
        self.y.len()
    }

    /// Iterations per epoch.
    pub fn epoch_len(&self) -> usize {
        self.x.len().max(self.y.len()).div_ceil(self.batch_size)
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn set_cursor(&mut self, c: u64) {
        self.cursor = c;
    }

    /// Index into X of global draw `i`: sequential over a permutation reshuffled on every pass.
    pub fn x_index(&self, i: u64) -> usize {
        let n = self.x.len() as u64;
        let pass = i / n;
        let mut perm: Vec<usize> = (0..self.x.len()).collect();
        perm.shuffle(&mut keyed(self.shuffle_seed, Stream::Shuffle, pass));
        perm[(i % n) as usize]
    }

    /// Random crop to `crop_size` and optional horizontal flip.
    pub fn augment(&self, img: &RgbImage, rng: &mut impl Rng) -> Tensor {
        let room = (self.load_size - self.crop_size) as u32;
        let ox = rng.random_range(0..=room);
        let oy = rng.random_range(0..=room);
        let flip = self.flip && rng.random::<f64>() < 0.5;
        let c = self.crop_size as u32;
        let mut crop = imageops::crop_imm(img, ox, oy, c, c).to_image();
        if flip {
            imageops::flip_horizontal_in_place(&mut crop);
        }
        rgb_to_tensor(&crop)
    }

    fn batch_of(&self, items: Vec<Tensor>) -> Result<ImageBatch> {
        let refs: Vec<&Tensor> = items.iter().collect();
        ImageBatch::new(Tensor::cat_batch(&refs)?)
    }

    /// Next unpaired training pair: X in shuffled order, Y uniformly at random.
    pub fn next_pair(&mut self, rng: &mut StreamRng) -> Result<(ImageBatch, ImageBatch)> {
        let mut xs = Vec::with_capacity(self.batch_size);
        let mut ys = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let xi = self.x_index(self.cursor);
            self.cursor += 1;
            let yi = rng.random_range(0..self.y.len());
            xs.push(self.augment(&self.x[xi], rng));
            ys.push(self.augment(&self.y[yi], rng));
        }
        Ok((self.batch_of(xs)?, self.batch_of(ys)?))
    }

    /// Uniformly drawn, augmented images of one domain.
    pub fn sample(&self, domain: Domain, n: usize, rng: &mut StreamRng) -> Result<ImageBatch> {
        let pool = match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        };
        let items = (0..n)
            .map(|_| {
                let i = rng.random_range(0..pool.len());
                self.augment(&pool[i], rng)
            })
            .collect();
        self.batch_of(items)
    }
}

fn folder_images(dir: &Path) -> Result<Vec<RgbImage>> {
    let v = load_folder(dir)?;
    if v.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    Ok(v.into_iter().map(|(_, i)| i).collect())
}

fn synthetic_pair(cfg: &TrainConfig, split: u64, n: usize) -> (Vec<RgbImage>, Vec<RgbImage>) {
    let take = |d| {
        synthetic_domain(d, n, cfg.synthetic_size, cfg.seed, split)
            .into_iter()
            .map(|r| r.image)
            .collect()
    };
    (take(Domain::X), take(Domain::Y))
}

/// Named test images of both domains at `crop_size`, for evaluation and sample grids.
pub fn test_split(cfg: &TrainConfig) -> Result<(Vec<(String, RgbImage)>, Vec<(String, RgbImage)>)> {
    let named = |v: Vec<RgbImage>| -> Vec<(String, RgbImage)> {
        v.into_iter()
            .enumerate()
            .map(|(i, img)| (format!("{i:04}.png"), resize_square(&img, cfg.crop_size)))
            .collect()
    };
    match &cfg.dataroot {
        Some(root) => {
            let load = |d: Domain| -> Result<Vec<(String, RgbImage)>> {
                Ok(load_folder(&root.join(d.test_dir()))?
                    .into_iter()
                    .map(|(n, i)| (n, resize_square(&i, cfg.crop_size)))
                    .collect())
            };
            Ok((load(Domain::X)?, load(Domain::Y)?))
        }
        None => {
            let (x, y) = synthetic_pair(cfg, 1, cfg.synthetic_test_n);
            Ok((named(x), named(y)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn permutation_covers_each_pass() {
        let imgs: Vec<RgbImage> = (0..5)
            .map(|i| RgbImage::from_pixel(16, 16, Rgb([i, 0, 0])))
            .collect();
        let ds = UnpairedDataset::from_images(imgs.clone(), imgs, 16, 16, false, 1, 9).unwrap();
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..5).map(|i| ds.x_index(pass * 5 + i)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }
}
