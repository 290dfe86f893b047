use std::fs;

use image::{Rgb, RgbImage};
use tempfile::TempDir;

use sndcr_core::config::TrainConfig;
use sndcr_core::data::{
    list_images, load_folder, make_synthetic, synthetic_domain, test_split, Domain, Rendered,
    UnpairedDataset, SUPERSAMPLE,
};
use sndcr_core::image_batch::rgb_to_tensor;
use sndcr_core::rng::{stream, Stream};

/// Largest 4-connected foreground component of a square mask.
fn largest_component(mask: &[bool], n: usize) -> Vec<bool> {
    let mut label = vec![0usize; n * n];
    let mut best = (0usize, 0usize);
    let mut next = 1;
    for start in 0..n * n {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / n, p % n);
            let mut push = |q: usize| {
                if mask[q] && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - n);
            }
            if y + 1 < n {
                push(p + n);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < n {
                push(p + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
        next += 1;
    }
    label.iter().map(|&l| l == best.0 && l != 0).collect()
}

/// Marching-squares contour length with edge-midpoint vertices; cells outside the mask are empty.
fn contour_length(mask: &[bool], n: usize) -> f64 {
    let at = |y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < n
            && (x as usize) < n
            && mask[y as usize * n + x as usize]
    };
    let diag = 0.5f64.sqrt();
    let mut len = 0.0;
    for y in -1..n as isize {
        for x in -1..n as isize {
            let code = (at(y, x) as u8)
                | (at(y, x + 1) as u8) << 1
                | (at(y + 1, x + 1) as u8) << 2
                | (at(y + 1, x) as u8) << 3;
            len += match code {
                0 | 15 => 0.0,
                1 | 2 | 4 | 8 | 14 | 13 | 11 | 7 => diag,
                3 | 6 | 12 | 9 => 1.0,
                5 | 10 => 2.0 * diag,
                _ => unreachable!(),
            };
        }
    }
    len
}

fn circularity(r: &Rendered) -> f64 {
    let comp = largest_component(&r.mask, r.mask_size);
    let area = comp.iter().filter(|&&b| b).count() as f64;
    let p = contour_length(&comp, r.mask_size);
    4.0 * std::f64::consts::PI * area / (p * p)
}

#[test]
fn marching_squares_oracle_on_a_known_square() {
    let n = 20;
    let mask: Vec<bool> = (0..n * n)
        .map(|i| (5..15).contains(&(i / n)) && (5..15).contains(&(i % n)))
        .collect();
    // 10×10 block: straight runs of 9 plus four chamfered corners
    let want = 4.0 * 9.0 + 4.0 * 0.5f64.sqrt();
    assert!((contour_length(&mask, n) - want).abs() < 1e-12);
}

#[test]
fn circles_are_round_and_squares_are_not() {
    for seed in [0u64, 3, 9] {
        for r in synthetic_domain(Domain::X, 40, 64, seed, 0) {
            let c = circularity(&r);
            assert!(c > 0.8, "circle circularity {c}");
        }
        for r in synthetic_domain(Domain::Y, 40, 64, seed, 0) {
            let c = circularity(&r);
            assert!(c < 0.8, "square circularity {c}");
        }
    }
}

#[test]
fn rendered_masks_match_image_size() {
    let r = &synthetic_domain(Domain::X, 1, 32, 1, 0)[0];
    assert_eq!(r.mask_size, 32 * SUPERSAMPLE);
    assert_eq!(r.image.dimensions(), (32, 32));
    let cov = r.coverage();
    assert!(cov.iter().all(|&c| (0.0..=1.0).contains(&c)));
    assert!(cov.contains(&1.0) && cov.contains(&0.0));
}

#[test]
fn make_synthetic_is_regenerable() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    make_synthetic(a.path(), 100, 3, 64, 3).unwrap();
    make_synthetic(b.path(), 100, 3, 64, 3).unwrap();
    let files = list_images(&a.path().join("trainA")).unwrap();
    assert_eq!(files.len(), 100);
    for f in &files {
        let img = image::open(f).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (64, 64));
        let other = b.path().join("trainA").join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(other).unwrap());
    }
    assert_eq!(list_images(&a.path().join("testB")).unwrap().len(), 3);
    assert!(make_synthetic(a.path(), 0, 1, 64, 3).is_err());
    assert!(make_synthetic(a.path(), 1, 1, 8, 3).is_err());
}

#[test]
fn different_seeds_give_different_images() {
    let a = synthetic_domain(Domain::Y, 3, 32, 1, 0);
    let b = synthetic_domain(Domain::Y, 3, 32, 2, 0);
    assert_ne!(a[0].image, b[0].image);
}

fn flat(v: u8) -> RgbImage {
    RgbImage::from_pixel(16, 16, Rgb([v, v, v]))
}

/// Pool index of a flat image encoded as `40 * index`.
fn index_of(t: &sndcr_core::Tensor) -> usize {
    let v = ((t.data()[0] + 1.0) * 127.5).round() as usize;
    v / 40
}

#[test]
fn x_and_y_draws_are_independent() {
    let xs: Vec<RgbImage> = (0..4).map(|i| flat(40 * i as u8)).collect();
    let ys: Vec<RgbImage> = (0..5).map(|i| flat(40 * i as u8)).collect();
    let mut ds = UnpairedDataset::from_images(xs, ys, 16, 16, false, 1, 5).unwrap();
    let mut rng = stream(5, Stream::Data);
    let mut counts = [[0f64; 5]; 4];
    let draws = 1000;
    for _ in 0..draws {
        let (x, y) = ds.next_pair(&mut rng).unwrap();
        counts[index_of(x.tensor())][index_of(y.tensor())] += 1.0;
    }
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..5).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..4 {
        for j in 0..5 {
            let e = rows[i] * cols[j] / draws as f64;
            chi2 += (counts[i][j] - e).powi(2) / e;
        }
    }
    // 12 degrees of freedom, 0.999 quantile
    assert!(chi2 < 32.91, "chi2 {chi2}");
    assert!(
        rows.iter().all(|&r| r == 250.0),
        "sequential X visits each image once per pass"
    );
}

#[test]
fn epoch_length_is_the_larger_domain() {
    let ds = UnpairedDataset::from_images(vec![flat(0); 3], vec![flat(1); 7], 16, 16, false, 1, 0)
        .unwrap();
    assert_eq!(ds.epoch_len(), 7);
    assert!(UnpairedDataset::from_images(vec![], vec![flat(1)], 16, 16, false, 1, 0).is_err());
}

fn coded(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        Rgb([
            (x % 256) as u8,
            (y % 256) as u8,
            (x / 256 * 16 + y / 256) as u8,
        ])
    })
}

#[test]
fn crops_are_uniform_over_the_margin() {
    let img = coded(286);
    let ds =
        UnpairedDataset::from_images(vec![img.clone()], vec![img], 286, 256, false, 1, 0).unwrap();
    let mut rng = stream(1, Stream::Data);
    let mut hist = [[0usize; 31]; 2];
    let draws = 3100;
    for _ in 0..draws {
        let t = ds.augment(&coded(286), &mut rng);
        let px = |c: usize| ((t.data()[c * 256 * 256] + 1.0) * 127.5).round() as usize;
        let (ox, oy) = (px(0), px(1));
        assert!(ox <= 30 && oy <= 30);
        hist[0][ox] += 1;
        hist[1][oy] += 1;
    }
    for h in hist {
        let e = draws as f64 / 31.0;
        let chi2: f64 = h.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 30 degrees of freedom, 0.999 quantile
        assert!(chi2 < 59.70, "chi2 {chi2}");
        assert!(h.iter().all(|&c| c > 0));
    }
}

#[test]
fn equal_load_and_crop_returns_the_resized_image() {
    let img = coded(40);
    let ds =
        UnpairedDataset::from_images(vec![img.clone()], vec![img.clone()], 32, 32, false, 1, 0)
            .unwrap();
    let resized = image::imageops::resize(&img, 32, 32, image::imageops::FilterType::Triangle);
    let t = ds.augment(&resized, &mut stream(0, Stream::Data));
    assert_eq!(t, rgb_to_tensor(&resized));
}

#[test]
fn flips_happen_about_half_the_time() {
    let img = RgbImage::from_fn(16, 16, |x, _| Rgb([(x * 10) as u8, 0, 0]));
    let ds = UnpairedDataset::from_images(vec![img.clone()], vec![img.clone()], 16, 16, true, 1, 0)
        .unwrap();
    let mut rng = stream(2, Stream::Data);
    let flipped = (0..2000)
        .filter(|_| ds.augment(&img, &mut rng).data()[0] > 0.0)
        .count();
    assert!((900..1100).contains(&flipped), "{flipped}");
}

#[test]
fn seeded_pairs_repeat_and_stay_in_range() {
    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&[
        "load_size=40",
        "crop_size=32",
        "synthetic_n=6",
        "synthetic_size=40",
    ])
    .unwrap();
    let run = || {
        let mut ds = UnpairedDataset::from_config(&cfg).unwrap();
        let mut rng = stream(cfg.seed, Stream::Data);
        (0..8)
            .map(|_| ds.next_pair(&mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    for (x, y) in &a {
        for t in [x.tensor(), y.tensor()] {
            assert_eq!(t.shape(), &[1, 3, 32, 32]);
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
    let (tx, ty) = test_split(&cfg).unwrap();
    assert_eq!(tx.len(), cfg.synthetic_test_n);
    assert_eq!(ty[0].1.dimensions(), (32, 32));
}

#[test]
fn unreadable_files_are_skipped_until_none_remain() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.png"), b"not an image").unwrap();
    assert!(load_folder(tmp.path()).is_err());
    flat(7).save(tmp.path().join("good.png")).unwrap();
    let v = load_folder(tmp.path()).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].0, "good.png");
}
