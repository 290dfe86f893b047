use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use sndcr_core::blocks::{
    dct_basis, instance_norm, power_iteration, spectral_normalize, Fca, FcaConfig, SnResBlock,
    SpectralNormState,
};
use sndcr_core::gradcheck::check;
use sndcr_core::graph::Graph;
use sndcr_core::params::{Binder, ParamStore};
use sndcr_core::rng::{keyed, Stream};
use sndcr_core::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = keyed(seed, Stream::Init, 3);
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn top_singular(w: &[f64], rows: usize, cols: usize) -> f64 {
    DMatrix::from_row_slice(rows, cols, w)
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

#[test]
fn power_iteration_matches_svd_on_random_8x8() {
    for seed in 0..10 {
        let w = randn(&[8, 8], seed);
        let mut st = SpectralNormState::random(8, 8, &mut keyed(seed, Stream::Init, 9));
        st.n_power_iterations = 50;
        let out = spectral_normalize(&w, &st).unwrap();
        let sigma = top_singular(w.data(), 8, 8);
        assert!(
            ((out.sigma - sigma) / sigma).abs() < 1e-3,
            "seed {seed}: {} vs {sigma}",
            out.sigma
        );
        let u_norm: f64 = out.state.u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((u_norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn normalized_weight_has_unit_norm_after_twenty_rounds() {
    let mut rng = keyed(4, Stream::Init, 0);
    let mut store = ParamStore::new();
    let blk = SnResBlock::new(&mut store, "b", 6, true, &mut rng);
    for conv in blk.sn_convs() {
        conv.power_iterate(&mut store, 20);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let w = conv.weight_var(&mut g, &mut b).unwrap();
        let s = top_singular(g.value(w).data(), 6, 6 * 9);
        assert!((0.99..=1.01).contains(&s), "sigma {s}");
    }
}

#[test]
fn power_iteration_error_is_non_increasing_for_spd() {
    for seed in 0..5 {
        let a = randn(&[6, 6], 100 + seed);
        let m = DMatrix::from_row_slice(6, 6, a.data());
        let spd = &m * m.transpose() + DMatrix::identity(6, 6) * 0.1;
        let w: Vec<f64> = spd.transpose().iter().copied().collect();
        let sigma = top_singular(&w, 6, 6);
        let mut st = SpectralNormState::random(6, 6, &mut keyed(seed, Stream::Init, 1));
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            power_iteration(&w, 6, 6, &mut st.u, &mut st.v);
            let est: f64 = (0..6)
                .map(|r| st.u[r] * (0..6).map(|c| w[r * 6 + c] * st.v[c]).sum::<f64>())
                .sum();
            let err = (est - sigma).abs();
            assert!(err <= prev + 1e-12, "seed {seed}: {err} after {prev}");
            prev = err;
        }
    }
}

#[test]
fn resblock_with_zero_weights_is_identity() {
    let mut rng = keyed(1, Stream::Init, 0);
    let mut store = ParamStore::new();
    let blk = SnResBlock::new(&mut store, "b", 4, true, &mut rng);
    for conv in blk.sn_convs() {
        store.get_mut(conv.conv.weight).data_mut().fill(0.0);
    }
    let x = randn(&[1, 4, 8, 8], 2);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let xv = g.constant(x.clone());
    let y = blk.forward(&mut g, &mut b, xv).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn resblock_preserves_shape_and_rejects_channel_mismatch() {
    let mut rng = keyed(1, Stream::Init, 0);
    let mut store = ParamStore::new();
    let blk = SnResBlock::new(&mut store, "b", 256, true, &mut rng);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let x = g.constant(Tensor::zeros(&[1, 256, 64, 64]));
    let y = blk.forward(&mut g, &mut b, x).unwrap();
    assert_eq!(g.shape(y), &[1, 256, 64, 64]);
    let bad = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
    assert!(blk.forward(&mut g, &mut b, bad).is_err());
}

#[test]
fn resblock_gradients_match_finite_differences() {
    let mut rng = keyed(5, Stream::Init, 0);
    let mut store = ParamStore::new();
    let blk = SnResBlock::new(&mut store, "b", 3, true, &mut rng);
    let w1 = store.get(blk.conv1.conv.weight).clone();
    let w2 = store.get(blk.conv2.conv.weight).clone();
    let x = randn(&[1, 3, 5, 5], 6);
    let p = randn(&[1, 3, 5, 5], 7);
    let r = check(&[x, w1, w2], 1e-5, 60, |g, v| {
        let mut b = Binder::frozen(&store);
        b.bind(blk.conv1.conv.weight, v[1]);
        b.bind(blk.conv2.conv.weight, v[2]);
        let y = blk.forward(g, &mut b, v[0])?;
        let pv = g.constant(p.clone());
        let m = g.mul(y, pv)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(r.rel_error < 1e-3, "{r:?}");
}

fn fca_for(c: usize, h: usize, cfg: FcaConfig, seed: u64) -> (ParamStore, Fca) {
    let mut store = ParamStore::new();
    let fca = Fca::new(
        &mut store,
        "f",
        c,
        h,
        h,
        cfg,
        &mut keyed(seed, Stream::Init, 0),
    )
    .unwrap();
    (store, fca)
}

#[test]
fn fca_gates_lie_strictly_inside_unit_interval() {
    let (store, fca) = fca_for(32, 8, FcaConfig::lowest(16), 3);
    for seed in 0..5 {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let x = g.constant(randn(&[2, 32, 8, 8], seed).map(|v| v * 10.0));
        let (y, gates) = fca.forward_with_gates(&mut g, &mut b, x).unwrap();
        assert_eq!(g.shape(y), &[2, 32, 8, 8]);
        assert!(g.value(gates).data().iter().all(|&s| s > 0.0 && s < 1.0));
    }
}

#[test]
fn dc_only_fca_is_squeeze_excitation() {
    let (c, h) = (16, 4);
    let (store, fca) = fca_for(c, h, FcaConfig::dc_only(4, 4), 8);
    let x = randn(&[1, c, h, h], 9);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let xv = g.constant(x.clone());
    let (y, _) = fca.forward_with_gates(&mut g, &mut b, xv).unwrap();

    // SE: global average pool scaled by the DC constant √(HW), MLP, sigmoid
    let hw = (h * h) as f64;
    let pooled: Vec<f64> = (0..c)
        .map(|ch| x.data()[ch * h * h..(ch + 1) * h * h].iter().sum::<f64>() / hw * hw.sqrt())
        .collect();
    let w1 = store.get(fca.fc1);
    let w2 = store.get(fca.fc2);
    let hidden = w1.shape()[0];
    let z: Vec<f64> = (0..hidden)
        .map(|j| {
            (0..c)
                .map(|k| w1.data()[j * c + k] * pooled[k])
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    for ch in 0..c {
        let logit: f64 = (0..hidden).map(|j| w2.data()[ch * hidden + j] * z[j]).sum();
        let s = 1.0 / (1.0 + (-logit).exp());
        for p in 0..h * h {
            let want = x.data()[ch * h * h + p] * s;
            assert!((g.value(y).data()[ch * h * h + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dct_coefficient_of_impulse_matches_double_sum() {
    let (c, h) = (2, 8);
    let cfg = FcaConfig {
        channel_groups: 2,
        dct_frequencies: vec![(1, 0), (1, 0)],
        reduction_ratio: 2,
    };
    let filters = sndcr_core::blocks::dct_filters(c, h, h, &cfg).unwrap();
    let mut x = Tensor::zeros(&[1, c, h, h]);
    x.data_mut()[3 * h + 5] = 2.5;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pooled = g.dct_pool(xv, &filters).unwrap();
    let pi = std::f64::consts::PI;
    let mut want = 0.0;
    for yy in 0..h {
        for xx in 0..h {
            let v = x.data()[yy * h + xx];
            let by = (pi * (2 * yy + 1) as f64 / (2 * h) as f64).cos() * (2.0 / h as f64).sqrt();
            want += v * by * (1.0 / h as f64).sqrt();
        }
    }
    assert!((g.value(pooled).data()[0] - want).abs() < 1e-12);
    assert!((dct_basis(1, 3, h) * dct_basis(0, 5, h) * 2.5 - want).abs() < 1e-12);
}

#[test]
fn fca_rejects_other_spatial_sizes() {
    let (store, fca) = fca_for(16, 8, FcaConfig::lowest(16), 1);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
    assert!(fca.forward(&mut g, &mut b, x).is_err());
}

#[test]
fn instance_norm_examples() {
    let beta = Tensor::new(&[1], vec![0.7]).unwrap();
    let gamma = Tensor::new(&[1], vec![3.0]).unwrap();
    let y = instance_norm(
        &Tensor::full(&[1, 1, 4, 4], 5.0),
        1e-5,
        Some((&gamma, &beta)),
    )
    .unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let pm = Tensor::from_fn(&[1, 1, 2, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
    let y = instance_norm(&pm, 1e-5, None).unwrap();
    for (a, b) in y.data().iter().zip(pm.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn instance_norm_standardizes_each_channel(seed in 0u64..10_000, scale in 0.5f64..50.0, shift in -20.0f64..20.0) {
        let x = randn(&[2, 3, 6, 5], seed).map(|v| v * scale + shift);
        let y = instance_norm(&x, 1e-5, None).unwrap();
        for plane in y.data().chunks(30) {
            let m = plane.iter().sum::<f64>() / 30.0;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 30.0;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn spectral_estimate_never_exceeds_svd(seed in 0u64..10_000, rows in 2usize..7, cols in 2usize..7) {
        let w = randn(&[rows, cols], seed);
        let mut st = SpectralNormState::random(rows, cols, &mut keyed(seed, Stream::Init, 2));
        st.n_power_iterations = 3;
        let out = spectral_normalize(&w, &st).unwrap();
        prop_assert!(out.sigma <= top_singular(w.data(), rows, cols) * (1.0 + 1e-12));
        let u: f64 = out.state.u.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((u - 1.0).abs() < 1e-6);
    }
}
