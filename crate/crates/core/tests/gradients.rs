use rand::Rng;
use rand_distr::StandardNormal;

use sndcr_core::blocks::{dct_filters, FcaConfig};
use sndcr_core::gradcheck::check;
use sndcr_core::graph::{Graph, Var};
use sndcr_core::rng::{keyed, Stream};
use sndcr_core::{Result, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = keyed(seed, Stream::Init, 7);
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let p = g.constant(randn(g.shape(y), seed));
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

fn assert_grad(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = check(inputs, 1e-5, 40, f).unwrap();
    assert!(r.rel_error < 1e-3, "{name}: {r:?}");
    assert!(r.analytic_norm > 0.0, "{name}: zero gradient");
}

#[test]
fn convolution_family() {
    let x = randn(&[2, 3, 6, 6], 1);
    assert_grad(
        "conv2d",
        &[x.clone(), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, 9)
        },
    );
    assert_grad(
        "conv2d stride 2 k4",
        &[x.clone(), randn(&[2, 3, 4, 4], 4)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            weighted_sum(g, y, 10)
        },
    );
    assert_grad(
        "conv_transpose2d",
        &[x.clone(), randn(&[3, 2, 3, 3], 5), randn(&[2], 6)],
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            weighted_sum(g, y, 11)
        },
    );
    assert_grad("reflect_pad", std::slice::from_ref(&x), |g, v| {
        let y = g.reflect_pad(v[0], 3)?;
        weighted_sum(g, y, 12)
    });
    assert_grad("max_pool2", &[x], |g, v| {
        let y = g.max_pool2(v[0])?;
        weighted_sum(g, y, 13)
    });
}

#[test]
fn normalization_family() {
    let x = randn(&[2, 3, 4, 5], 20);
    assert_grad(
        "instance_norm affine",
        &[x.clone(), randn(&[3], 21), randn(&[3], 22)],
        |g, v| {
            let y = g.instance_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            weighted_sum(g, y, 23)
        },
    );
    assert_grad("instance_norm plain", std::slice::from_ref(&x), |g, v| {
        let y = g.instance_norm(v[0], None, None, 1e-5)?;
        weighted_sum(g, y, 24)
    });
    let w = randn(&[4, 6], 25);
    let mut u: Vec<f64> = randn(&[4], 26).into_data();
    let mut vv: Vec<f64> = randn(&[6], 27).into_data();
    for _ in 0..30 {
        sndcr_core::blocks::power_iteration(w.data(), 4, 6, &mut u, &mut vv);
    }
    assert_grad("spectral_scale", &[w], |g, v| {
        let y = g.spectral_scale(v[0], &u, &vv)?;
        weighted_sum(g, y, 28)
    });
    assert_grad("l2_normalize_rows", &[randn(&[5, 4], 29)], |g, v| {
        let y = g.l2_normalize_rows(v[0])?;
        weighted_sum(g, y, 30)
    });
}

#[test]
fn attention_and_projection_family() {
    let x = randn(&[2, 4, 4, 4], 40);
    let basis = dct_filters(4, 4, 4, &FcaConfig::lowest(2)).unwrap();
    assert_grad("dct_pool", std::slice::from_ref(&x), |g, v| {
        let y = g.dct_pool(v[0], &basis)?;
        weighted_sum(g, y, 41)
    });
    assert_grad("channel_scale", &[x.clone(), randn(&[2, 4], 42)], |g, v| {
        let y = g.channel_scale(v[0], v[1])?;
        weighted_sum(g, y, 43)
    });
    assert_grad("gather_positions", std::slice::from_ref(&x), |g, v| {
        let y = g.gather_positions(v[0], 1, &[3, 0, 15, 7])?;
        weighted_sum(g, y, 44)
    });
    assert_grad(
        "linear",
        &[randn(&[3, 5], 45), randn(&[2, 5], 46), randn(&[2], 47)],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 48)
        },
    );
    assert_grad("gram", std::slice::from_ref(&x), |g, v| {
        let y = g.gram(v[0])?;
        weighted_sum(g, y, 49)
    });
    assert_grad(
        "slice and cat",
        &[x.clone(), randn(&[1, 4, 4, 4], 50)],
        |g, v| {
            let c = g.cat_batch(&[v[0], v[1]])?;
            let y = g.slice_batch(c, 1, 2)?;
            weighted_sum(g, y, 51)
        },
    );
    assert_grad(
        "elementwise chain",
        &[randn(&[3, 4], 52), randn(&[3, 4], 53)],
        |g, v| {
            let a = g.tanh(v[0]);
            let b = g.sigmoid(v[1]);
            let c = g.mul(a, b)?;
            let d = g.leaky_relu(c, 0.2);
            let e = g.softplus(d);
            let f = g.div(e, b)?;
            let f = g.add(f, a)?;
            let h = g.square(f);
            let h = g.add_scalar(h, 1.0);
            let s = g.sqrt(h);
            let t = g.frob_norm(s);
            let m = g.mean(s);
            g.add(t, m)
        },
    );
}
