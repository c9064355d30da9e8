//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only evaluates the forward pass; it never touches the backward
//! sweep it is used to check.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::classifier::PixelClassifier;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::unet::{extract_pixel_features, UNet, UNetConfig};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, floor)`.
    pub rel_error: f64,
}

/// Compares `d f(x) / dx` from the tape with central differences of step `h`.
///
/// `f` receives a fresh graph and the variable holding `x`; it must return a
/// scalar node.
pub fn check<F>(x: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.gradient(loss, xv)?;

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut numeric = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

/// Reduces any tensor node to a scalar through a fixed random projection
/// `sum(out * r)`, so vector-valued ops can be checked with [`check`].
pub fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let r = g.constant(weights.clone());
    let p = g.mul(out, r)?;
    g.sum(p)
}

/// One randomised gradient check of a differentiable op with respect to one
/// of its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub trial: fn(&mut ChaCha8Rng) -> Result<f64>,
}

const H: f64 = 1e-5;

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), rng)
}

/// Checks `sum(op(x) * r)` for a fixed random projection `r`.
fn projected<F>(x: &Tensor, rng: &mut ChaCha8Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let shape = g.value(out).shape().to_vec();
    let r = randn(&shape, rng);
    Ok(check(x, H, |g, v| {
        let out = f(g, v)?;
        project(g, out, &r)
    })?
    .rel_error)
}

/// Every differentiable op, each differentiable input checked separately.
pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, trial: fn(&mut ChaCha8Rng) -> Result<f64>) -> OpCase {
        OpCase { name, trial }
    }
    vec![
        case("matmul/a", |rng| {
            let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            let (a, b) = (randn(&[m, k], rng), randn(&[k, n], rng));
            projected(&a, rng, |g, v| {
                let bv = g.constant(b.clone());
                g.matmul(v, bv)
            })
        }),
        case("matmul/b", |rng| {
            let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            let (a, b) = (randn(&[m, k], rng), randn(&[k, n], rng));
            projected(&b, rng, |g, v| {
                let av = g.constant(a.clone());
                g.matmul(av, v)
            })
        }),
        case("conv2d/x", |rng| conv_case(rng, 0)),
        case("conv2d/w", |rng| conv_case(rng, 1)),
        case("conv2d/b", |rng| conv_case(rng, 2)),
        case("group_norm/x", |rng| norm_case(rng, 0)),
        case("group_norm/gamma", |rng| norm_case(rng, 1)),
        case("group_norm/beta", |rng| norm_case(rng, 2)),
        case("silu", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 5)], rng);
            projected(&x, rng, |g, v| g.act(v, Activation::Silu))
        }),
        case("relu", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 5)], rng);
            projected(&x, rng, |g, v| g.act(v, Activation::Relu))
        }),
        case("tanh", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 5)], rng);
            projected(&x, rng, |g, v| g.act(v, Activation::Tanh))
        }),
        case("add", |rng| binary_case(rng, |g, a, b| g.add(a, b))),
        case("sub", |rng| binary_case(rng, |g, a, b| g.sub(b, a))),
        case("mul", |rng| binary_case(rng, |g, a, b| g.mul(a, b))),
        case("mul/square", |rng| {
            let x = randn(&[dims(rng, 1, 6)], rng);
            projected(&x, rng, |g, v| g.mul(v, v))
        }),
        case("scale", |rng| {
            let x = randn(&[dims(rng, 1, 6)], rng);
            let c: f64 = rng.random_range(-3.0..3.0);
            projected(&x, rng, move |g, v| g.scale(v, c))
        }),
        case("add_bias/x", |rng| bias_case(rng, true)),
        case("add_bias/b", |rng| bias_case(rng, false)),
        case("add_channel/x", |rng| channel_case(rng, true)),
        case("add_channel/v", |rng| channel_case(rng, false)),
        case("concat", |rng| {
            let (n, h, w) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let x = randn(&[n, dims(rng, 1, 3), h, w], rng);
            let other = randn(&[n, dims(rng, 1, 3), h, w], rng);
            projected(&x, rng, |g, v| {
                let o = g.constant(other.clone());
                let vv = g.scale(v, 2.0)?;
                g.concat(&[o, v, vv])
            })
        }),
        case("upsample_bilinear", |rng| {
            let (h, w) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let (oh, ow) = (dims(rng, 1, 9), dims(rng, 1, 9));
            let x = randn(&[dims(rng, 1, 2), dims(rng, 1, 2), h, w], rng);
            projected(&x, rng, move |g, v| g.upsample_bilinear(v, oh, ow))
        }),
        case("softmax_cross_entropy", |rng| {
            let (m, k) = (dims(rng, 1, 5), dims(rng, 1, 5));
            let x = randn(&[m, k], rng).scale(2.0);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            Ok(check(&x, H, |g, v| g.softmax_cross_entropy(v, &labels))?.rel_error)
        }),
        case("mean", |rng| {
            let x = randn(&[dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            Ok(check(&x, H, |g, v| {
                let sq = g.mul(v, v)?;
                g.mean(sq)
            })?
            .rel_error)
        }),
        case("sum", |rng| {
            let x = randn(&[dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            Ok(check(&x, H, |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            })?
            .rel_error)
        }),
        case("gather_pixels", |rng| {
            let (n, c, h, w) = (
                dims(rng, 1, 2),
                dims(rng, 1, 3),
                dims(rng, 1, 3),
                dims(rng, 1, 3),
            );
            let x = randn(&[n, c, h, w], rng);
            let p = dims(rng, 1, 6);
            let pixels: Vec<usize> = (0..p).map(|_| rng.random_range(0..n * h * w)).collect();
            projected(&x, rng, move |g, v| g.gather_pixels(v, &pixels))
        }),
        case("reshape", |rng| {
            let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let x = randn(&[a, b], rng);
            projected(&x, rng, move |g, v| {
                let r = g.reshape(v, &[b * a])?;
                g.mul(r, r)
            })
        }),
    ]
}

fn conv_case(rng: &mut ChaCha8Rng, wrt: usize) -> Result<f64> {
    let k = *[1usize, 3].get(rng.random_range(0..2)).expect("two sizes");
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let (h, w) = (dims(rng, k.max(2), 5), dims(rng, k.max(2), 5));
    let x = randn(&[n, ci, h, w], rng);
    let wt = randn(&[co, ci, k, k], rng);
    let b = randn(&[co], rng);
    let inputs = [x, wt, b];
    let probe = inputs[wrt].clone();
    projected(&probe, rng, move |g, v| {
        let mut vars = [None; 3];
        for (i, t) in inputs.iter().enumerate() {
            vars[i] = Some(if i == wrt { v } else { g.constant(t.clone()) });
        }
        let [x, w, b] = vars.map(|o| o.expect("filled"));
        g.conv2d(x, w, Some(b), stride, pad)
    })
}

fn norm_case(rng: &mut ChaCha8Rng, wrt: usize) -> Result<f64> {
    let groups = dims(rng, 1, 2);
    let c = groups * dims(rng, 1, 2);
    let x = randn(&[dims(rng, 1, 2), c, dims(rng, 1, 3), dims(rng, 2, 3)], rng);
    let gamma = randn(&[c], rng);
    let beta = randn(&[c], rng);
    let inputs = [x, gamma, beta];
    let probe = inputs[wrt].clone();
    projected(&probe, rng, move |g, v| {
        let mut vars = [None; 3];
        for (i, t) in inputs.iter().enumerate() {
            vars[i] = Some(if i == wrt { v } else { g.constant(t.clone()) });
        }
        let [x, ga, be] = vars.map(|o| o.expect("filled"));
        g.group_norm(x, ga, be, groups)
    })
}

fn binary_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 4)];
    let x = randn(&shape, rng);
    let other = randn(&shape, rng);
    projected(&x, rng, move |g, v| {
        let o = g.constant(other.clone());
        op(g, v, o)
    })
}

fn bias_case(rng: &mut ChaCha8Rng, wrt_x: bool) -> Result<f64> {
    let (n, c, s) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    let x = randn(&[n, c, s], rng);
    let b = randn(&[c], rng);
    let (probe, other) = if wrt_x { (x, b) } else { (b, x) };
    projected(&probe, rng, move |g, v| {
        let o = g.constant(other.clone());
        if wrt_x {
            g.add_bias(v, o)
        } else {
            g.add_bias(o, v)
        }
    })
}

fn channel_case(rng: &mut ChaCha8Rng, wrt_x: bool) -> Result<f64> {
    let (n, c) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let x = randn(&[n, c, dims(rng, 1, 3), dims(rng, 1, 3)], rng);
    let off = randn(&[n, c], rng);
    let (probe, other) = if wrt_x { (x, off) } else { (off, x) };
    projected(&probe, rng, move |g, v| {
        let o = g.constant(other.clone());
        if wrt_x {
            g.add_channel(v, o)
        } else {
            g.add_channel(o, v)
        }
    })
}

/// Tiny U-Net plus pixel classifier used by [`composition_trial`].
pub fn composition_fixture(seed: u64) -> Result<(UNet, PixelClassifier)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = UNetConfig {
        image_size: 4,
        channels: 2,
        base_width: 4,
        channel_mult: vec![1, 2],
        decoder_block_ids: vec![0, 1],
        time_embed_dim: 8,
        groups: 2,
    };
    let net = UNet::new(cfg, &mut rng)?;
    // Perturb every parameter so that zero-initialised pieces also carry signal.
    let params = net
        .params
        .iter()
        .map(|(k, v)| {
            let noise = Tensor::randn(v.shape().to_vec(), &mut rng).scale(0.3);
            (
                k.clone(),
                Arc::new(v.axpby(1.0, &noise, 1.0).expect("same shape")),
            )
        })
        .collect();
    let net = UNet { params, ..net };
    let clf = PixelClassifier::new(net.cfg.feature_dim(), [8, 4], 3, &mut rng)?;
    Ok((net, clf))
}

/// Gradient of the masked segmentation loss of `G(features(UNet(x, t)))` with
/// respect to `x`, for a random input, timestep, map and mask.
pub fn composition_trial(net: &UNet, clf: &PixelClassifier, rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = net.cfg.image_size;
    let x = randn(&[1, net.cfg.channels, s, s], rng);
    let t = rng.random_range(1..=1000);
    let mut pixels: Vec<usize> = (0..s * s).filter(|_| rng.random_bool(0.5)).collect();
    if pixels.is_empty() {
        pixels.push(rng.random_range(0..s * s));
    }
    let labels: Vec<usize> = pixels
        .iter()
        .map(|_| rng.random_range(0..clf.n_classes))
        .collect();
    let cfg = net.cfg.clone();
    Ok(check(&x, 1e-6, |g, v| {
        let out = net.forward(g, v, &[t], false)?;
        let f = extract_pixel_features(g, &out.decoder, &cfg)?;
        let rows = g.gather_pixels(f, &pixels)?;
        let (logits, _) = clf.forward(g, rows, false)?;
        let seg = g.softmax_cross_entropy(logits, &labels)?;
        // Keep the noise head on the path as well.
        let e = g.mean(out.eps)?;
        g.add(seg, e)
    })?
    .rel_error)
}
