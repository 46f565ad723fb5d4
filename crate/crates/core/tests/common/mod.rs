//! Independent oracles shared by the integration tests. Nothing here calls
//! into the tape; forward passes and statistics are recomputed by hand.
#![allow(dead_code, clippy::needless_range_loop)]

use amulab_core::nn::{Activation, Mlp, ModelParams, Tensor};
use statrs::distribution::{ContinuousCDF, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Entries below this magnitude on both sides are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

pub fn flatten_model(m: &ModelParams) -> Vec<f64> {
    m.0.layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
        .collect()
}

pub fn with_flat(m: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut out = m.clone();
    let mut at = 0;
    for l in &mut out.0.layers {
        for v in l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()) {
            *v = flat[at];
            at += 1;
        }
    }
    assert_eq!(at, flat.len());
    out
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
        Activation::Identity => v,
    }
}

/// Row-by-row forward pass with plain loops.
pub fn oracle_mlp(m: &Mlp, x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            let mut h = x.row_slice(r).to_vec();
            for (layer, &a) in m.layers.iter().zip(&m.activations) {
                let (nin, nout) = (layer.weight.rows(), layer.weight.cols());
                let mut next = layer.bias.data().to_vec();
                for i in 0..nin {
                    for o in 0..nout {
                        next[o] += h[i] * layer.weight.get(i, o);
                    }
                }
                h = next.into_iter().map(|v| act(a, v)).collect();
            }
            h
        })
        .collect()
}

pub fn oracle_forward(m: &ModelParams, x: &Tensor) -> Vec<Vec<f64>> {
    oracle_mlp(&m.0, x)
}

pub fn oracle_ce(m: &ModelParams, x: &Tensor, y: &[usize]) -> Vec<f64> {
    oracle_forward(m, x)
        .iter()
        .zip(y)
        .map(|(z, &label)| {
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - z[label]
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_mmd(a: &[f64], b: &[f64]) -> f64 {
    let k = |x: f64, y: f64| (-(x - y) * (x - y) / 2.0).exp();
    let mut aa = 0.0;
    for &x in a {
        for &y in a {
            aa += k(x, y);
        }
    }
    let mut bb = 0.0;
    for &x in b {
        for &y in b {
            bb += k(x, y);
        }
    }
    let mut ab = 0.0;
    for &x in a {
        for &y in b {
            ab += k(x, y);
        }
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    aa / (n * n) + bb / (m * m) - 2.0 * ab / (n * m)
}

/// `probit(clamp(soft_cdf(log1p(raw))))` using statrs for the quantile.
pub fn oracle_gaussianize(raw: &[f64], k: f64) -> Vec<f64> {
    let x: Vec<f64> = raw.iter().map(|v| v.ln_1p()).collect();
    let n = x.len() as f64;
    let std = Normal::standard();
    x.iter()
        .map(|&xi| {
            let q = x.iter().map(|&xj| 1.0 / (1.0 + (-k * (xi - xj)).exp())).sum::<f64>() / n;
            std.inverse_cdf(q.clamp(1e-4, 1.0 - 1e-4))
        })
        .collect()
}

pub fn accuracy_pct(m: &ModelParams, x: &Tensor, y: &[usize]) -> f64 {
    let logits = oracle_forward(m, x);
    let hits = logits
        .iter()
        .zip(y)
        .filter(|(z, &l)| {
            let best = z.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count();
    100.0 * hits as f64 / y.len() as f64
}
