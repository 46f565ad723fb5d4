//! Differentiable Gaussianization of loss samples and the Gaussian-kernel
//! MMD between two transformed samples.
//!
//! A loss vector is pushed through a temperature-`K` soft empirical CDF,
//! clamped away from {0, 1}, and mapped through the standard normal
//! quantile. For continuous inputs and large `K` the result is close to an
//! i.i.d. standard normal sample regardless of the input distribution.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// Soft CDF values are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]` before the probit.
pub const CLAMP_EPS: f64 = 1e-4;

pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(k: f64) -> Result<Self> {
        if k > 0.0 && k.is_finite() {
            Ok(Self(k))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {k}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrigin {
    Forget,
    TestSubset,
    Other,
}

/// Per-sample transformed losses `log(1 + L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub origin: LossOrigin,
}

impl LossVector {
    /// Applies `log1p` to raw per-sample losses.
    pub fn from_raw(raw: &[f64], origin: LossOrigin) -> Self {
        Self { values: raw.iter().map(|v| v.ln_1p()).collect(), origin }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSample {
    pub z: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Q_i = (1/N) sum_j sigmoid(K (x_i - x_j))`.
pub fn soft_cdf_values(x: &[f64], k: f64) -> Vec<f64> {
    let n = x.len() as f64;
    x.iter()
        .map(|&xi| x.iter().map(|&xj| sigmoid(k * (xi - xj))).sum::<f64>() / n)
        .collect()
}

/// Vector-Jacobian product of [`soft_cdf_values`]: returns `J^T g`.
pub(crate) fn soft_cdf_vjp(x: &[f64], k: f64, g: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|m| {
            let mut acc = 0.0;
            for j in 0..x.len() {
                if j == m {
                    continue;
                }
                let s = sigmoid(k * (x[m] - x[j]));
                acc += s * (1.0 - s) * (g[m] - g[j]);
            }
            k * acc / n
        })
        .collect()
}

pub fn soft_cdf(x: &[f64], k: Temperature) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::input("soft_cdf of an empty sample"));
    }
    Ok(soft_cdf_values(x, k.get()))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile by safeguarded Newton iteration on the
/// erf-based CDF. Inputs outside `(0, 1)` map to `-inf` / `+inf`.
pub fn probit(q: f64) -> f64 {
    if q <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if q >= 1.0 {
        return f64::INFINITY;
    }
    if q == 0.5 {
        return 0.0;
    }
    // odd symmetry keeps probit(1-q) == -probit(q) exactly
    if q > 0.5 {
        return -probit_lower(1.0 - q);
    }
    probit_lower(q)
}

fn probit_lower(q: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    // rough start from the logistic approximation
    let mut x = (-(1.0 / q - 1.0).ln() / 1.702).clamp(lo, hi);
    for _ in 0..200 {
        let f = normal_cdf(x) - q;
        if f == 0.0 {
            return x;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = normal_pdf(x);
        let mut next = x - f / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// `z = probit(clamp(soft_cdf(losses, K)))`.
pub fn gaussianize_losses(losses: &LossVector, k: Temperature) -> Result<TransformedSample> {
    let q = soft_cdf(&losses.values, k)?;
    Ok(TransformedSample {
        z: q.into_iter().map(|v| probit(v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))).collect(),
    })
}

/// Tape version of [`gaussianize_losses`] for a column of losses.
pub fn gaussianize_on_tape(tape: &mut Tape, losses: Var, k: Temperature) -> Result<Var> {
    let q = tape.soft_cdf(losses, k.get())?;
    tape.clamped_probit(q, CLAMP_EPS)
}

fn kernel(a: f64, b: f64) -> f64 {
    let d = a - b;
    (-0.5 * d * d).exp()
}

fn mean_kernel(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in a {
        for &y in b {
            s += kernel(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased MMD^2 with bandwidth-1 Gaussian kernel.
pub(crate) fn mmd_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("mmd of an empty sample"));
    }
    let v = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
    // clip tiny negative round-off so MMD >= 0 holds exactly
    Ok(v.max(0.0))
}

/// Partial derivatives of the biased MMD^2 with respect to each sample.
pub(crate) fn mmd_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (a.len() as f64, b.len() as f64);
    // d k(x, y) / dx = -(x - y) k(x, y)
    let dk = |x: f64, y: f64| -(x - y) * kernel(x, y);
    let da = a
        .iter()
        .map(|&x| {
            let own: f64 = a.iter().map(|&y| dk(x, y)).sum();
            let cross: f64 = b.iter().map(|&y| dk(x, y)).sum();
            2.0 * own / (n * n) - 2.0 * cross / (n * m)
        })
        .collect();
    let db = b
        .iter()
        .map(|&x| {
            let own: f64 = b.iter().map(|&y| dk(x, y)).sum();
            let cross: f64 = a.iter().map(|&y| dk(x, y)).sum();
            2.0 * own / (m * m) - 2.0 * cross / (n * m)
        })
        .collect();
    (da, db)
}

pub fn mmd(zf: &TransformedSample, zt: &TransformedSample) -> Result<f64> {
    mmd_values(&zf.z, &zt.z)
}

/// `mmd(gaussianize(a), gaussianize(b))` evaluated on a fresh tape, with
/// gradients for both raw loss vectors. Mostly useful for checks.
pub fn mmd_of_losses_with_grad(a: &[f64], b: &[f64], k: Temperature) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let va = tape.param(Tensor::column(a.to_vec()));
    let vb = tape.param(Tensor::column(b.to_vec()));
    let za = gaussianize_on_tape(&mut tape, va, k)?;
    let zb = gaussianize_on_tape(&mut tape, vb, k)?;
    let m = tape.mmd(za, zb)?;
    let g = tape.backward(m)?;
    Ok((tape.scalar(m), g.wrt(&tape, va).into_data(), g.wrt(&tape, vb).into_data()))
}
