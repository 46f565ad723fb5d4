//! Blend condensation: each cluster is replaced by one normalised weighted
//! average of its members, with the weights fitted so that the blend's
//! features match the cluster's mean features under a pool of random
//! extractors.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::{Dataset, SplitTag};
use crate::nn::tape::softplus;
use crate::nn::{feature_extract, sample_extractor, ExtractorParams, LabeledSet, Tensor};
use crate::partition::{Partition, SplitResult};

/// Backtracking halvings allowed per descent step.
pub const MAX_HALVINGS: usize = 10;

/// `softplus^-1(1) = ln(e - 1)`: raw value giving unit blend weight.
pub fn uniform_raw() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    pub raw: Vec<f64>,
}

impl BlendWeights {
    pub fn uniform(n: usize) -> Self {
        Self { raw: vec![uniform_raw(); n] }
    }

    pub fn from_omega(omega: &[f64]) -> Result<Self> {
        if omega.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::input("blend weights must be positive"));
        }
        // softplus^-1(w) = ln(e^w - 1)
        Ok(Self { raw: omega.iter().map(|w| w.exp_m1().ln()).collect() })
    }

    pub fn omega(&self) -> Vec<f64> {
        self.raw.iter().map(|&a| softplus(a)).collect()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    pub steps: usize,
    pub lr: f64,
    pub pool_size: usize,
    pub resample_pool: bool,
    pub seed: u64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 0.5, pool_size: 4, resample_pool: false, seed: 0 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("blend needs pool_size >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Weighted average of the rows of `images` (`n x d`), as a `1 x d` tensor.
pub fn blend_image(images: &Tensor, weights: &BlendWeights) -> Result<Tensor> {
    if images.rows() != weights.len() {
        return Err(Error::input(format!(
            "{} images but {} blend weights",
            images.rows(),
            weights.len()
        )));
    }
    let omega = weights.omega();
    let total: f64 = omega.iter().sum();
    let d = images.cols();
    let mut out = vec![0.0; d];
    for (j, w) in omega.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(images.row_slice(j)) {
            *o += w * v;
        }
    }
    Tensor::from_rows(1, d, out.into_iter().map(|v| v / total).collect())
}

/// Cluster mean features under each extractor in the pool.
fn mean_features(images: &Tensor, pool: &[ExtractorParams]) -> Result<Vec<Vec<f64>>> {
    pool.iter()
        .map(|ext| {
            let f = feature_extract(ext, images)?;
            let n = f.rows() as f64;
            Ok((0..f.cols())
                .map(|c| (0..f.rows()).map(|r| f.get(r, c)).sum::<f64>() / n)
                .collect())
        })
        .collect()
}

/// softplus(r) and its derivative sigmoid(r), sharing one exponential.
fn softplus_and_slope(r: f64) -> (f64, f64) {
    if r > 30.0 {
        (r, 1.0)
    } else {
        let e = r.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

/// Blend weights and the blended row for `raw`; returns the weight total.
fn blend_into(raw: &[f64], images: &Tensor, slopes: &mut Vec<f64>, blended: &mut Vec<f64>) -> f64 {
    let d = images.cols();
    blended.clear();
    blended.resize(d, 0.0);
    slopes.clear();
    let mut total = 0.0;
    for (i, &r) in raw.iter().enumerate() {
        let (w, s) = softplus_and_slope(r);
        slopes.push(s);
        total += w;
        for (b, x) in blended.iter_mut().zip(images.row_slice(i)) {
            *b += w * x;
        }
    }
    for b in blended.iter_mut() {
        *b /= total;
    }
    total
}

/// DM loss evaluation with reusable buffers.
struct BlendObjective<'a> {
    images: &'a Tensor,
    pool: &'a [ExtractorParams],
    means: &'a [Vec<f64>],
    trace: Vec<Vec<f64>>,
    slopes: Vec<f64>,
    blended: Vec<f64>,
    gb: Vec<f64>,
}

impl<'a> BlendObjective<'a> {
    fn new(images: &'a Tensor, pool: &'a [ExtractorParams], means: &'a [Vec<f64>]) -> Self {
        Self { images, pool, means, trace: Vec::new(), slopes: Vec::new(), blended: Vec::new(), gb: Vec::new() }
    }

    fn check(&self, raw: &[f64]) -> Result<()> {
        if self.images.rows() != raw.len() {
            return Err(Error::input(format!(
                "{} images but {} blend weights",
                self.images.rows(),
                raw.len()
            )));
        }
        Ok(())
    }

    fn loss(&mut self, raw: &[f64]) -> Result<f64> {
        self.check(raw)?;
        blend_into(raw, self.images, &mut self.slopes, &mut self.blended);
        let mut total = 0.0;
        for (ext, mean) in self.pool.iter().zip(self.means) {
            total += ext.0.row_sq_dist(&self.blended, mean, &mut self.trace);
        }
        let v = total / self.pool.len() as f64;
        if !v.is_finite() {
            return Err(Error::Numeric { op: "blend_loss" });
        }
        Ok(v)
    }

    // The blend is a single image, so the chain omega -> blend -> features
    // is differentiated in closed form without a tape.
    fn loss_grad(&mut self, raw: &[f64], grad: &mut Vec<f64>) -> Result<f64> {
        self.check(raw)?;
        let total_w = blend_into(raw, self.images, &mut self.slopes, &mut self.blended);
        self.gb.clear();
        self.gb.resize(self.blended.len(), 0.0);
        let mut loss = 0.0;
        for (ext, mean) in self.pool.iter().zip(self.means) {
            loss += ext.0.row_sq_dist_grad(&self.blended, mean, &mut self.trace, &mut self.gb);
        }
        let scale = 1.0 / self.pool.len() as f64;
        loss *= scale;
        let gb_dot_b: f64 = self.gb.iter().zip(&self.blended).map(|(g, b)| g * b).sum();
        grad.clear();
        for (i, s) in self.slopes.iter().enumerate() {
            let gi: f64 = self.images.row_slice(i).iter().zip(&self.gb).map(|(x, g)| x * g).sum();
            grad.push((gi - gb_dot_b) * scale / total_w * s);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { op: "blend_loss" });
        }
        Ok(loss)
    }
}

/// `(1/P) sum_p || mean_j psi_p(I_j) - psi_p(blend(I, w)) ||^2`.
pub fn blend_loss(weights: &BlendWeights, images: &Tensor, pool: &[ExtractorParams]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::input("extractor pool is empty"));
    }
    let means = mean_features(images, pool)?;
    BlendObjective::new(images, pool, &means).loss(&weights.raw)
}

/// Blend loss and its gradient with respect to the raw weights.
pub fn blend_loss_grad(
    weights: &BlendWeights,
    images: &Tensor,
    pool: &[ExtractorParams],
) -> Result<(f64, Vec<f64>)> {
    if pool.is_empty() {
        return Err(Error::input("extractor pool is empty"));
    }
    let means = mean_features(images, pool)?;
    let mut g = Vec::new();
    let l = BlendObjective::new(images, pool, &means).loss_grad(&weights.raw, &mut g)?;
    Ok((l, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedBlend {
    pub weights: BlendWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The fixed extractor pool for one condensation run.
pub fn extractor_pool(input_dim: usize, cfg: &BlendConfig) -> Result<Vec<ExtractorParams>> {
    (0..cfg.pool_size)
        .map(|p| sample_extractor(input_dim, derive_seed(cfg.seed, 0xB1E0_0000 + p as u64)))
        .collect()
}

/// Gradient descent on the raw blend weights from the uniform blend.
///
/// Every step backtracks (halving the step size up to [`MAX_HALVINGS`]
/// times) until the loss does not increase, so the recorded loss never
/// rises. With `resample_pool` each step uses one freshly drawn extractor
/// and the best iterate on the fixed pool is returned.
pub fn optimize_blend(
    images: &Tensor,
    pool: &[ExtractorParams],
    cfg: &BlendConfig,
    stream: u64,
) -> Result<OptimizedBlend> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::input("extractor pool is empty"));
    }
    let means = mean_features(images, pool)?;
    let mut obj = BlendObjective::new(images, pool, &means);
    let mut raw = BlendWeights::uniform(images.rows()).raw;
    let mut trial = raw.clone();
    let mut g = Vec::with_capacity(raw.len());
    let mut tg = Vec::with_capacity(raw.len());
    if !cfg.resample_pool {
        // Each trial is evaluated with its gradient, which becomes the next
        // step's direction when accepted.
        let initial_loss = obj.loss_grad(&raw, &mut g)?;
        let mut current = initial_loss;
        for _ in 0..cfg.steps {
            if g.iter().all(|&v| v == 0.0) {
                break;
            }
            let mut lr = cfg.lr;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for ((t, a), d) in trial.iter_mut().zip(&raw).zip(&g) {
                    *t = a - lr * d;
                }
                let l = obj.loss_grad(&trial, &mut tg)?;
                if l <= current {
                    std::mem::swap(&mut raw, &mut trial);
                    std::mem::swap(&mut g, &mut tg);
                    current = l;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        return Ok(OptimizedBlend { weights: BlendWeights { raw }, initial_loss, final_loss: current });
    }

    let initial_loss = obj.loss(&raw)?;
    let mut best = (initial_loss, raw.clone());
    for step in 0..cfg.steps {
        let fresh = vec![sample_extractor(images.cols(), derive_seed(stream, step as u64))?];
        let fresh_means = mean_features(images, &fresh)?;
        let mut step_obj = BlendObjective::new(images, &fresh, &fresh_means);
        let current = step_obj.loss_grad(&raw, &mut g)?;
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut lr = cfg.lr;
        for _ in 0..=MAX_HALVINGS {
            for ((t, a), d) in trial.iter_mut().zip(&raw).zip(&g) {
                *t = a - lr * d;
            }
            if step_obj.loss(&trial)? <= current {
                std::mem::swap(&mut raw, &mut trial);
                break;
            }
            lr *= 0.5;
        }
        let l = obj.loss(&raw)?;
        if l <= best.0 {
            best = (l, raw.clone());
        }
    }
    let (final_loss, raw) = best;
    let weights = BlendWeights { raw };
    Ok(OptimizedBlend { weights, initial_loss, final_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub image: Tensor,
    pub label: usize,
    pub cluster_id: usize,
    pub weights: BlendWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CondensedSet {
    pub prototypes: Vec<Prototype>,
}

impl CondensedSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Prototypes as a labeled set; `None` when empty.
    pub fn to_labeled(&self) -> Option<LabeledSet> {
        let first = self.prototypes.first()?;
        let d = first.image.cols();
        let data = self.prototypes.iter().flat_map(|p| p.image.data().iter().copied()).collect();
        Some(LabeledSet {
            x: Tensor::raw(self.len(), d, data),
            y: self.prototypes.iter().map(|p| p.label).collect(),
        })
    }

    /// Prototypes in the dataset file layout, all tagged train.
    pub fn to_dataset(&self, classes: usize) -> Result<Dataset> {
        let set = self.to_labeled().ok_or_else(|| Error::input("no prototypes to store"))?;
        let n = set.len();
        Dataset::new(set.x, set.y, classes, vec![SplitTag::Train; n])
    }
}

/// A group of sample ids to be blended into one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendGroup {
    pub cluster_id: usize,
    pub label: usize,
    pub member_ids: Vec<usize>,
}

/// Condenses each group independently; per-group streams are derived from
/// `(cfg.seed, cluster_id)`.
pub fn condense_groups(groups: &[BlendGroup], dataset: &Dataset, cfg: &BlendConfig) -> Result<CondensedSet> {
    cfg.validate()?;
    let pool = extractor_pool(dataset.dim(), cfg)?;
    let prototypes: Result<Vec<Prototype>> = groups
        .par_iter()
        .filter(|g| !g.member_ids.is_empty())
        .map(|g| {
            let images = dataset.samples.select_rows(&g.member_ids);
            let opt = optimize_blend(&images, &pool, cfg, derive_seed(cfg.seed, g.cluster_id as u64))?;
            Ok(Prototype {
                image: blend_image(&images, &opt.weights)?,
                label: g.label,
                cluster_id: g.cluster_id,
                weights: opt.weights,
                initial_loss: opt.initial_loss,
                final_loss: opt.final_loss,
            })
        })
        .collect();
    Ok(CondensedSet { prototypes: prototypes? })
}

/// One prototype per free cluster.
pub fn condense_free(
    partition: &Partition,
    split: &SplitResult,
    dataset: &Dataset,
    cfg: &BlendConfig,
) -> Result<CondensedSet> {
    let groups = split
        .free_cluster_ids
        .iter()
        .map(|&id| {
            let c = partition
                .cluster(id)
                .ok_or_else(|| Error::Consistency(format!("free cluster {id} not in partition")))?;
            Ok(BlendGroup { cluster_id: id, label: c.class_label, member_ids: c.member_ids.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    condense_groups(&groups, dataset, cfg)
}

/// Condensed prototypes followed by the residual samples, copied verbatim.
pub fn build_reduced_retain(
    condensed: &CondensedSet,
    residual_ids: &[usize],
    forget_ids: &[usize],
    dataset: &Dataset,
) -> Result<LabeledSet> {
    let forget: HashSet<usize> = forget_ids.iter().copied().collect();
    if let Some(bad) = residual_ids.iter().find(|i| forget.contains(i)) {
        return Err(Error::Consistency(format!("residual id {bad} is also a forget id")));
    }
    let residual = (!residual_ids.is_empty()).then(|| dataset.subset(residual_ids));
    match (condensed.to_labeled(), residual) {
        (Some(c), Some(r)) => c.concat(&r),
        (Some(c), None) => Ok(c),
        (None, Some(r)) => Ok(r),
        (None, None) => Err(Error::input("reduced retain set is empty")),
    }
}
