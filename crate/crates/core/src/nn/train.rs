use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::model::{cross_entropy, forward, grad, sgd_step, ModelParams, ParamVars};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// Samples with labels, ready to be batched.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(ids), ids.iter().map(|&i| self.y[i]).collect())
    }

    /// Concatenate two sets with the same feature width.
    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        if self.x.cols() != other.x.cols() {
            return Err(Error::dim("concat: feature widths differ"));
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        LabeledSet::new(Tensor::from_rows(y.len(), self.x.cols(), data)?, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, epochs: 30, batch_size: 64, seed: 0 }
    }
}

/// What the per-batch objective is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Mean cross-entropy.
    MeanCe,
    /// Square of the batch-mean cross-entropy.
    SquaredMeanCe,
    /// Mean cross-entropy plus `gamma * ||theta||_1`.
    MeanCeL1 { gamma: f64 },
}

/// Adds the objective for `spec` to a tape that already holds `vars`.
pub fn batch_objective(
    tape: &mut Tape,
    model: &ModelParams,
    vars: &ParamVars,
    x: &Tensor,
    y: &[usize],
    spec: LossSpec,
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let logits = model.0.forward_on_tape(tape, vars, xv)?;
    let ce = tape.cross_entropy(logits, y)?;
    let mean = tape.mean(ce)?;
    match spec {
        LossSpec::MeanCe => Ok(mean),
        LossSpec::SquaredMeanCe => tape.square(mean),
        LossSpec::MeanCeL1 { gamma } => l1_penalty(tape, vars, gamma, mean),
    }
}

/// `base + gamma * sum_i |theta_i|`.
pub fn l1_penalty(tape: &mut Tape, vars: &ParamVars, gamma: f64, base: Var) -> Result<Var> {
    if gamma == 0.0 {
        return Ok(base);
    }
    let mut total = base;
    for v in vars.vars() {
        let a = tape.abs_sum(v)?;
        let s = tape.scale(a, gamma)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Shuffled minibatch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    ids.shuffle(&mut rng);
    ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minibatch SGD. Returns the trained model and the mean batch objective
/// per epoch.
pub fn train(
    model: &ModelParams,
    data: &LabeledSet,
    cfg: &TrainConfig,
    spec: LossSpec,
) -> Result<(ModelParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty split"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for ids in &batches {
            let (x, y) = data.gather(ids);
            let (value, g) = grad(&model, |t, v| batch_objective(t, &model, v, &x, &y, spec))?;
            total += value;
            model = sgd_step(&model, &g, cfg.lr)?;
        }
        history.push(total / batches.len() as f64);
    }
    Ok((model, history))
}

/// Mean cross-entropy of `model` over a whole set.
pub fn mean_loss(model: &ModelParams, data: &LabeledSet) -> Result<f64> {
    let logits = forward(model, &data.x)?;
    let l = cross_entropy(&logits, &data.y)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}
