//! Unlearning methods: retraining, catastrophic forgetting (plain retain
//! fine-tuning), L1-sparse fine-tuning, and their accelerated variants
//! driven by the A-AMU objective
//!
//! ```text
//! (mean CE on a retain batch)^2
//!   + lambda * MMD(gauss(log1p CE_forget), gauss(log1p CE_T))
//!   + gamma_l1 * ||theta||_1
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{build_reduced_retain, condense_free, condense_groups, BlendConfig, BlendGroup};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::gaussianize::{gaussianize_on_tape, Temperature};
use crate::harness::{Dataset, Splits};
use crate::nn::{
    batch_objective, epoch_batches, grad, init_model_with, l1_penalty, sample_extractor, sgd_step,
    Gradient, LabeledSet, LossSpec, ModelParams, ParamVars, Tape, Tensor, Var,
};
use crate::partition::{partition_dataset, sample_forget};

/// Smallest forget / T batch accepted by the accelerated methods.
pub const MIN_BATCH_F: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Retrain,
    Cf,
    ACf,
    L1Sparse,
    AL1,
}

impl UnlearnMethod {
    pub const ALL: [UnlearnMethod; 5] =
        [UnlearnMethod::Retrain, UnlearnMethod::Cf, UnlearnMethod::ACf, UnlearnMethod::L1Sparse, UnlearnMethod::AL1];

    pub fn as_str(self) -> &'static str {
        match self {
            UnlearnMethod::Retrain => "retrain",
            UnlearnMethod::Cf => "cf",
            UnlearnMethod::ACf => "a_cf",
            UnlearnMethod::L1Sparse => "l1_sparse",
            UnlearnMethod::AL1 => "a_l1",
        }
    }

    pub fn is_accelerated(self) -> bool {
        matches!(self, UnlearnMethod::ACf | UnlearnMethod::AL1)
    }

    pub fn uses_l1(self) -> bool {
        matches!(self, UnlearnMethod::L1Sparse | UnlearnMethod::AL1)
    }
}

impl fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnlearnMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// What the retain-side loss is trained on. The seven variants are the
/// condensation strategies compared by the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainSource {
    /// Raw retain set.
    Full,
    /// Every cluster condensed (forget members excluded).
    FullCondensed,
    FreeRaw,
    FreeCondensed,
    ResidualRaw,
    ResidualCondensed,
    /// Condensed free clusters plus raw residual samples.
    Reduced,
}

impl RetainSource {
    /// In ablation-arm order.
    pub const ALL: [RetainSource; 7] = [
        RetainSource::Full,
        RetainSource::FullCondensed,
        RetainSource::FreeRaw,
        RetainSource::FreeCondensed,
        RetainSource::ResidualRaw,
        RetainSource::ResidualCondensed,
        RetainSource::Reduced,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetainSource::Full => "full",
            RetainSource::FullCondensed => "full_condensed",
            RetainSource::FreeRaw => "free_raw",
            RetainSource::FreeCondensed => "free_condensed",
            RetainSource::ResidualRaw => "residual_raw",
            RetainSource::ResidualCondensed => "residual_condensed",
            RetainSource::Reduced => "reduced",
        }
    }

    /// 1-based arm number.
    pub fn arm(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap() + 1
    }

    pub fn needs_partition(self) -> bool {
        self != RetainSource::Full
    }
}

impl fmt::Display for RetainSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetainSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown retain source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub epochs: usize,
    pub lr: f64,
    pub batch_retain: usize,
    pub batch_f: usize,
    pub lambda: f64,
    pub temperature: Temperature,
    pub gamma_l1: f64,
    pub retain_source: RetainSource,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: UnlearnMethod::ACf,
            epochs: 2,
            lr: 0.05,
            batch_retain: 64,
            batch_f: 64,
            lambda: 1.0,
            temperature: Temperature::default(),
            gamma_l1: 1e-4,
            retain_source: RetainSource::Full,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    /// Defaults for `method`: 10 epochs for the plain fine-tuning methods,
    /// 2 for the accelerated ones, 30 for retraining.
    pub fn for_method(method: UnlearnMethod) -> Self {
        let epochs = match method {
            UnlearnMethod::Retrain => 30,
            UnlearnMethod::Cf | UnlearnMethod::L1Sparse => 10,
            UnlearnMethod::ACf | UnlearnMethod::AL1 => 2,
        };
        Self { method, epochs, ..Self::default() }
    }

    /// `lambda` as applied: zero for the non-accelerated methods.
    pub fn effective_lambda(&self) -> f64 {
        if self.method.is_accelerated() {
            self.lambda
        } else {
            0.0
        }
    }

    /// `gamma_l1` as applied: zero unless the method has an L1 term.
    pub fn effective_gamma(&self) -> f64 {
        if self.method.uses_l1() {
            self.gamma_l1
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_retain == 0 {
            return Err(Error::Config("batch_retain must be positive".into()));
        }
        if self.lambda < 0.0 || self.gamma_l1 < 0.0 {
            return Err(Error::Config("lambda and gamma_l1 must be non-negative".into()));
        }
        if self.method.is_accelerated() && self.batch_f < MIN_BATCH_F {
            return Err(Error::Config(format!("batch_f must be at least {MIN_BATCH_F}")));
        }
        Ok(())
    }
}

/// Read access to a labeled sample collection. Unlearning loops only touch
/// data through this trait, which lets tests trace every read.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>);
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for LabeledSet {
    fn len(&self) -> usize {
        LabeledSet::len(self)
    }
    fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        LabeledSet::gather(self, ids)
    }
}

/// Everything one unlearning run reads.
pub struct UnlearnInputs<'a> {
    pub retain: &'a dyn SampleSource,
    pub forget: &'a dyn SampleSource,
    pub t: &'a dyn SampleSource,
    pub preprocessing_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_objective: f64,
    /// Unlearning wall clock at the end of this epoch.
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnResult {
    pub model: ModelParams,
    pub trail: Vec<EpochRecord>,
    pub preprocessing_seconds: f64,
    pub unlearning_seconds: f64,
}

impl UnlearnResult {
    pub fn total_seconds(&self) -> f64 {
        self.preprocessing_seconds + self.unlearning_seconds
    }
}

#[allow(clippy::too_many_arguments)]
fn add_mmd_term(
    tape: &mut Tape,
    model: &ModelParams,
    vars: &ParamVars,
    forget: (&Tensor, &[usize]),
    t: (&Tensor, &[usize]),
    lambda: f64,
    k: Temperature,
    base: Var,
) -> Result<Var> {
    let mut z = Vec::with_capacity(2);
    for (x, y) in [forget, t] {
        if y.len() < 2 {
            return Err(Error::input("forget and T batches need at least 2 samples each"));
        }
        let xv = tape.constant(x.clone());
        let logits = model.0.forward_on_tape(tape, vars, xv)?;
        let ce = tape.cross_entropy(logits, y)?;
        let l = tape.log1p(ce)?;
        z.push(gaussianize_on_tape(tape, l, k)?);
    }
    let m = tape.mmd(z[0], z[1])?;
    let m = tape.scale(m, lambda)?;
    tape.add(base, m)
}

/// Batches for one A-AMU evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AmuBatches<'a> {
    pub retain: (&'a Tensor, &'a [usize]),
    pub forget: (&'a Tensor, &'a [usize]),
    pub t: (&'a Tensor, &'a [usize]),
}

fn check_amu_batches(b: &AmuBatches<'_>) -> Result<()> {
    if b.retain.1.is_empty() {
        return Err(Error::input("retain batch is empty"));
    }
    if b.forget.1.len() != b.t.1.len() {
        return Err(Error::input(format!(
            "forget and T batches differ in size ({} vs {})",
            b.forget.1.len(),
            b.t.1.len()
        )));
    }
    if b.forget.1.len() < 2 {
        return Err(Error::input("forget and T batches need at least 2 samples each"));
    }
    Ok(())
}

/// Builds the A-AMU objective on `tape`.
pub fn a_amu_on_tape(
    tape: &mut Tape,
    model: &ModelParams,
    vars: &ParamVars,
    batches: &AmuBatches<'_>,
    lambda: f64,
    k: Temperature,
    gamma_l1: f64,
) -> Result<Var> {
    check_amu_batches(batches)?;
    let (rx, ry) = batches.retain;
    let main = batch_objective(tape, model, vars, rx, ry, LossSpec::SquaredMeanCe)?;
    let with_mmd = if lambda != 0.0 {
        add_mmd_term(tape, model, vars, batches.forget, batches.t, lambda, k, main)?
    } else {
        main
    };
    l1_penalty(tape, vars, gamma_l1, with_mmd)
}

/// Value of the A-AMU objective.
pub fn a_amu_objective(
    model: &ModelParams,
    batches: &AmuBatches<'_>,
    lambda: f64,
    k: Temperature,
    gamma_l1: f64,
) -> Result<f64> {
    Ok(a_amu_objective_grad(model, batches, lambda, k, gamma_l1)?.0)
}

/// Value and parameter gradient of the A-AMU objective.
pub fn a_amu_objective_grad(
    model: &ModelParams,
    batches: &AmuBatches<'_>,
    lambda: f64,
    k: Temperature,
    gamma_l1: f64,
) -> Result<(f64, Gradient)> {
    grad(model, |tape, vars| a_amu_on_tape(tape, model, vars, batches, lambda, k, gamma_l1))
}

/// `size` indices from `0..n`: distinct when possible, with replacement
/// when the pool is smaller than the batch.
fn draw_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    if n >= size {
        sample_indices(rng, n, size).into_vec()
    } else {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    }
}

pub fn run_unlearning(pretrained: &ModelParams, inputs: &UnlearnInputs<'_>, cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    run_unlearning_observed(pretrained, inputs, cfg, &mut |_, _| {})
}

/// Like [`run_unlearning`], calling `observer(epoch, model)` after every
/// epoch. Observer time is excluded from the recorded unlearning time.
pub fn run_unlearning_observed(
    pretrained: &ModelParams,
    inputs: &UnlearnInputs<'_>,
    cfg: &UnlearnConfig,
    observer: &mut dyn FnMut(usize, &ModelParams),
) -> Result<UnlearnResult> {
    cfg.validate()?;
    if inputs.retain.is_empty() {
        return Err(Error::input("retain source is empty"));
    }
    let lambda = cfg.effective_lambda();
    let gamma = cfg.effective_gamma();
    if lambda > 0.0 && (inputs.forget.is_empty() || inputs.t.is_empty()) {
        return Err(Error::input("accelerated methods need non-empty forget and T splits"));
    }

    let mut model = match cfg.method {
        UnlearnMethod::Retrain => {
            init_model_with(&pretrained.dims(), pretrained.hidden_activation(), derive_seed(cfg.seed, 0x2E72))?
        }
        _ => pretrained.clone(),
    };
    let mut mia_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xF0F0));
    let mut trail = Vec::with_capacity(cfg.epochs);
    let mut elapsed = 0.0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = epoch_batches(inputs.retain.len(), cfg.batch_retain, cfg.seed, epoch);
        let mut total = 0.0;
        for ids in &batches {
            let (x, y) = inputs.retain.gather(ids);
            let (value, g) = match cfg.method {
                UnlearnMethod::Retrain | UnlearnMethod::Cf => {
                    grad(&model, |t, v| batch_objective(t, &model, v, &x, &y, LossSpec::MeanCe))?
                }
                UnlearnMethod::L1Sparse => grad(&model, |t, v| {
                    batch_objective(t, &model, v, &x, &y, LossSpec::MeanCeL1 { gamma })
                })?,
                UnlearnMethod::ACf | UnlearnMethod::AL1 if lambda == 0.0 => grad(&model, |t, v| {
                    let main = batch_objective(t, &model, v, &x, &y, LossSpec::SquaredMeanCe)?;
                    l1_penalty(t, v, gamma, main)
                })?,
                UnlearnMethod::ACf | UnlearnMethod::AL1 => {
                    let fi = draw_batch(&mut mia_rng, inputs.forget.len(), cfg.batch_f);
                    let ti = draw_batch(&mut mia_rng, inputs.t.len(), cfg.batch_f);
                    let (fx, fy) = inputs.forget.gather(&fi);
                    let (tx, ty) = inputs.t.gather(&ti);
                    let b = AmuBatches { retain: (&x, &y), forget: (&fx, &fy), t: (&tx, &ty) };
                    a_amu_objective_grad(&model, &b, lambda, cfg.temperature, gamma)?
                }
            };
            total += value;
            model = sgd_step(&model, &g, cfg.lr)?;
        }
        elapsed += started.elapsed().as_secs_f64();
        trail.push(EpochRecord { epoch: epoch + 1, mean_objective: total / batches.len() as f64, elapsed_seconds: elapsed });
        observer(epoch + 1, &model);
    }
    Ok(UnlearnResult { model, trail, preprocessing_seconds: inputs.preprocessing_seconds, unlearning_seconds: elapsed })
}

/// Partitioning and condensation settings used when a retain source needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondenseConfig {
    pub k: usize,
    /// Seed of the single extractor used for partitioning.
    pub seed: u64,
    pub blend: BlendConfig,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0, blend: BlendConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedRetain {
    pub source: RetainSource,
    pub train: LabeledSet,
    pub partition_seconds: f64,
    pub condense_seconds: f64,
}

impl PreparedRetain {
    pub fn preprocessing_seconds(&self) -> f64 {
        self.partition_seconds + self.condense_seconds
    }
}

/// Materialises the training set for `source` from `splits`. The partition
/// is computed over `retain ∪ forget`.
pub fn prepare_retain(
    dataset: &Dataset,
    splits: &Splits,
    source: RetainSource,
    cfg: &CondenseConfig,
) -> Result<PreparedRetain> {
    if source == RetainSource::Full {
        if splits.retain.is_empty() {
            return Err(Error::input("retain split is empty"));
        }
        return Ok(PreparedRetain {
            source,
            train: dataset.subset(&splits.retain),
            partition_seconds: 0.0,
            condense_seconds: 0.0,
        });
    }
    let started = Instant::now();
    let mut pool: Vec<usize> = splits.retain.iter().chain(&splits.forget).copied().collect();
    pool.sort_unstable();
    let ext = sample_extractor(dataset.dim(), cfg.seed)?;
    let partition = partition_dataset(dataset, &pool, &ext, cfg.k, cfg.seed)?;
    let split = sample_forget(&partition, &splits.forget)?;
    let partition_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let forget: HashSet<usize> = splits.forget.iter().copied().collect();
    let raw = |ids: &[usize]| -> Result<LabeledSet> {
        if ids.is_empty() {
            return Err(Error::input(format!("retain source `{source}` is empty for this split")));
        }
        Ok(dataset.subset(ids))
    };
    let groups_for = |cluster_ids: &[usize]| -> Vec<BlendGroup> {
        cluster_ids
            .iter()
            .filter_map(|&id| partition.cluster(id))
            .map(|c| BlendGroup {
                cluster_id: c.id,
                label: c.class_label,
                member_ids: c.member_ids.iter().copied().filter(|m| !forget.contains(m)).collect(),
            })
            .filter(|g| !g.member_ids.is_empty())
            .collect()
    };
    let condensed = |groups: Vec<BlendGroup>| -> Result<LabeledSet> {
        condense_groups(&groups, dataset, &cfg.blend)?
            .to_labeled()
            .ok_or_else(|| Error::input(format!("retain source `{source}` is empty for this split")))
    };
    let train = match source {
        RetainSource::Full => unreachable!(),
        RetainSource::FreeRaw => raw(&split.free_member_ids(&partition))?,
        RetainSource::ResidualRaw => raw(&split.residual_image_ids)?,
        RetainSource::FreeCondensed => condensed(groups_for(&split.free_cluster_ids))?,
        RetainSource::ResidualCondensed => condensed(groups_for(&split.touched_cluster_ids))?,
        RetainSource::FullCondensed => {
            let all: Vec<usize> = partition.clusters.iter().map(|c| c.id).collect();
            condensed(groups_for(&all))?
        }
        RetainSource::Reduced => {
            let c = condense_free(&partition, &split, dataset, &cfg.blend)?;
            build_reduced_retain(&c, &split.residual_image_ids, &splits.forget, dataset)?
        }
    };
    Ok(PreparedRetain { source, train, partition_seconds, condense_seconds: started.elapsed().as_secs_f64() })
}

/// Sequential unlearning: the output model of each round is the input of
/// the next. Forget sets must be pairwise disjoint.
pub fn run_rounds(
    pretrained: &ModelParams,
    dataset: &Dataset,
    rounds: &[Splits],
    cfg: &UnlearnConfig,
    condense: &CondenseConfig,
) -> Result<Vec<UnlearnResult>> {
    let mut seen = HashSet::new();
    for (r, s) in rounds.iter().enumerate() {
        for &f in &s.forget {
            if !seen.insert(f) {
                return Err(Error::input(format!("sample {f} is forgotten in more than one round (round {r})")));
            }
        }
    }
    let mut model = pretrained.clone();
    let mut out = Vec::with_capacity(rounds.len());
    for (r, splits) in rounds.iter().enumerate() {
        let prepared = prepare_retain(dataset, splits, cfg.retain_source, condense)?;
        let forget = dataset.subset(&splits.forget);
        let t = dataset.subset(&splits.t);
        let inputs = UnlearnInputs {
            retain: &prepared.train,
            forget: &forget,
            t: &t,
            preprocessing_seconds: prepared.preprocessing_seconds(),
        };
        let round_cfg = UnlearnConfig { seed: derive_seed(cfg.seed, r as u64), ..cfg.clone() };
        let res = run_unlearning(&model, &inputs, &round_cfg)?;
        model = res.model.clone();
        out.push(res);
    }
    Ok(out)
}
