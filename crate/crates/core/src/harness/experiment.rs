//! End-to-end runs: pretrain, split, optional condensation, unlearn and
//! evaluate, for every repeat, retain source and round.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, report, rows_to_csv, MetricsReport, ResultRow, MIA_KIND};
use crate::harness::config::{ExperimentConfig, FractionBase};
use crate::harness::{make_splits_in_pool, Dataset, ForgetSpec, Splits};
use crate::nn::{init_model_with, train, LossSpec, ModelParams};
use crate::unlearn::{run_rounds, CondenseConfig, EpochRecord, RetainSource, UnlearnConfig};

/// Seed used by repeat `repeat` for a component whose configured seed is `base`.
/// Repeat 0 keeps the configured seed.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    if repeat == 0 {
        base
    } else {
        derive_seed(base, repeat as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub metrics: MetricsReport,
    pub retain_size: usize,
    pub forget_size: usize,
    pub trail: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub retain_source: RetainSource,
    pub rounds: Vec<RoundReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub unlearn_seed: u64,
    /// Metrics of the pretrained model on the first round's splits.
    pub pretrained: Option<MetricsReport>,
    pub arms: Vec<ArmRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub version: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub mia_kind: String,
    pub fingerprint: Fingerprint,
    pub repeats: Vec<RepeatRecord>,
}

impl RunRecord {
    pub fn report_count(&self) -> usize {
        self.repeats.iter().flat_map(|r| &r.arms).map(|a| a.rounds.len()).sum()
    }

    /// Result rows ordered by repeat, arm and round.
    pub fn rows(&self) -> Vec<ResultRow> {
        let timings = self.config.output.record_timings;
        let mut rows = Vec::new();
        for rep in &self.repeats {
            for arm in &rep.arms {
                for r in &arm.rounds {
                    let mut row =
                        ResultRow::new(self.config.unlearn.method, arm.retain_source, r.round, rep.unlearn_seed, &r.metrics);
                    if !timings {
                        row.preprocess_s = None;
                        row.unlearn_s = None;
                    }
                    rows.push(row);
                }
            }
        }
        rows
    }

    pub fn errors(&self) -> Vec<String> {
        let mut out = Vec::new();
        for rep in &self.repeats {
            if let Some(e) = &rep.error {
                out.push(format!("repeat {}: {e}", rep.repeat));
            }
            for arm in &rep.arms {
                if let Some(e) = &arm.error {
                    out.push(format!("repeat {} arm {}: {e}", rep.repeat, arm.retain_source));
                }
            }
        }
        out
    }
}

/// Trains a fresh classifier on the whole train split.
pub fn pretrain(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<ModelParams> {
    let dims = cfg.model.dims(dataset.dim(), dataset.classes);
    let model = init_model_with(&dims, cfg.model.activation, seed)?;
    let tc = crate::nn::TrainConfig { seed, ..cfg.pretrain.clone() };
    Ok(train(&model, &dataset.subset(&dataset.train_ids()), &tc, LossSpec::MeanCe)?.0)
}

/// Splits for every configured round; each round draws from the previous
/// round's retain pool.
pub fn round_splits(cfg: &ExperimentConfig, dataset: &Dataset, repeat: usize) -> Result<Vec<Splits>> {
    let train = dataset.train_ids();
    let mut pool = train.clone();
    let mut out = Vec::with_capacity(cfg.rounds.len());
    for spec in &cfg.rounds {
        let spec = ForgetSpec { seed: repeat_seed(spec.seed, repeat), ..spec.clone() };
        let base = match cfg.fraction_base {
            FractionBase::Original => train.len(),
            FractionBase::Current => pool.len(),
        };
        let s = make_splits_in_pool(dataset, &pool, &spec, base)?;
        pool = s.retain.clone();
        out.push(s);
    }
    Ok(out)
}

fn run_arm(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    pretrained: &ModelParams,
    splits: &[Splits],
    source: RetainSource,
    repeat: usize,
) -> Result<Vec<RoundReport>> {
    let ucfg = UnlearnConfig {
        retain_source: source,
        seed: repeat_seed(cfg.unlearn.seed, repeat),
        ..cfg.unlearn.clone()
    };
    let mut ccfg: CondenseConfig = cfg.condense();
    ccfg.seed = repeat_seed(ccfg.seed, repeat);
    ccfg.blend.seed = repeat_seed(ccfg.blend.seed, repeat);
    let results = run_rounds(pretrained, dataset, splits, &ucfg, &ccfg)?;
    results
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(round, (res, s))| {
            Ok(RoundReport {
                round,
                metrics: report(res, dataset, s, ucfg.temperature)?,
                retain_size: s.retain.len(),
                forget_size: s.forget.len(),
                trail: res.trail.clone(),
            })
        })
        .collect()
}

fn run_repeat(cfg: &ExperimentConfig, dataset: &Dataset, repeat: usize, sources: &[RetainSource]) -> RepeatRecord {
    let unlearn_seed = repeat_seed(cfg.unlearn.seed, repeat);
    let prepared = pretrain(cfg, dataset, repeat_seed(cfg.pretrain.seed, repeat))
        .and_then(|m| round_splits(cfg, dataset, repeat).map(|s| (m, s)));
    let (model, splits) = match prepared {
        Ok(v) => v,
        Err(e) => {
            return RepeatRecord { repeat, unlearn_seed, pretrained: None, arms: vec![], error: Some(e.to_string()) }
        }
    };
    let pretrained = evaluate_model(&model, dataset, &splits[0], cfg.unlearn.temperature).ok();
    let arms = sources
        .par_iter()
        .map(|&source| match run_arm(cfg, dataset, &model, &splits, source, repeat) {
            Ok(rounds) => ArmRecord { retain_source: source, rounds, error: None },
            Err(e) => ArmRecord { retain_source: source, rounds: vec![], error: Some(e.to_string()) },
        })
        .collect();
    RepeatRecord { repeat, unlearn_seed, pretrained, arms, error: None }
}

/// Runs `cfg` for each retain source in `sources`. Repeats and arms run in
/// parallel; the record is ordered deterministically.
pub fn run_sources(cfg: &ExperimentConfig, sources: &[RetainSource]) -> Result<RunRecord> {
    cfg.validate()?;
    let dataset = cfg.data.load()?;
    let repeats = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(cfg, &dataset, r, sources))
        .collect();
    Ok(RunRecord {
        config: cfg.clone(),
        mia_kind: MIA_KIND.to_string(),
        fingerprint: Fingerprint {
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        },
        repeats,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_sources(cfg, &[cfg.unlearn.retain_source])
}

/// The seven-arm retain-source matrix.
pub fn ablate(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_sources(cfg, &RetainSource::ALL)
}

#[derive(Serialize)]
struct TrailRow {
    repeat: usize,
    retain_source: RetainSource,
    round: usize,
    epoch: usize,
    mean_objective: f64,
    elapsed_s: Option<f64>,
}

pub fn trail_csv(record: &RunRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rep in &record.repeats {
        for arm in &rep.arms {
            for r in &arm.rounds {
                for e in &r.trail {
                    w.serialize(TrailRow {
                        repeat: rep.repeat,
                        retain_source: arm.retain_source,
                        round: r.round,
                        epoch: e.epoch,
                        mean_objective: e.mean_objective,
                        elapsed_s: record.config.output.record_timings.then_some(e.elapsed_seconds),
                    })?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

/// Writes `results.csv`, `run_record.json` and (when enabled) `trail.csv`
/// into `dir`. Returns the results path.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let results = dir.join("results.csv");
    std::fs::write(&results, rows_to_csv(&record.rows())?)?;
    std::fs::write(dir.join("run_record.json"), serde_json::to_string_pretty(record)?)?;
    if record.config.output.trail {
        std::fs::write(dir.join("trail.csv"), trail_csv(record)?)?;
    }
    Ok(results)
}
