//! Accuracy splits, the threshold membership-inference score and report rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussianize::{gaussianize_losses, LossOrigin, LossVector, Temperature};
use crate::harness::{Dataset, Splits};
use crate::nn::{cross_entropy, forward, LabeledSet, ModelParams};
use crate::unlearn::{RetainSource, UnlearnMethod, UnlearnResult};

/// Label attached to the MIA column in every persisted artifact.
pub const MIA_KIND: &str = "threshold-MIA";

/// Percentage of samples whose argmax logit (lowest index on ties) equals the label.
pub fn accuracy(model: &ModelParams, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy of an empty split"));
    }
    let logits = forward(model, &data.x)?;
    let correct = (0..data.len()).filter(|&r| logits.argmax_row(r) == data.y[r]).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Best balanced accuracy (percent) of a single threshold separating
/// `members` from `non_members`, over both orientations.
pub fn best_threshold_score(members: &[f64], non_members: &[f64]) -> Result<f64> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::input("membership score needs both groups non-empty"));
    }
    let (nm, nn) = (members.len() as f64, non_members.len() as f64);
    let mut pooled: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(non_members.iter().map(|&v| (v, false)))
        .collect();
    if pooled.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::Numeric { op: "mia_score" });
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Cut positions lie between groups of equal values; a cut with `mb`
    // members and `tb` non-members below scores (mb/nm + 1 - tb/nn) / 2
    // in one orientation and its complement in the other.
    let (mut mb, mut tb) = (0usize, 0usize);
    let mut best = 0.5f64;
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                mb += 1;
            } else {
                tb += 1;
            }
            i += 1;
        }
        let a = 0.5 * (mb as f64 / nm + 1.0 - tb as f64 / nn);
        best = best.max(a).max(1.0 - a);
    }
    Ok(100.0 * best)
}

/// MIA score from per-sample CE losses: log1p, joint Gaussianization of the
/// pooled losses, then the best-threshold attack.
pub fn mia_from_losses(forget: &[f64], t: &[f64], k: Temperature) -> Result<f64> {
    if forget.is_empty() || t.is_empty() {
        return Err(Error::input("MIA needs non-empty forget and T splits"));
    }
    let pooled: Vec<f64> = forget.iter().chain(t).copied().collect();
    let z = gaussianize_losses(&LossVector::from_raw(&pooled, LossOrigin::Other), k)?.z;
    let (zf, zt) = z.split_at(forget.len());
    best_threshold_score(zf, zt)
}

pub fn mia_score(model: &ModelParams, forget: &LabeledSet, t: &LabeledSet, k: Temperature) -> Result<f64> {
    if forget.is_empty() || t.is_empty() {
        return Err(Error::input("MIA needs non-empty forget and T splits"));
    }
    let lf = cross_entropy(&forward(model, &forget.x)?, &forget.y)?;
    let lt = cross_entropy(&forward(model, &t.x)?, &t.y)?;
    mia_from_losses(&lf, &lt, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mia_score: f64,
    pub retain_acc: f64,
    pub forget_acc: f64,
    pub test_acc: f64,
    pub unlearning_seconds: f64,
    pub preprocessing_seconds: f64,
}

impl MetricsReport {
    pub fn is_valid(&self) -> bool {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        pct(self.retain_acc)
            && pct(self.forget_acc)
            && pct(self.test_acc)
            && (50.0..=100.0).contains(&self.mia_score)
            && self.unlearning_seconds.is_finite()
            && self.preprocessing_seconds.is_finite()
    }
}

/// Metrics of `model` on the raw splits, with zero timings.
pub fn evaluate_model(model: &ModelParams, dataset: &Dataset, splits: &Splits, k: Temperature) -> Result<MetricsReport> {
    let forget = dataset.subset(&splits.forget);
    let t = dataset.subset(&splits.t);
    Ok(MetricsReport {
        mia_score: mia_score(model, &forget, &t, k)?,
        retain_acc: accuracy(model, &dataset.subset(&splits.retain))?,
        forget_acc: accuracy(model, &forget)?,
        test_acc: accuracy(model, &dataset.subset(&splits.test_eval))?,
        unlearning_seconds: 0.0,
        preprocessing_seconds: 0.0,
    })
}

pub fn report(run: &UnlearnResult, dataset: &Dataset, splits: &Splits, k: Temperature) -> Result<MetricsReport> {
    Ok(MetricsReport {
        unlearning_seconds: run.unlearning_seconds,
        preprocessing_seconds: run.preprocessing_seconds,
        ..evaluate_model(&run.model, dataset, splits, k)?
    })
}

/// One results-CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: UnlearnMethod,
    pub retain_source: RetainSource,
    pub round: usize,
    pub mia: f64,
    pub retain_acc: f64,
    pub forget_acc: f64,
    pub test_acc: f64,
    /// Empty when timings are not recorded.
    pub preprocess_s: Option<f64>,
    pub unlearn_s: Option<f64>,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "method",
    "retain_source",
    "round",
    "mia",
    "retain_acc",
    "forget_acc",
    "test_acc",
    "preprocess_s",
    "unlearn_s",
    "seed",
];

impl ResultRow {
    pub fn new(
        method: UnlearnMethod,
        retain_source: RetainSource,
        round: usize,
        seed: u64,
        m: &MetricsReport,
    ) -> Self {
        Self {
            method,
            retain_source,
            round,
            mia: m.mia_score,
            retain_acc: m.retain_acc,
            forget_acc: m.forget_acc,
            test_acc: m.test_acc,
            preprocess_s: Some(m.preprocessing_seconds),
            unlearn_s: Some(m.unlearning_seconds),
            seed,
        }
    }
}

/// Serializes rows (header included) in the fixed column order.
pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}
