use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetMode {
    RandomClass,
    UniformFraction,
}

/// Which training samples to forget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetSpec {
    pub mode: ForgetMode,
    /// Class to forget; drawn from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ForgetSpec {
    pub fn class(class_id: usize) -> Self {
        Self { mode: ForgetMode::RandomClass, class_id: Some(class_id), fraction: None, seed: 0 }
    }

    pub fn uniform(fraction: f64, seed: u64) -> Self {
        Self { mode: ForgetMode::UniformFraction, class_id: None, fraction: Some(fraction), seed }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.mode {
            ForgetMode::RandomClass => {
                if let Some(c) = self.class_id {
                    if c >= classes {
                        return Err(Error::Config(format!("class_id {c} out of range for {classes} classes")));
                    }
                }
            }
            ForgetMode::UniformFraction => match self.fraction {
                Some(f) if f > 0.0 && f < 1.0 => {}
                other => return Err(Error::Config(format!("fraction must be in (0, 1), got {other:?}"))),
            },
        }
        Ok(())
    }
}

/// Sample ids for one unlearning request. `t` holds test samples whose
/// labels occur in `forget`; `test_eval` is the rest of the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
    pub t: Vec<usize>,
    pub test_eval: Vec<usize>,
}

/// Single-round splits over the train mask.
pub fn make_splits(dataset: &Dataset, spec: &ForgetSpec) -> Result<Splits> {
    let train = dataset.train_ids();
    make_splits_in_pool(dataset, &train, spec, train.len())
}

/// Splits drawn from `pool` (the current retain pool). Uniform fractions
/// are taken of `base_count`, which is either the original train size or
/// the pool size depending on the multi-round convention.
pub fn make_splits_in_pool(
    dataset: &Dataset,
    pool: &[usize],
    spec: &ForgetSpec,
    base_count: usize,
) -> Result<Splits> {
    spec.validate(dataset.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let forget: Vec<usize> = match spec.mode {
        ForgetMode::RandomClass => {
            let class = match spec.class_id {
                Some(c) => c,
                None => {
                    let present: BTreeSet<usize> = pool.iter().map(|&i| dataset.labels[i]).collect();
                    let present: Vec<usize> = present.into_iter().collect();
                    if present.is_empty() {
                        return Err(Error::input("retain pool is empty"));
                    }
                    present[rng.random_range(0..present.len())]
                }
            };
            pool.iter().copied().filter(|&i| dataset.labels[i] == class).collect()
        }
        ForgetMode::UniformFraction => {
            let f = spec.fraction.unwrap_or_default();
            let count = (f * base_count as f64).round() as usize;
            if count > pool.len() {
                return Err(Error::input(format!(
                    "cannot forget {count} samples from a pool of {}",
                    pool.len()
                )));
            }
            let mut shuffled = pool.to_vec();
            shuffled.shuffle(&mut rng);
            let mut f: Vec<usize> = shuffled[..count].to_vec();
            f.sort_unstable();
            f
        }
    };
    if forget.is_empty() {
        return Err(Error::input("forget set is empty"));
    }
    let fset: HashSet<usize> = forget.iter().copied().collect();
    let retain: Vec<usize> = pool.iter().copied().filter(|i| !fset.contains(i)).collect();

    let forget_labels: HashSet<usize> = forget.iter().map(|&i| dataset.labels[i]).collect();
    let test = dataset.test_ids();
    let mut matched: Vec<usize> =
        test.iter().copied().filter(|&i| forget_labels.contains(&dataset.labels[i])).collect();
    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x7E57));
    matched.shuffle(&mut trng);
    let half = matched.len().div_ceil(2);
    let mut t: Vec<usize> = matched[..half].to_vec();
    t.sort_unstable();
    let tset: HashSet<usize> = t.iter().copied().collect();
    let test_eval: Vec<usize> = test.into_iter().filter(|i| !tset.contains(i)).collect();
    Ok(Splits { retain, forget, t, test_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gen_gaussian_classes;

    #[test]
    fn class_forgetting_sizes() {
        let ds = gen_gaussian_classes(5, 50, 4, 5.0, 1).unwrap();
        let s = make_splits(&ds, &ForgetSpec::class(2)).unwrap();
        assert_eq!(s.forget.len(), 40);
        assert_eq!(s.retain.len() + s.forget.len(), ds.train_ids().len());
        assert!(s.retain.iter().all(|&i| ds.labels[i] != 2));
        assert!(s.t.iter().all(|&i| ds.labels[i] == 2));
        assert_eq!(s.t.len(), 5);
        assert_eq!(s.t.len() + s.test_eval.len(), ds.test_ids().len());
    }

    #[test]
    fn uniform_fraction_sizes() {
        let ds = gen_gaussian_classes(4, 30, 3, 5.0, 2).unwrap();
        let s = make_splits(&ds, &ForgetSpec::uniform(0.1, 5)).unwrap();
        assert_eq!(s.forget.len(), (0.1 * 96.0f64).round() as usize);
        let labels: HashSet<usize> = s.forget.iter().map(|&i| ds.labels[i]).collect();
        assert!(s.t.iter().all(|i| labels.contains(&ds.labels[*i])));
        assert!(make_splits(&ds, &ForgetSpec::uniform(1.5, 5)).is_err());
        assert!(make_splits(&ds, &ForgetSpec::uniform(0.001, 5)).is_err());
    }

    #[test]
    fn random_class_draws_from_seed() {
        let ds = gen_gaussian_classes(5, 20, 3, 5.0, 2).unwrap();
        let spec = ForgetSpec { mode: ForgetMode::RandomClass, class_id: None, fraction: None, seed: 11 };
        let a = make_splits(&ds, &spec).unwrap();
        assert_eq!(a, make_splits(&ds, &spec).unwrap());
        let labels: HashSet<usize> = a.forget.iter().map(|&i| ds.labels[i]).collect();
        assert_eq!(labels.len(), 1);
        assert!(make_splits(&ds, &ForgetSpec::class(9)).is_err());
    }
}
