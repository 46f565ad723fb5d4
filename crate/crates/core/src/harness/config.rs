//! Experiment configuration: one TOML document with dotted keys such as
//! `unlearn.lr = 0.05`, plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blend::BlendConfig;
use crate::error::{Error, Result};
use crate::harness::{gen_gaussian_classes, load_dataset, Dataset, ForgetSpec};
use crate::nn::{Activation, TrainConfig};
use crate::unlearn::{CondenseConfig, UnlearnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load this dataset file instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, classes: 5, per_class: 1000, dim: 8, separation: 20.0, seed: 0 }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.path {
            Some(p) => load_dataset(p),
            None => gen_gaussian_classes(self.classes, self.per_class, self.dim, self.separation, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Tanh }
    }
}

impl ModelConfig {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input).chain(self.hidden.iter().copied()).chain(std::iter::once(classes)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0 }
    }
}

/// Base of a uniform forget fraction in later rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FractionBase {
    #[default]
    Original,
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write wall-clock cells; off keeps result files bit-reproducible.
    pub record_timings: bool,
    /// Also write the per-epoch objective trail.
    pub trail: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), record_timings: false, trail: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub partition: PartitionConfig,
    pub blend: BlendConfig,
    pub unlearn: UnlearnConfig,
    pub rounds: Vec<ForgetSpec>,
    pub fraction_base: FractionBase,
    pub repeats: usize,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            partition: PartitionConfig::default(),
            blend: BlendConfig::default(),
            unlearn: UnlearnConfig::default(),
            rounds: vec![ForgetSpec::class(0)],
            fraction_base: FractionBase::Original,
            repeats: 1,
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.rounds.is_empty() {
            return Err(Error::Config("at least one round is required".into()));
        }
        if self.model.activation == Activation::Identity {
            return Err(Error::Config("model.activation must be tanh or relu".into()));
        }
        if self.partition.k == 0 {
            return Err(Error::Config("partition.k must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain needs a positive lr and batch size".into()));
        }
        self.blend.validate()?;
        self.unlearn.validate()
    }

    pub fn condense(&self) -> CondenseConfig {
        CondenseConfig { k: self.partition.k, seed: self.partition.seed, blend: self.blend.clone() }
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unlearn::{RetainSource, UnlearnMethod};

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "repeats = 2\nunlearn.method = \"cf\"\nunlearn.epochs = 10\npartition.k = 4\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.repeats, 2);
        assert_eq!(c.unlearn.method, UnlearnMethod::Cf);
        assert_eq!(c.partition.k, 4);
        assert_eq!(c.data, DataConfig::default());

        let c = ExperimentConfig::load(
            None,
            &["unlearn.retain_source=reduced".into(), "blend.steps = 5".into(), "output.dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.unlearn.retain_source, RetainSource::Reduced);
        assert_eq!(c.blend.steps, 5);
        assert_eq!(c.output.dir, PathBuf::from("out/x"));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("repeats = 0").is_err());
        assert!(ExperimentConfig::from_toml("unlearn.method = \"scrub\"").is_err());
        assert!(ExperimentConfig::from_toml("unlearn.temperature = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::load(None, &["no_equals".into()]).is_err());
    }

    #[test]
    fn rounds_as_array_of_tables() {
        let text = "[[rounds]]\nmode = \"uniform_fraction\"\nfraction = 0.1\nseed = 1\n\n[[rounds]]\nmode = \"uniform_fraction\"\nfraction = 0.1\nseed = 2\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.rounds.len(), 2);
        assert_eq!(c.rounds[1], ForgetSpec::uniform(0.1, 2));
    }
}
