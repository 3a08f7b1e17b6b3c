//! Run configuration: one TOML file with a section per pipeline stage,
//! plus `key.path=value` overrides applied on top.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ColumnSchema;
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    #[default]
    F32,
    F64,
}

/// Encoder shape without the data-dependent sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl ArchConfig {
    fn from_preset(c: EncoderConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
        }
    }

    pub fn encoder(&self, vocab_size: usize, max_len: usize, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len,
            num_classes,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub scalar: ScalarKind,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub generator: ArchConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            scalar: ScalarKind::F32,
            teacher: ArchConfig::from_preset(EncoderConfig::teacher(1, 1, 1)),
            student: ArchConfig::from_preset(EncoderConfig::student(1, 1, 1)),
            generator: ArchConfig::from_preset(EncoderConfig::generator(1, 1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Task generated by `make-data`.
    pub synthetic: SyntheticSpec,
    /// Vocabulary size including the special tokens.
    pub max_vocab: usize,
    /// Encoded sequence length; derived from the data when unset.
    pub max_len: Option<usize>,
    pub columns: ColumnSchema,
    pub metric: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            max_vocab: 1000,
            max_len: None,
            columns: ColumnSchema::single_sentence(),
            metric: "accuracy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds shared by every variant of an ablation or sweep.
    pub seeds: Vec<u64>,
    pub rho_values: Vec<f64>,
    pub dump_n: usize,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            rho_values: crate::evalsuite::DEFAULT_RHO_VALUES.to_vec(),
            dump_n: 200,
            split: "dev".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds data generation, initialization and every training stream.
    pub seed: u64,
    pub data: DataConfig,
    pub models: ModelsConfig,
    /// Teacher pretraining.
    pub teacher: TrainConfig,
    /// Masked-LM generator pretraining.
    pub generator: TrainConfig,
    /// Student training (KD baseline and minimax).
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Parses a config file, applies overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("teacher", &self.teacher),
            ("generator", &self.generator),
            ("trainer", &self.trainer),
        ] {
            t.validate()
                .map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        for (name, a) in [
            ("teacher", &self.models.teacher),
            ("student", &self.models.student),
            ("generator", &self.models.generator),
        ] {
            a.encoder(10, 8, 2)
                .validate()
                .map_err(|e| Error::Config(format!("[models.{name}] {e}")))?;
        }
        if self.data.max_vocab <= crate::vocab::NUM_SPECIALS {
            return Err(Error::Config(
                "data.max_vocab must leave room for content tokens".into(),
            ));
        }
        if matches!(self.data.max_len, Some(l) if l < 4) {
            return Err(Error::Config("data.max_len must be at least 4".into()));
        }
        self.data
            .metric
            .parse::<crate::evalsuite::Metric>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.seeds.is_empty() || self.eval.rho_values.is_empty() {
            return Err(Error::Config(
                "eval.seeds and eval.rho_values must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Stage config with the run seed and output directory filled in.
    pub fn stage(&self, t: &TrainConfig, out: Option<&Path>) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            checkpoint_dir: out.map(Path::to_path_buf),
            ..t.clone()
        }
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal when it is
/// one and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "override {spec:?} has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

/// Applies overrides; the same key twice with different values, or a key
/// nested under another overridden key, is a conflict.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut seen: BTreeMap<Vec<String>, toml::Value> = BTreeMap::new();
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        for (other, v) in &seen {
            let nested =
                other.len() != path.len() && (other.starts_with(&path) || path.starts_with(other));
            if nested || (other == &path && v != &value) {
                return Err(Error::Config(format!(
                    "conflicting overrides for {}",
                    path.join(".")
                )));
            }
        }
        set_path(table, &path, value.clone())?;
        seen.insert(path, value);
    }
    Ok(())
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!(
                "override path {} crosses a non-table value",
                path.join(".")
            ))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
