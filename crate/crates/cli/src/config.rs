//! Layered run configuration: built-in defaults, then a TOML file, then
//! `--set key.path=value` overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use neuroseq::decode::GenerationConfig;
use neuroseq::heldout::HeldOutConfig;
use neuroseq::metrics::Aggregation;
use neuroseq::model::ModelConfig;
use neuroseq::rescore::RescoreConfig;
use neuroseq::scaling::ScalingConfig;
use neuroseq::synth::CorpusConfig;
use neuroseq::train::TrainConfig;
use neuroseq::{Error, Result};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "NEUROSEQ_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Pooled,
            n_boot: 2000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: GenerationConfig,
    pub rescore: RescoreConfig,
    pub eval: EvalConfig,
    pub heldout: HeldOutConfig,
    pub scaling: ScalingConfig,
}

impl RunConfig {
    /// Resolves the layers. `file` falls back to `$NEUROSEQ_CONFIG`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let path = file.map(Path::to_path_buf).or(env_path);
        let mut table = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a
/// bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key {key:?}: {p:?} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
