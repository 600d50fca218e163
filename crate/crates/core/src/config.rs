//! Run configuration: defaults, TOML files with dotted keys, `key=value`
//! overrides and the flattened, fully resolved form written next to outputs.
//!
//! Precedence from lowest to highest: built-in defaults, the config file,
//! `--set` overrides, dedicated command-line flags such as `--seed`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{SineDatasetSpec, VelocityDatasetSpec};
use crate::error::{Error, Result};
use crate::network::{EstimatorConfig, FeatureExtractorConfig, ForecasterConfig, NeuroVeConfig};
use crate::training::sine::SineTrainConfig;
use crate::training::velocity::VelocityTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SineRunConfig {
    pub data: SineDatasetSpec,
    pub model: ForecasterConfig,
    pub train: SineTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityModelConfig {
    pub extractor: FeatureExtractorConfig,
    pub estimator: EstimatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityRunConfig {
    pub data: VelocityDatasetSpec,
    pub model: VelocityModelConfig,
    pub train: VelocityTrainConfig,
    pub eval_batch: usize,
}

impl Default for VelocityRunConfig {
    fn default() -> Self {
        Self {
            data: VelocityDatasetSpec::default(),
            model: VelocityModelConfig::default(),
            train: VelocityTrainConfig::default(),
            eval_batch: 16,
        }
    }
}

impl VelocityRunConfig {
    /// The network shares its window with the dataset.
    pub fn network(&self) -> NeuroVeConfig {
        NeuroVeConfig {
            window: self.data.window.clone(),
            extractor: self.model.extractor.clone(),
            estimator: self.model.estimator.clone(),
        }
    }
}

/// Standalone LIF/ALIF firing comparison driven by a uniform random current.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub steps: usize,
    pub neurons: usize,
    pub current_min: f64,
    pub current_max: f64,
    pub alpha: f64,
    pub v_th: f64,
    pub diffusion_d: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            neurons: 16,
            current_min: 0.0,
            current_max: 0.5,
            alpha: 0.9,
            v_th: 1.0,
            diffusion_d: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sine: SineRunConfig,
    pub velocity: VelocityRunConfig,
    pub analyze: AnalyzeConfig,
}

/// Streams that receive their own seed derived from the global one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    SineData,
    SineModel,
    SineTrain,
    VelocityData,
    VelocityModel,
    VelocityTrain,
    Analyze,
}

impl SeedStream {
    fn tag(self) -> u64 {
        match self {
            SeedStream::SineData => 1,
            SeedStream::SineModel => 2,
            SeedStream::SineTrain => 3,
            SeedStream::VelocityData => 4,
            SeedStream::VelocityModel => 5,
            SeedStream::VelocityTrain => 6,
            SeedStream::Analyze => 7,
        }
    }
}

/// SplitMix64 finaliser over the global seed and a stream tag.
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut z = seed ^ stream.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Parses a TOML document. Keys may be written dotted (`sine.train.lr = 1e-3`)
    /// or as tables; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then each `key=value` override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for item in overrides {
            apply_override(&mut tree, item)?;
        }
        Self::from_value(tree)
    }

    pub fn validate(&self) -> Result<()> {
        self.sine.data.validate()?;
        self.velocity.data.validate()?;
        self.velocity.network().validate()?;
        if self.velocity.eval_batch == 0 {
            return Err(Error::Config("velocity.eval_batch must be >= 1".into()));
        }
        let a = &self.analyze;
        if a.steps == 0 || a.neurons == 0 {
            return Err(Error::Config("analyze.steps and analyze.neurons must be >= 1".into()));
        }
        if !(a.current_min.is_finite() && a.current_max.is_finite() && a.current_min < a.current_max) {
            return Err(Error::Config("analyze current range must satisfy min < max".into()));
        }
        Ok(())
    }

    /// Every leaf as `dotted.key -> rendered value`, sorted by key.
    pub fn flatten(&self) -> Result<BTreeMap<String, String>> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = BTreeMap::new();
        flatten_into(&value, String::new(), &mut out);
        Ok(out)
    }

    /// One `key = value` line per leaf. The output parses back to the same config.
    pub fn to_resolved_toml(&self) -> Result<String> {
        let mut text = String::new();
        for (k, v) in self.flatten()? {
            text.push_str(&k);
            text.push_str(" = ");
            text.push_str(&v);
            text.push('\n');
        }
        Ok(text)
    }
}

fn flatten_into(value: &toml::Value, prefix: String, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(v, key, out);
            }
        }
        leaf => {
            out.insert(prefix, leaf.to_string());
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise, so `cell=slstm` works unquoted.
pub fn apply_override(tree: &mut toml::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{item}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table value")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table value")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
