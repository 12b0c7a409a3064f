//! The run configuration file.
//!
//! Every section is optional and every field inside a section has a
//! default, so an empty file is valid. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigood_core::data::SynthSpec;
use sigood_core::detector::DetectorConfig;
use sigood_core::eval::{BenchmarkConfig, Method, Protocol, Sweep};
use sigood_core::gnn::PretrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset generated by `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub pretrain: PretrainConfig,
    pub detector: DetectorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSection>,
    pub paths: Paths,
}

/// Locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding TU files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// TU dataset name (file prefix).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Sensitivity sweeps of the full method, run after the benchmark.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<Sweep>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Sigood, Method::RawEnergy, Method::NoEpo, Method::NoPg]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Serialize(e.to_string()))
    }

    pub fn benchmark(&self) -> Option<BenchmarkConfig> {
        self.benchmark.as_ref().map(|b| BenchmarkConfig {
            name: b.name.clone(),
            protocol: b.protocol.clone(),
            methods: b.methods.clone(),
            seeds: b.seeds.clone(),
            pretrain: self.pretrain.clone(),
            detector: self.detector.clone(),
        })
    }
}
