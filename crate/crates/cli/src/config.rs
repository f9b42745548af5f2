//! Resolved run configuration. Values come from defaults, then an optional
//! JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use gmcr::baselines::Method;
use gmcr::decontam::{ContaminationConfig, DEFAULT_WINDOW_SECONDS};
use gmcr::io::read_json;
use gmcr::synth::SynthConfig;
use gmcr::{HyperParams, ModelConfig, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GMCR_OUT";
pub const DEFAULT_OUT_ROOT: &str = "gmcr-out";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub replicates: usize,
    /// Iterations for the classical baselines.
    pub baseline_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![Method::Sparse, Method::Nmf, Method::McrAls],
            replicates: 5,
            baseline_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub window_seconds: f64,
    /// m/z channels to report reductions for.
    pub channels: Vec<u32>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            window_seconds: DEFAULT_WINDOW_SECONDS,
            channels: Vec::new(),
        }
    }
}

/// Parameter groups a config file may set. Missing groups keep defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
    pub contamination: Option<ContaminationConfig>,
    pub model: Option<ModelConfig>,
    pub hyper: Option<HyperParams>,
    pub bench: Option<BenchConfig>,
    pub clean: Option<CleanConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(FileConfig::default()),
        }
    }
}

/// Everything a command ran with; written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub contamination: Option<ContaminationConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hyper: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bench: Option<BenchConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean: Option<CleanConfig>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, out: PathBuf) -> Self {
        RunConfig {
            command: command.to_string(),
            seed,
            out,
            inputs: Vec::new(),
            method: None,
            synth: None,
            contamination: None,
            model: None,
            hyper: None,
            bench: None,
            clean: None,
        }
    }

    pub fn write(&self) -> Result<()> {
        gmcr::io::write_json_atomic(&self.out.join(RUN_CONFIG_FILE), self)
    }
}

/// `explicit`, else `$GMCR_OUT/<command>`, else `./gmcr-out/<command>`.
pub fn output_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    root.join(command)
}
