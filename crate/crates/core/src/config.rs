//! CLI configuration file (TOML).
//!
//! ```toml
//! tau0 = 0.008
//! theta = 0.4
//! max_halvings = 30
//! layer = 0
//! profile = "profile.json"
//!
//! [selection]
//! block_q = 64
//! block_k = 32
//! sink_tokens = 32
//! local_tokens_min = 128
//! segment_size = 4
//!
//! [[samples]]
//! file = "sample0.bsqk"
//!
//! [[samples]]
//! workload = { kind = "sink_local", seed = 1, n = 1024, d = 64, heads = 2 }
//!
//! [input]
//! workload = { kind = "sink_local", seed = 9, n = 2048, d = 64, heads = 2 }
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.
//! Command-line flags override config values, which override the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationParams;
use crate::dense::HeadInput;
use crate::error::{Error, Result};
use crate::selection::SelectionConfig;
use crate::tensorfile::read_tensor_file;
use crate::workloads::{generate, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum InputSource {
    File { file: PathBuf },
    Workload { workload: WorkloadSpec },
}

impl InputSource {
    /// Loads all heads. `seed` replaces a workload's seed when given.
    pub fn load(&self, base: &Path, seed: Option<u64>) -> Result<Vec<HeadInput>> {
        match self {
            InputSource::File { file } => read_tensor_file(base.join(file)),
            InputSource::Workload { workload } => {
                let mut spec = workload.clone();
                if let Some(s) = seed {
                    spec.seed = s;
                }
                generate(&spec)
            }
        }
    }

    pub fn describe(&self, seed: Option<u64>) -> String {
        match self {
            InputSource::File { file } => file.display().to_string(),
            InputSource::Workload { workload: w } => format!(
                "{:?}(seed={}, n={}, d={}, heads={})",
                w.kind,
                seed.unwrap_or(w.seed),
                w.n,
                w.d,
                w.heads
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub tau0: f64,
    pub theta: f64,
    pub max_halvings: u32,
    pub layer: u32,
    pub profile: Option<PathBuf>,
    pub threads: Option<usize>,
    pub selection: SelectionConfig,
    pub samples: Vec<InputSource>,
    pub input: Option<InputSource>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        let params = CalibrationParams::default();
        Self {
            tau0: params.tau0,
            theta: params.theta,
            max_halvings: params.max_halvings,
            layer: 0,
            profile: None,
            threads: None,
            selection: params.selection,
            samples: Vec::new(),
            input: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        CalibrationParams {
            theta: self.theta,
            tau0: self.tau0,
            max_halvings: self.max_halvings,
            selection: self.selection.with_tau(self.tau0),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }
}
