use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScope {
    /// One fit per `(condition, round)`.
    #[default]
    PerRound,
    /// One fit over all selected shifts.
    Pooled,
}

impl PcaScope {
    pub fn as_str(self) -> &'static str {
        match self {
            PcaScope::PerRound => "per_round",
            PcaScope::Pooled => "pooled",
        }
    }
}

/// Experiment description shared by every subcommand. Each subcommand reads
/// the fields it needs and rejects the config when one is missing. Relative
/// paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub concept: Option<PathBuf>,
    #[serde(default)]
    pub concepts: Vec<PathBuf>,
    pub head: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub unembeddings: Option<PathBuf>,
    #[serde(default)]
    pub groups: Vec<PathBuf>,

    pub h0: Option<Vec<f64>>,
    /// Cumulative `Σλ` values for the concentration sweep.
    pub lambda_grid: Option<Vec<f64>>,
    /// `rounds × concepts` coefficients for `simulate`.
    pub lambda_schedule: Option<Vec<Vec<f64>>>,
    pub epsilon: Option<f64>,
    /// Extra seeded random instances for the concentration check.
    pub random_instances: Option<usize>,

    pub omegas: Option<Vec<f64>>,
    pub context_tokens: Option<Vec<usize>>,
    pub prompt_tokens: Option<Vec<usize>>,
    pub context_columns: Option<Vec<Vec<f64>>>,
    pub prompt_columns: Option<Vec<Vec<f64>>>,
    pub target: Option<Vec<f64>>,
    pub prompt_len: Option<usize>,
    pub tolerance: Option<f64>,

    pub tokens_per_round: Option<usize>,

    pub conditions: Option<Vec<String>>,
    pub normalize: Option<bool>,
    pub pca_scope: Option<PcaScope>,

    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    /// First 16 hex digits of the SHA-256 of the raw config bytes.
    pub config_hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out_dir = match &config.out {
            Some(out) => base_dir.join(out),
            None => PathBuf::from("steerlab-out"),
        };
        let loaded = Self {
            config_hash: hex::encode(Sha256::digest(&bytes))[..16].to_string(),
            config,
            base_dir,
            out_dir,
        };
        loaded.check_files_exist()?;
        Ok(loaded)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    fn check_files_exist(&self) -> Result<()> {
        let c = &self.config;
        let singles = [&c.model, &c.concept, &c.head, &c.traces, &c.unembeddings];
        let all = singles
            .into_iter()
            .flatten()
            .chain(&c.concepts)
            .chain(&c.groups);
        for p in all {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(CliError::Config(format!(
                    "referenced file {} does not exist",
                    full.display()
                )));
            }
        }
        Ok(())
    }

    pub fn require<'a, T>(&self, field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("field `{name}` is required for this command")))
    }

    pub fn require_path(&self, field: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        Ok(self.resolve(self.require(field, name)?))
    }
}
