//! Artifact writers. Every file starts with the tool version, config hash
//! and seed: a `#` comment line in CSV, a `meta` object in JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, Result};

pub use steerlab_core::trace::format_fixed4 as fixed4;

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(command: &'static str, config_hash: &str, seed: u64) -> Self {
        Self {
            tool: "steerlab",
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!(
            "# {} {} command={} config_hash={} seed={}\n",
            self.tool, self.tool_version, self.command, self.config_hash, self.seed
        )
    }
}

/// Owns one output directory for the duration of a command.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    meta: Meta,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

impl OutputDir {
    pub fn create(dir: &Path, meta: Meta) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let artifact = Artifact {
            meta: &self.meta,
            body,
        };
        let mut text = serde_json::to_string_pretty(&artifact)
            .map_err(|e| CliError::Config(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let io_err = |e: csv::Error| CliError::Config(format!("cannot format {name}: {e}"));
        writer.write_record(header).map_err(io_err)?;
        for row in rows {
            writer.write_record(row).map_err(io_err)?;
        }
        let body = writer
            .into_inner()
            .map_err(|e| CliError::Config(format!("cannot format {name}: {e}")))?;
        self.write_csv_document(name, &String::from_utf8_lossy(&body))
    }

    /// Writes an already formatted CSV body under the metadata comment.
    pub fn write_csv_document(&self, name: &str, body: &str) -> Result<()> {
        self.write(name, &format!("{}{body}", self.meta.comment()))
    }
}

pub fn optional_fixed4(value: Option<f64>) -> String {
    value.map(fixed4).unwrap_or_default()
}
