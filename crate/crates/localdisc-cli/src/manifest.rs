//! Run manifests: one JSON file per invocation recording what ran, with
//! which config, and from which code version, written before any work.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use localdisc::{Error, Result};

use crate::config::file_sha256;

/// Content hash of the workspace sources, embedded at build time.
pub const CODE_VERSION: &str = env!("LOCALDISC_CODE_VERSION");

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Config file the run was driven by, if any.
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the config file bytes.
    pub config_sha256: Option<String>,
    /// Seed controlling the run, when one applies.
    pub seed: Option<u64>,
    /// Directory all artifacts are written under.
    pub out_dir: PathBuf,
    /// Content hash of the source tree this binary was built from.
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Self> {
        let config_sha256 = match config {
            Some(p) => Some(file_sha256(p)?),
            None => None,
        };
        Ok(RunManifest {
            command: command.to_string(),
            config_path: config.map(Path::to_path_buf),
            config_sha256,
            seed,
            out_dir: out.to_path_buf(),
            code_version: CODE_VERSION.to_string(),
        })
    }

    /// Write `manifest.json` under the run's output directory.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Create the output directory; refuse to reuse a non-empty one unless
/// `force` is set.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory '{}' is not empty; pass --force to write into it anyway",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}
