//! Run directories and their metadata.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, sha256_hex};
use crate::config::RunConfig;
use crate::dataset::MANIFEST_VERSION;
use crate::error::{CliError, CliResult};

pub const METADATA: &str = "metadata.json";
pub const CONFIG_COPY: &str = "config.toml";

/// A freshly created output directory.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/run_<timestamp>_<hash>`, where the hash covers the
    /// command and resolved config. An existing directory is never reused;
    /// a numeric suffix is appended instead.
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
        let hash = sha256_hex(format!("{command}\n{}", config.to_toml()).as_bytes());
        let base = format!("run_{stamp}_{}", &hash[..8]);
        for n in 0.. {
            let name = if n == 0 { base.clone() } else { format!("{base}_{n}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => {
                    let copy = path.join(CONFIG_COPY);
                    fs::write(&copy, config.to_toml()).map_err(|e| CliError::io(&copy, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path.join(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> CliResult<()> {
        let p = self.path.join(rel);
        let mut text = serde_json::to_string_pretty(value).expect("json serializes");
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_text(&self, rel: &str, text: &str) -> CliResult<()> {
        let p = self.path.join(rel);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}

/// Fields shared by every command's metadata file.
pub fn base_metadata(command: &str, config: &RunConfig) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "deterministic": config.deterministic,
        "workers": config.effective_workers(),
        "config_file": CONFIG_COPY,
        "formats": {
            "checkpoint": checkpoint::VERSION,
            "manifest": MANIFEST_VERSION,
        },
    })
}

/// Merges `extra` into the base metadata object.
pub fn metadata(command: &str, config: &RunConfig, extra: Value) -> Value {
    let mut v = base_metadata(command, config);
    if let (Value::Object(base), Value::Object(more)) = (&mut v, extra) {
        base.extend(more);
    }
    v
}
