use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use fpdetect::runtime::Goal;
use serde::Serialize;

/// Provenance attached to every artifact the tool writes.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub spec_path: Option<String>,
    pub table_path: Option<String>,
    pub lut_path: Option<String>,
    pub goal: Option<Goal>,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub tool_version: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            arguments: std::env::args().skip(1).collect(),
            spec_path: None,
            table_path: None,
            lut_path: None,
            goal: None,
            seed: None,
            started_unix: now(),
            finished_unix: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            extra: BTreeMap::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(now());
    }

    /// Path of the manifest that accompanies a non-JSON artifact.
    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write_sidecar(&self, artifact: &Path) -> Result<()> {
        let path = Self::sidecar_path(artifact);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }
}
