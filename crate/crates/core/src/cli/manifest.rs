use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::kv::KeyValues;

pub const MANIFEST_NAME: &str = "run_manifest.txt";

/// Record of one command invocation. `config` holds every resolved option,
/// defaults included, keyed by flag name.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: KeyValues,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config: KeyValues::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: 0.0,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("subcommand", &self.subcommand).set("version", &self.version);
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        for (k, v) in self.config.iter() {
            kv.set(&format!("config.{k}"), v);
        }
        for (i, p) in self.inputs.iter().enumerate() {
            kv.set(&format!("input.{i}"), p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            kv.set(&format!("output.{i}"), p.display());
        }
        kv.set("wall_time_s", format!("{:.3}", self.wall_time_s));
        kv
    }

    /// Writes `dir/run_manifest.txt` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!(".{MANIFEST_NAME}.tmp"));
        self.to_kv().write(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
