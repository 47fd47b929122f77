//! Per-stage manifests and the consistency checks between stages.

use std::fs;
use std::path::Path;

use anyhow::Context;
use nptl::models::ModelSpec;
use nptl::NptlError;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub format: u32,
    pub stage: String,
    pub config_hash: String,
    pub data_hash: String,
    pub spec_hash: Option<String>,
    pub seed: u64,
    pub files: Vec<String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn spec_hash(spec: &ModelSpec) -> String {
    format!("{:016x}", spec.spec_hash())
}

impl StageManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    /// Reads the manifest of a stage that must already have run.
    pub fn read(dir: &Path, stage: &str) -> anyhow::Result<StageManifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(NptlError::InvalidArgument(format!(
                "manifest {} is missing; run `{stage}` first",
                path.display()
            ))
            .into());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: StageManifest = serde_json::from_str(&text)
            .map_err(|e| NptlError::Format { path: path.clone(), reason: e.to_string() })?;
        if m.format != MANIFEST_FORMAT_VERSION || m.stage != stage {
            return Err(NptlError::Format {
                path,
                reason: format!("expected a `{stage}` manifest of format {MANIFEST_FORMAT_VERSION}"),
            }
            .into());
        }
        Ok(m)
    }

    /// Rejects outputs produced from other data or another model spec.
    pub fn check(&self, data_hash: &str, spec: Option<&ModelSpec>) -> anyhow::Result<()> {
        if self.data_hash != data_hash {
            return Err(NptlError::InvalidArgument(format!(
                "config hash mismatch: `{}` output was built on data {} (config {}), current data is {data_hash}",
                self.stage, self.data_hash, self.config_hash
            ))
            .into());
        }
        if let (Some(spec), Some(stored)) = (spec, &self.spec_hash) {
            let current = spec_hash(spec);
            if *stored != current {
                return Err(NptlError::InvalidArgument(format!(
                    "config hash mismatch: `{}` output has model spec {stored} (config {}), config key `model` gives {current}",
                    self.stage, self.config_hash
                ))
                .into());
            }
        }
        Ok(())
    }
}
