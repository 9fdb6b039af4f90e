//! Run manifests: the resolved configuration, inputs, seed, and (after the
//! run) sha256 hashes of every artifact. Written before stage execution and
//! finalized afterwards; identical inputs produce identical manifests.
//! Wall-clock timings go to a separate timings file so the manifest and every
//! other artifact stay byte-stable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eegda_core::dataio;
use eegda_core::error::{CoreError, Result};
use eegda_core::pipeline::PipelineConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub config: PipelineConfig,
    /// sha256 of each artifact, filled in when the run finishes.
    pub artifacts: BTreeMap<String, String>,
}

pub struct ManifestWriter {
    manifest: RunManifest,
    dir: PathBuf,
    timings: BTreeMap<String, f64>,
    started: Instant,
    last_mark: Instant,
}

impl ManifestWriter {
    /// Creates the output directory and writes the pre-run manifest.
    pub fn start(
        dir: &Path,
        command: &str,
        cfg: &PipelineConfig,
        inputs: &[(&str, &Path)],
    ) -> Result<ManifestWriter> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let manifest = RunManifest {
            command: command.to_string(),
            seed: cfg.seed,
            inputs: inputs
                .iter()
                .map(|(k, p)| (k.to_string(), p.display().to_string()))
                .collect(),
            config: cfg.clone(),
            artifacts: BTreeMap::new(),
        };
        let writer = ManifestWriter {
            manifest,
            dir: dir.to_path_buf(),
            timings: BTreeMap::new(),
            started: Instant::now(),
            last_mark: Instant::now(),
        };
        dataio::save_json(&writer.manifest, &writer.dir.join("manifest.json"))?;
        Ok(writer)
    }

    /// Records the wall time since the previous mark under `stage`.
    pub fn mark(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), now.duration_since(self.last_mark).as_secs_f64());
        self.last_mark = now;
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hashes the named artifacts, rewrites the manifest, and writes the
    /// timing sidecar.
    pub fn finish(mut self, artifacts: &[&str]) -> Result<()> {
        for name in artifacts {
            let path = self.dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| CoreError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let digest = Sha256::digest(&bytes);
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            self.manifest.artifacts.insert(name.to_string(), hex);
        }
        dataio::save_json(&self.manifest, &self.dir.join("manifest.json"))?;
        self.timings
            .insert("total".into(), self.started.elapsed().as_secs_f64());
        dataio::save_json(&self.timings, &self.dir.join("timings.json"))?;
        Ok(())
    }
}
