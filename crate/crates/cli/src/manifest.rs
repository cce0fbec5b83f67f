//! Run manifests: one structured-text file per run, written alongside the
//! primary output.
//!
//! A manifest records the command, the fully resolved config snapshot, the
//! seed, and sha256 digests of every input and output. Everything in the
//! file is a pure function of the run's inputs, so a rerun with identical
//! inputs produces a byte-identical manifest. Wall-clock timestamps are
//! kept in memory and logged, never written to the file.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct RunManifest {
    command: String,
    seed: Option<u64>,
    config_snapshot: String,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<PathBuf>,
    started: SystemTime,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            command: command.into(),
            seed: None,
            config_snapshot: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Attach the resolved config as rendered TOML.
    pub fn config<T: serde::Serialize>(&mut self, snapshot: &T) -> Result<&mut Self> {
        self.config_snapshot = toml::to_string(snapshot).context("serializing config snapshot")?;
        Ok(self)
    }

    /// Hash an input file now, before the run mutates anything.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(self)
    }

    /// Register an output; hashed when the manifest is written.
    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Write `<primary output>.manifest`, hashing outputs as they exist on
    /// disk now. Elapsed wall time goes to the log only.
    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str("mdlm-run-manifest v1\n");
        text.push_str(&format!("command = {}\n", self.command));
        if let Some(seed) = self.seed {
            text.push_str(&format!("seed = {seed}\n"));
        }
        if !self.config_snapshot.is_empty() {
            text.push_str("\n[config]\n");
            for line in self.config_snapshot.lines() {
                text.push_str("  ");
                text.push_str(line);
                text.push('\n');
            }
        }
        text.push_str("\n[inputs]\n");
        for (path, digest) in &self.inputs {
            text.push_str(&format!("{} = sha256:{digest}\n", path.display()));
        }
        text.push_str("\n[outputs]\n");
        for path in &self.outputs {
            let digest = sha256_file(path)?;
            text.push_str(&format!("{} = sha256:{digest}\n", path.display()));
        }
        std::fs::write(manifest_path, text)
            .with_context(|| format!("writing manifest {}", manifest_path.display()))?;
        if let Ok(elapsed) = self.started.elapsed() {
            log::info!(
                "{}: finished in {:.2}s, manifest at {}",
                self.command,
                elapsed.as_secs_f64(),
                manifest_path.display()
            );
        }
        Ok(())
    }
}

/// Default manifest path for a primary output file.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    name.push_str(".manifest");
    output.with_file_name(name)
}
