//! Run manifests: what was run, on which inputs, and what it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// SHA-256 of the file contents; `None` if it could not be read.
    pub sha256: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub ms: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub workers: usize,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// QP problem that failed, when the engine stopped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_dump: Option<PathBuf>,
    pub timings: Vec<Timing>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|bytes| hex::encode(Sha256::digest(bytes)))
}

/// `out` with its extension replaced by `suffix` (`run.csv` -> `run.<suffix>`).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

impl RunManifest {
    /// Records the configuration and input digests before anything runs.
    pub fn start<C: Serialize>(config: &C, seed: u64, workers: Option<usize>, inputs: &[PathBuf]) -> Self {
        let config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        let command = config
            .get("command")
            .and_then(|c| c.as_str())
            .unwrap_or_default()
            .to_string();
        RunManifest {
            command,
            config,
            seed,
            workers: vinesim::engine::resolve_workers(workers),
            inputs: inputs
                .iter()
                .map(|p| InputDigest {
                    path: p.clone(),
                    sha256: sha256_file(p),
                })
                .collect(),
            outputs: Vec::new(),
            exit_code: 0,
            error: None,
            qp_dump: None,
            timings: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push(Timing {
            phase: phase.to_string(),
            ms: t.elapsed().as_secs_f64() * 1e3,
        });
        out
    }

    pub fn finish(&mut self, code: i32, error: Option<String>) {
        self.exit_code = code;
        self.error = error;
        if let Some(t) = self.started.take() {
            self.timings.push(Timing {
                phase: "total".into(),
                ms: t.elapsed().as_secs_f64() * 1e3,
            });
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}
