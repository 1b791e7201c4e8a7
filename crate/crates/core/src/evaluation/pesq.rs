//! Adapter for an external P.862 scorer.
//!
//! The tool is called as `<tool> +16000 +wb <ref.wav> <deg.wav>` (the ITU
//! reference command line). The score is the last number after `=` on the
//! first stdout line containing `Prediction`, e.g.
//! `P.862.2 Prediction (MOS-LQO):  = 4.644`.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::corpus::wav;

/// Environment variable naming the scorer executable.
pub const PESQ_ENV: &str = "UAPFORGE_PESQ";

#[derive(Debug, thiserror::Error)]
pub enum PesqError {
    #[error("no PESQ tool configured (set {PESQ_ENV})")]
    NotConfigured,
    #[error("PESQ tool not found at {0}")]
    Missing(PathBuf),
    #[error("PESQ tool could not be started: {0}")]
    Spawn(std::io::Error),
    #[error("PESQ tool exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("PESQ output has no parseable score: {0:?}")]
    Unparseable(String),
    #[error("PESQ score {0} outside [-0.5, 4.5]")]
    OutOfRange(f64),
    #[error("could not write PESQ input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PesqTool {
    pub path: PathBuf,
}

impl PesqTool {
    /// The tool at `path`, if it exists.
    pub fn new(path: impl Into<PathBuf>) -> Result<Self, PesqError> {
        let path = path.into();
        if !path.is_file() {
            return Err(PesqError::Missing(path));
        }
        Ok(Self { path })
    }

    /// The tool named by `UAPFORGE_PESQ`.
    pub fn from_env() -> Result<Self, PesqError> {
        match std::env::var_os(PESQ_ENV) {
            Some(p) if !p.is_empty() => Self::new(p),
            _ => Err(PesqError::NotConfigured),
        }
    }

    /// Explicit path if given, else the environment; failures are logged
    /// and turn into `None`.
    pub fn resolve(explicit: Option<&Path>) -> Option<Self> {
        let r = match explicit {
            Some(p) => Self::new(p),
            None => Self::from_env(),
        };
        match r {
            Ok(t) => Some(t),
            Err(PesqError::NotConfigured) => None,
            Err(e) => {
                log::warn!("{e}; PESQ will be reported as unavailable");
                None
            }
        }
    }

    pub fn score_files(&self, reference: &Path, degraded: &Path) -> Result<f64, PesqError> {
        let out = Command::new(&self.path)
            .arg("+16000")
            .arg("+wb")
            .arg(reference)
            .arg(degraded)
            .output()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => PesqError::Missing(self.path.clone()),
                _ => PesqError::Spawn(e),
            })?;
        if !out.status.success() {
            return Err(PesqError::Failed {
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let score = parse_score(&stdout).ok_or_else(|| PesqError::Unparseable(stdout.trim().to_string()))?;
        if !(-0.5..=4.5).contains(&score) {
            return Err(PesqError::OutOfRange(score));
        }
        Ok(score)
    }

    /// Score in-memory signals by writing them as 16-bit WAVs first.
    pub fn score_samples(&self, reference: &[f64], degraded: &[f64]) -> Result<f64, PesqError> {
        let dir = tempfile::tempdir().map_err(|e| PesqError::Input(e.to_string()))?;
        let (r, d) = (dir.path().join("ref.wav"), dir.path().join("deg.wav"));
        wav::write_samples(&r, reference).map_err(|e| PesqError::Input(e.to_string()))?;
        wav::write_samples(&d, degraded).map_err(|e| PesqError::Input(e.to_string()))?;
        self.score_files(&r, &d)
    }
}

/// Score from scorer stdout.
pub fn parse_score(stdout: &str) -> Option<f64> {
    let line = stdout.lines().find(|l| l.contains("Prediction"))?;
    let tail = &line[line.rfind('=')? + 1..];
    tail.split(|c: char| c == ',' || c.is_whitespace())
        .rfind(|t| !t.is_empty())?
        .parse()
        .ok()
}
