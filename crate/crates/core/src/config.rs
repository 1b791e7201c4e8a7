//! The run configuration: one JSON document with a section per stage,
//! resolved from defaults, an optional file and dotted `key=value`
//! overrides. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::objectives::AttackConfig;
use crate::rng::substream;
use crate::victim::{VictimConfig, VictimTrainConfig};

/// File name of the resolved config written next to every artifact.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic {
        num_speakers: usize,
        utterances_per_speaker: usize,
        min_duration: f64,
        max_duration: f64,
    },
    /// `<root>/<speaker>/<utt>.wav`
    Directory(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic {
            num_speakers: 10,
            utterances_per_speaker: 20,
            min_duration: 1.0,
            max_duration: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub source: CorpusSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimSection {
    pub model: VictimConfig,
    pub train: VictimTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// split attacks are scored on: "test" or "train"
    pub split: String,
    /// PESQ scorer; falls back to `UAPFORGE_PESQ`
    pub pesq: Option<PathBuf>,
    pub lambda_grid: Vec<f64>,
    pub uap_len_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub repetitions: usize,
    /// minimum mean SNR when picking λ from a sweep
    pub min_snr_db: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            pesq: None,
            lambda_grid: vec![500.0, 1000.0, 1500.0, 2000.0, 2500.0],
            uap_len_grid: vec![3200.0, 6400.0, 9600.0],
            beta_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            sigma_grid: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            repetitions: 1,
            min_snr_db: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub victim: VictimSection,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

/// Parse an override value: JSON when it parses, a bare string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `path` (dot separated) in `doc`, creating objects on the way.
pub fn set_dotted(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(format!("malformed override key `{path}`")));
    }
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(Error::config(format!("override `{path}` descends into a non-object")));
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(map) => {
            map.insert(keys[keys.len() - 1].to_string(), override_value(raw));
            Ok(())
        }
        None => Err(Error::config(format!("override `{path}` descends into a non-object"))),
    }
}

impl RunConfig {
    /// Defaults, then `file`, then each `(dotted.key, value)` override.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        for (k, v) in overrides {
            set_dotted(&mut doc, k, v)?;
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir is required"));
        }
        self.victim.model.validate()?;
        self.attack.validate(self.victim.model.num_speakers)?;
        if let CorpusSource::Synthetic {
            num_speakers,
            min_duration,
            max_duration,
            ..
        } = self.corpus.source
        {
            if num_speakers != self.victim.model.num_speakers {
                return Err(Error::config(format!(
                    "corpus has {num_speakers} speakers but the victim expects {}",
                    self.victim.model.num_speakers
                )));
            }
            if !(min_duration > 0.0 && min_duration <= max_duration) {
                return Err(Error::config("corpus durations must satisfy 0 < min <= max"));
            }
        }
        if !matches!(self.evaluation.split.as_str(), "test" | "train") {
            return Err(Error::config(format!("unknown split `{}`", self.evaluation.split)));
        }
        Ok(())
    }

    /// Seed of the named stage stream (`corpus`, `victim`, `attacker`,
    /// `evaluation`, ...) of the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        substream(self.seed, stage).next_u64()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write the resolved config into `dir` and return its path.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_json()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
