use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Goal;
use crate::attacker::Perturbation;
use crate::error::{Error, Result};
use crate::objectives::{AttackConfig, AttackMode};

pub const SNR_FORMULA: &str = "10*log10(||x||_2 / ||x' - x||_2)";
pub const PTR_RULE: &str = "utterances whose true label is the target are excluded from the PTR denominator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceOutcome {
    pub id: String,
    pub true_label: usize,
    pub predicted: usize,
    /// `None` when the perturbation is exactly zero on this utterance
    /// (infinite SNR); such rows are left out of the mean
    pub snr_db: Option<f64>,
    pub pesq: Option<f64>,
    /// whether the row enters the SER/PTR denominator
    pub counted: bool,
}

/// One evaluation of one universal perturbation on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub target: Option<usize>,
    pub lambda: Option<f64>,
    pub threshold: Option<f64>,
    pub uap_len: usize,
    pub seed: Option<u64>,
    pub noise_seed: Option<u64>,
    pub snr_formula: String,
    pub ptr_rule: Option<String>,
    pub outcomes: Vec<UtteranceOutcome>,
    pub counted: usize,
    pub successes: usize,
    /// SER in non-targeted mode, PTR in targeted mode
    pub rate: f64,
    pub mean_snr_db: Option<f64>,
    pub infinite_snr: usize,
    pub mean_pesq: Option<f64>,
    pub pesq_status: String,
    pub victim_hash: String,
    pub generator_hash: Option<String>,
}

struct Aggregates {
    counted: usize,
    successes: usize,
    rate: f64,
    mean_snr_db: Option<f64>,
    infinite_snr: usize,
    mean_pesq: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn aggregate(target: Option<usize>, outcomes: &[UtteranceOutcome]) -> Aggregates {
    let counted: Vec<&UtteranceOutcome> = outcomes.iter().filter(|o| o.counted).collect();
    let successes = counted
        .iter()
        .filter(|o| match target {
            None => o.predicted != o.true_label,
            Some(t) => o.predicted == t,
        })
        .count();
    Aggregates {
        counted: counted.len(),
        successes,
        rate: if counted.is_empty() {
            0.0
        } else {
            successes as f64 / counted.len() as f64
        },
        mean_snr_db: mean(outcomes.iter().filter_map(|o| o.snr_db)),
        infinite_snr: outcomes.iter().filter(|o| o.snr_db.is_none()).count(),
        mean_pesq: mean(outcomes.iter().filter_map(|o| o.pesq)),
    }
}

impl AttackReport {
    pub(super) fn assemble(
        goal: Goal,
        delta: &Perturbation,
        outcomes: Vec<UtteranceOutcome>,
        victim_hash: String,
        pesq_status: String,
    ) -> Self {
        let a = aggregate(goal.target(), &outcomes);
        if a.infinite_snr > 0 {
            log::warn!(
                "{} utterances have infinite SNR (zero perturbation); excluded from the mean",
                a.infinite_snr
            );
        }
        Self {
            mode: goal.mode(),
            target: goal.target(),
            lambda: None,
            threshold: None,
            uap_len: delta.len(),
            seed: None,
            noise_seed: delta.noise_seed,
            snr_formula: SNR_FORMULA.into(),
            ptr_rule: goal.target().map(|_| PTR_RULE.into()),
            outcomes,
            counted: a.counted,
            successes: a.successes,
            rate: a.rate,
            mean_snr_db: a.mean_snr_db,
            infinite_snr: a.infinite_snr,
            mean_pesq: a.mean_pesq,
            pesq_status,
            victim_hash,
            generator_hash: delta.generator_hash.clone(),
        }
    }

    /// Record the attack hyperparameters the perturbation was trained with.
    pub fn with_attack(mut self, config: &AttackConfig, seed: u64) -> Self {
        self.lambda = Some(config.lambda);
        self.threshold = Some(config.threshold());
        self.seed = Some(seed);
        self
    }

    /// Number of rows.
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Clean-label error fraction implied by the rows, ignoring the goal.
    pub fn error_rate(&self) -> f64 {
        let wrong = self.outcomes.iter().filter(|o| o.predicted != o.true_label).count();
        wrong as f64 / self.outcomes.len().max(1) as f64
    }

    /// Check that every aggregate equals its recomputation from the rows.
    pub fn check_consistency(&self) -> Result<()> {
        let a = aggregate(self.target, &self.outcomes);
        let bad = |what: &str| {
            Err(Error::ManifestMismatch(format!(
                "report {what} disagrees with its rows"
            )))
        };
        if self.mode
            != if self.target.is_some() {
                AttackMode::Targeted
            } else {
                AttackMode::NonTargeted
            }
        {
            return bad("mode");
        }
        if self
            .outcomes
            .iter()
            .any(|o| o.counted == (self.target == Some(o.true_label)))
        {
            return bad("denominator");
        }
        if self.outcomes.iter().any(|o| o.snr_db.is_some_and(|s| !s.is_finite())) {
            return bad("snr");
        }
        if a.counted != self.counted || a.successes != self.successes || a.rate != self.rate {
            return bad("rate");
        }
        if a.mean_snr_db != self.mean_snr_db || a.infinite_snr != self.infinite_snr {
            return bad("mean snr");
        }
        if a.mean_pesq != self.mean_pesq {
            return bad("mean pesq");
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        self.check_consistency()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        r.check_consistency()?;
        Ok(r)
    }

    /// Flat rows `utterance_id,true,pred,snr_db,pesq`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance_id,true,pred,snr_db,pesq\n");
        for o in &self.outcomes {
            let snr = o.snr_db.map_or("inf".to_string(), |v| v.to_string());
            let pesq = o.pesq.map_or("unavailable".to_string(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{snr},{pesq}\n", o.id, o.true_label, o.predicted));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let name = match self.mode {
            AttackMode::NonTargeted => "SER",
            AttackMode::Targeted => "PTR",
        };
        let snr = self.mean_snr_db.map_or("inf".into(), |v| format!("{v:.2} dB"));
        let pesq = self
            .mean_pesq
            .map_or(format!("pesq: {}", self.pesq_status), |v| format!("pesq {v:.2}"));
        format!(
            "{name} {:.1}% ({}/{}), mean SNR {snr}, {pesq}",
            100.0 * self.rate,
            self.successes,
            self.counted
        )
    }
}
