//! Attack metrics: sentence error rate, prediction target rate, SNR and an
//! optional external PESQ scorer, plus random-noise baselines and sweeps.
//!
//! SNR is `10·log10(‖x‖₂ / ‖x' − x‖₂)`: a ratio of plain norms, not of
//! energies, so 30 dB here means the perturbation norm is 1/1000 of the
//! signal norm.

mod baseline;
pub mod pesq;
mod report;
mod sweep;

use rayon::prelude::*;

use crate::attacker::Perturbation;
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::objectives::AttackMode;
use crate::victim::VictimModel;

pub use baseline::{gaussian_perturbation, match_sigma, random_baseline, BaselineRow, SigmaMatch};
pub use pesq::{PesqError, PesqTool};
pub use report::{AttackReport, UtteranceOutcome, PTR_RULE, SNR_FORMULA};
pub use sweep::{run_sweep, select_lambda, SweepContext, SweepResult, SweepRow, SweepSpec, SweepVar};

/// `out[i] = delta[i mod len(delta)]` for `i < len`.
pub fn repeat_clip(delta: &[f64], len: usize) -> Result<Vec<f64>> {
    if delta.is_empty() || len == 0 {
        return Err(Error::shape("repeat_clip needs a non-empty perturbation and target"));
    }
    Ok(delta.iter().copied().cycle().take(len).collect())
}

/// `x + repeat_clip(delta, len(x))`.
pub fn apply_uap(x: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    let tiled = repeat_clip(delta, x.len())?;
    Ok(x.iter().zip(&tiled).map(|(a, d)| a + d).collect())
}

/// SNR in dB; `+∞` when `perturbed == clean`.
pub fn snr(clean: &[f64], perturbed: &[f64]) -> Result<f64> {
    if clean.len() != perturbed.len() {
        return Err(Error::shape(format!(
            "snr: clean has {} samples, perturbed {}",
            clean.len(),
            perturbed.len()
        )));
    }
    let signal = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if signal == 0.0 {
        return Err(Error::config("snr of an all-zero reference is undefined"));
    }
    let noise = clean
        .iter()
        .zip(perturbed)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(10.0 * (signal / noise).log10())
}

/// What a report measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    /// SER: any wrong prediction counts
    Untargeted,
    /// PTR: prediction equals the target, over utterances of other classes
    Targeted(usize),
}

impl Goal {
    pub fn mode(self) -> AttackMode {
        match self {
            Goal::Untargeted => AttackMode::NonTargeted,
            Goal::Targeted(_) => AttackMode::Targeted,
        }
    }

    pub fn target(self) -> Option<usize> {
        match self {
            Goal::Untargeted => None,
            Goal::Targeted(t) => Some(t),
        }
    }
}

/// Apply one universal `delta` to every utterance of `split` and score it.
///
/// With a PESQ tool, each clean/perturbed pair is also scored externally;
/// scorer failures are recorded in the report and never abort it.
pub fn evaluate(
    victim: &VictimModel,
    delta: &Perturbation,
    split: &[Waveform],
    goal: Goal,
    pesq: Option<&PesqTool>,
) -> Result<AttackReport> {
    if split.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    if delta.is_empty() {
        return Err(Error::shape("empty perturbation"));
    }
    let k = victim.num_speakers();
    let labels = split.iter().map(|w| w.speaker).chain(goal.target());
    if let Some(label) = labels.into_iter().find(|&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let scored: Vec<(Vec<f64>, usize, Option<f64>)> = split
        .par_iter()
        .map(|w| {
            let adv = apply_uap(&w.samples, &delta.samples)?;
            let pred = victim.predict_sentence(&adv)?;
            let s = snr(&w.samples, &adv)?;
            Ok((adv, pred, s.is_finite().then_some(s)))
        })
        .collect::<Result<_>>()?;

    let mut pesq_scores = vec![None; split.len()];
    let mut pesq_failures = Vec::new();
    if let Some(tool) = pesq {
        for (i, (w, (adv, _, _))) in split.iter().zip(&scored).enumerate() {
            match tool.score_samples(&w.samples, adv) {
                Ok(v) => pesq_scores[i] = Some(v),
                Err(e) => pesq_failures.push(format!("{}: {e}", w.utterance_id)),
            }
        }
    }
    let pesq_status = match (pesq, pesq_failures.len()) {
        (None, _) => "unavailable".to_string(),
        (Some(_), 0) => "ok".to_string(),
        (Some(_), n) => {
            for f in &pesq_failures {
                log::warn!("pesq: {f}");
            }
            format!("{n} of {} failed; first: {}", split.len(), pesq_failures[0])
        }
    };

    let outcomes = split
        .iter()
        .zip(scored)
        .zip(pesq_scores)
        .map(|((w, (_, pred, snr_db)), pesq)| UtteranceOutcome {
            id: w.utterance_id.clone(),
            true_label: w.speaker,
            predicted: pred,
            snr_db,
            pesq,
            counted: goal.target() != Some(w.speaker),
        })
        .collect();
    Ok(AttackReport::assemble(
        goal,
        delta,
        outcomes,
        victim.checksum(),
        pesq_status,
    ))
}

/// [`evaluate`] in non-targeted mode.
pub fn evaluate_ser(victim: &VictimModel, delta: &Perturbation, split: &[Waveform]) -> Result<AttackReport> {
    evaluate(victim, delta, split, Goal::Untargeted, None)
}

/// [`evaluate`] in targeted mode.
pub fn evaluate_ptr(
    victim: &VictimModel,
    delta: &Perturbation,
    split: &[Waveform],
    target: usize,
) -> Result<AttackReport> {
    evaluate(victim, delta, split, Goal::Targeted(target), None)
}

#[cfg(test)]
mod tests;
