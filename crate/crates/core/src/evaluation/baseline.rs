use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{apply_uap, evaluate, snr, Goal, PesqTool};
use crate::attacker::Perturbation;
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::victim::VictimModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub sigma: f64,
    pub rate: f64,
    pub mean_snr_db: Option<f64>,
    pub mean_pesq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaMatch {
    pub sigma: f64,
    pub mean_snr_db: f64,
    pub iterations: usize,
}

/// `σ·u` where `u ~ N(0, I)` of length `uap_len` is drawn once per seed, so
/// different `σ` scale the same direction.
pub fn gaussian_perturbation(uap_len: usize, sigma: f64, seed: u64) -> Result<Perturbation> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be positive, got {sigma}")));
    }
    let mut rng = substream(seed, "evaluation/baseline");
    let samples = (0..uap_len)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Perturbation {
        samples,
        noise_seed: Some(seed),
        generator_hash: None,
    })
}

/// Evaluate Gaussian perturbations at each `σ` exactly like a UAP.
pub fn random_baseline(
    victim: &VictimModel,
    split: &[Waveform],
    sigmas: &[f64],
    goal: Goal,
    uap_len: usize,
    seed: u64,
    pesq: Option<&PesqTool>,
) -> Result<Vec<BaselineRow>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let delta = gaussian_perturbation(uap_len, sigma, seed)?;
            let r = evaluate(victim, &delta, split, goal, pesq)?;
            log::info!("baseline sigma {sigma:.3e}: {}", r.summary());
            Ok(BaselineRow {
                sigma,
                rate: r.rate,
                mean_snr_db: r.mean_snr_db,
                mean_pesq: r.mean_pesq,
            })
        })
        .collect()
}

fn mean_snr(split: &[Waveform], delta: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for w in split {
        total += snr(&w.samples, &apply_uap(&w.samples, delta)?)?;
    }
    Ok(total / split.len() as f64)
}

/// Bisect `log σ` until the baseline's mean SNR on `split` is within
/// `tol_db` of `target_db`.
pub fn match_sigma(split: &[Waveform], target_db: f64, tol_db: f64, uap_len: usize, seed: u64) -> Result<SigmaMatch> {
    if split.is_empty() || !target_db.is_finite() || tol_db <= 0.0 {
        return Err(Error::config(
            "match_sigma needs a split, a finite target and a positive tolerance",
        ));
    }
    let unit = gaussian_perturbation(uap_len, 1.0, seed)?.samples;
    let at = |log_sigma: f64| -> Result<f64> {
        let s = log_sigma.exp();
        let d: Vec<f64> = unit.iter().map(|u| s * u).collect();
        mean_snr(split, &d)
    };
    let (mut lo, mut hi) = ((1e-9f64).ln(), (10.0f64).ln());
    let (snr_lo, snr_hi) = (at(lo)?, at(hi)?);
    if !(snr_hi <= target_db && target_db <= snr_lo) {
        return Err(Error::config(format!(
            "target SNR {target_db} dB outside the reachable range [{snr_hi:.1}, {snr_lo:.1}]"
        )));
    }
    for iterations in 1..=200 {
        let mid = 0.5 * (lo + hi);
        let s = at(mid)?;
        if (s - target_db).abs() <= tol_db {
            return Ok(SigmaMatch {
                sigma: mid.exp(),
                mean_snr_db: s,
                iterations,
            });
        }
        // SNR falls as σ grows
        if s > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::config("sigma bisection did not converge"))
}
