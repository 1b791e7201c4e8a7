use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{evaluate, gaussian_perturbation, AttackReport, Goal, PesqTool};
use crate::attacker::{interpolate_noise, Generator, NoiseVector};
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::objectives::{train_uap, AttackConfig, AttackMode};
use crate::victim::VictimModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    Lambda,
    UapLen,
    Beta,
    Sigma,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::Lambda => "lambda",
            SweepVar::UapLen => "uap_len",
            SweepVar::Beta => "beta",
            SweepVar::Sigma => "sigma",
        }
    }
}

impl std::str::FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lambda" => SweepVar::Lambda,
            "uap_len" | "uap-len" | "length" => SweepVar::UapLen,
            "beta" => SweepVar::Beta,
            "sigma" => SweepVar::Sigma,
            _ => return Err(Error::config(format!("unknown sweep variable `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVar,
    pub grid: Vec<f64>,
    pub template: AttackConfig,
    pub repetitions: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.repetitions == 0 {
            return Err(Error::config("sweep grid and repetitions must be non-empty"));
        }
        for (i, a) in self.grid.iter().enumerate() {
            if !a.is_finite() || self.grid[..i].contains(a) {
                return Err(Error::config(format!(
                    "sweep grid values must be finite and distinct, got {a}"
                )));
            }
        }
        let ok = |v: f64| match self.variable {
            SweepVar::Lambda | SweepVar::Sigma => v > 0.0,
            SweepVar::UapLen => v >= 1.0 && v.fract() == 0.0,
            SweepVar::Beta => true,
        };
        if let Some(v) = self.grid.iter().find(|&&v| !ok(v)) {
            return Err(Error::config(format!(
                "invalid {} grid value {v}",
                self.variable.name()
            )));
        }
        Ok(())
    }

    fn goal(&self) -> Goal {
        match (self.template.mode, self.template.target) {
            (AttackMode::Targeted, Some(t)) => Goal::Targeted(t),
            _ => Goal::Untargeted,
        }
    }
}

/// Inputs shared by all points of a sweep.
pub struct SweepContext<'a> {
    pub victim: &'a VictimModel,
    pub train: &'a [Waveform],
    pub test: &'a [Waveform],
    pub seed: u64,
    /// seed of the noise vector fed to each trained generator for evaluation
    pub eval_noise: u64,
    /// trained generator and the two noise seeds mixed by a β sweep
    pub generator: Option<&'a Generator>,
    pub beta_noise: (u64, u64),
    /// where per-point generators, train logs and reports go
    pub out_dir: Option<PathBuf>,
    pub pesq: Option<PesqTool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub repetition: usize,
    /// SER or PTR in percent
    pub rate_pct: f64,
    pub mean_snr_db: Option<f64>,
    pub mean_pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<AttackReport>,
}

impl SweepResult {
    /// Grid value, rate %, SNR dB, PESQ, repetition.
    pub fn to_csv(&self) -> String {
        let rate = match self.spec.template.mode {
            AttackMode::NonTargeted => "ser_pct",
            AttackMode::Targeted => "ptr_pct",
        };
        let mut out = format!("{},{rate},snr_db,pesq,repetition\n", self.spec.variable.name());
        for r in &self.rows {
            let snr = r.mean_snr_db.map_or("inf".into(), |v| v.to_string());
            let pesq = r.mean_pesq.map_or("unavailable".into(), |v| v.to_string());
            out.push_str(&format!("{},{},{snr},{pesq},{}\n", r.value, r.rate_pct, r.repetition));
        }
        out
    }

    pub fn save(&self, csv: &std::path::Path, json: &std::path::Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(json, text).map_err(|e| Error::io(json, e))
    }
}

/// The row with the highest rate among those with mean SNR at least
/// `min_snr_db`; ties go to the higher SNR.
pub fn select_lambda(rows: &[SweepRow], min_snr_db: f64) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.mean_snr_db.is_some_and(|s| s >= min_snr_db))
        .max_by(|a, b| {
            a.rate_pct
                .total_cmp(&b.rate_pct)
                .then(a.mean_snr_db.unwrap().total_cmp(&b.mean_snr_db.unwrap()))
        })
}

/// Run every grid point, training a fresh generator where the variable
/// changes the attack (λ, UAP length).
pub fn run_sweep(spec: &SweepSpec, ctx: &SweepContext) -> Result<SweepResult> {
    spec.validate()?;
    let goal = spec.goal();
    if spec.variable == SweepVar::Beta && ctx.generator.is_none() {
        return Err(Error::MissingPrerequisite(
            "a beta sweep needs a trained generator".into(),
        ));
    }
    if let Some(dir) = &ctx.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &value in &spec.grid {
        for rep in 0..spec.repetitions {
            let seed = ctx.seed.wrapping_add(rep as u64);
            let tag = format!("{}_{value}_r{rep}", spec.variable.name());
            let report = match spec.variable {
                SweepVar::Lambda | SweepVar::UapLen => {
                    let mut config = spec.template.clone();
                    match spec.variable {
                        SweepVar::Lambda => config.lambda = value,
                        _ => config.generator.uap_len = value as usize,
                    }
                    let mut g = Generator::new(config.generator.clone(), seed)?;
                    let log = train_uap(&mut g, ctx.victim, ctx.train, &config, seed)?;
                    let delta = g.generate(&NoiseVector::from_seed(ctx.eval_noise))?;
                    if let Some(dir) = &ctx.out_dir {
                        g.save(
                            &dir.join(format!("generator_{tag}.uapf")),
                            seed,
                            serde_json::to_value(&config)?,
                        )?;
                        log.write_csv(&dir.join(format!("train_{tag}.csv")))?;
                    }
                    evaluate(ctx.victim, &delta, ctx.test, goal, ctx.pesq.as_ref())?.with_attack(&config, seed)
                }
                SweepVar::Beta => {
                    let g = ctx.generator.unwrap();
                    let (a, b) = ctx.beta_noise;
                    let z = interpolate_noise(&NoiseVector::from_seed(a), &NoiseVector::from_seed(b), value);
                    let delta = g.generate(&z)?;
                    evaluate(ctx.victim, &delta, ctx.test, goal, ctx.pesq.as_ref())?
                }
                SweepVar::Sigma => {
                    let delta = gaussian_perturbation(spec.template.generator.uap_len, value, seed)?;
                    evaluate(ctx.victim, &delta, ctx.test, goal, ctx.pesq.as_ref())?
                }
            };
            log::info!(
                "sweep {} = {value} (rep {rep}): {}",
                spec.variable.name(),
                report.summary()
            );
            if let Some(dir) = &ctx.out_dir {
                report.save_json(&dir.join(format!("report_{tag}.json")))?;
            }
            rows.push(SweepRow {
                value,
                repetition: rep,
                rate_pct: 100.0 * report.rate,
                mean_snr_db: report.mean_snr_db,
                mean_pesq: report.mean_pesq,
            });
            reports.push(report);
        }
    }
    Ok(SweepResult {
        spec: spec.clone(),
        rows,
        reports,
    })
}
