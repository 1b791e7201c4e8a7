use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{reward_nontargeted_var, reward_targeted_var, AttackConfig, AttackMode};
use crate::attacker::{sample_noise, Generator, NOISE_DIM};
use crate::corpus::{random_slice, Waveform};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Adam, Module, Tape, Tensor};
use crate::rng::substream;
use crate::victim::VictimModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// batch means
    pub reward: f64,
    pub distortion: f64,
    pub objective: f64,
    /// SER (non-targeted) or PTR (targeted) on the step's batch
    pub rate: f64,
    /// wall time since the start of training; not part of the
    /// reproducible outputs
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: AttackConfig,
    pub seed: u64,
    pub entries: Vec<TrainLogEntry>,
    pub victim_checksum_before: String,
    pub victim_checksum_after: String,
}

impl TrainLog {
    pub fn last(&self) -> Option<&TrainLogEntry> {
        self.entries.last()
    }

    /// `step,reward,distortion,objective,rate`; deterministic for a seed.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rate = match self.config.mode {
            AttackMode::NonTargeted => "ser",
            AttackMode::Targeted => "ptr",
        };
        let mut out = format!("step,reward,distortion,objective,{rate}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, e.reward, e.distortion, e.objective, e.rate
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `step,seconds` wall-clock companion to [`write_csv`](Self::write_csv).
    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "step,seconds")?;
        for e in &self.entries {
            writeln!(f, "{},{:.3}", e.step, e.seconds)?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Train `generator` against the frozen `victim` on slices of `train_set`.
///
/// Each step draws `batch_size` noise vectors and as many random
/// frame-length slices, pairs them one to one and takes an Adam step on the
/// generator to increase the mean of `R − λ·‖δ‖₂`.
pub fn train_uap(
    generator: &mut Generator,
    victim: &VictimModel,
    train_set: &[Waveform],
    config: &AttackConfig,
    seed: u64,
) -> Result<TrainLog> {
    let k = victim.num_speakers();
    config.validate(k)?;
    if generator.config != config.generator {
        return Err(Error::config("generator architecture differs from the attack config"));
    }
    if train_set.is_empty() {
        return Err(Error::config("attack training needs a non-empty train split"));
    }
    if let Some(w) = train_set.iter().find(|w| w.speaker >= k) {
        return Err(Error::LabelOutOfRange {
            label: w.speaker,
            classes: k,
        });
    }
    let checksum_before = victim.checksum();
    let threshold = config.threshold();
    let fl = victim.frame_len();
    let b = config.batch_size;
    let mut adam = Adam::new(config.adam, &generator.params());
    let mut noise_rng = substream(config.noise_seed, "attack/noise");
    let mut pick_rng = substream(seed, "attack/utterances");
    let mut slice_rng = substream(seed, "attack/slices");
    let start = Instant::now();
    let mut entries = Vec::new();
    let mut acc = [0.0f64; 4];
    let mut acc_n = 0usize;

    for step in 1..=config.steps {
        let mut z = Vec::with_capacity(b * NOISE_DIM);
        for _ in 0..b {
            z.extend(sample_noise(&mut noise_rng).values);
        }
        let mut x = Vec::with_capacity(b * fl);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            use rand::Rng;
            let w = &train_set[pick_rng.random_range(0..train_set.len())];
            x.extend(random_slice(&w.samples, fl, &mut slice_rng));
            labels.push(w.speaker);
        }

        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![b, NOISE_DIM], z)?);
        let delta = generator.forward_train(&mut tape, zv, false)?;
        let tiled = tape.repeat_clip(delta, fl)?;
        let xv = tape.constant(Tensor::new(vec![b, fl], x)?);
        let adv = tape.add(xv, tiled)?;
        let adv = tape.reshape(adv, &[b, 1, fl])?;
        let logits = victim.forward(&mut tape, adv, true)?;
        let r = match config.mode {
            AttackMode::NonTargeted => reward_nontargeted_var(&mut tape, logits, &labels, threshold)?,
            AttackMode::Targeted => reward_targeted_var(&mut tape, logits, config.target.unwrap(), threshold)?,
        };
        let d = tape.row_norm(delta)?;
        let ld = tape.scale(d, config.lambda)?;
        let g = tape.sub(r, ld)?;
        let g_mean = tape.mean(g)?;
        let loss = tape.scale(g_mean, -1.0)?;

        let gv = tape.value(g)?.data().to_vec();
        if let Some(row) = gv.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: format!("attack step {step}, batch row {row}, noise seed {}", config.noise_seed),
                detail: format!("objective is {}", gv[row]),
            });
        }
        let rv = tape.value(r)?.data();
        let dv = tape.value(d)?.data();
        let lv = tape.value(logits)?.data();
        let rate = batch_rate(lv, &labels, k, config);
        acc[0] += rv.iter().sum::<f64>() / b as f64;
        acc[1] += dv.iter().sum::<f64>() / b as f64;
        acc[2] += gv.iter().sum::<f64>() / b as f64;
        acc[3] += rate;
        acc_n += 1;

        let grads = tape.backward(loss)?;
        let grad_vals: Vec<Vec<f64>> = generator.params().iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
        drop(tape);
        adam.step(&mut generator.params_mut(), &grad_vals)
            .map_err(|e| Error::Divergence {
                context: format!("attack step {step}, noise seed {}", config.noise_seed),
                detail: e.to_string(),
            })?;

        if step % config.log_every == 0 || step == config.steps {
            let n = acc_n as f64;
            let e = TrainLogEntry {
                step,
                reward: acc[0] / n,
                distortion: acc[1] / n,
                objective: acc[2] / n,
                rate: acc[3] / n,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "step {} R {:.4} D {:.5} g {:.4} rate {:.3} ({:.1}s)",
                e.step,
                e.reward,
                e.distortion,
                e.objective,
                e.rate,
                e.seconds
            );
            entries.push(e);
            acc = [0.0; 4];
            acc_n = 0;
        }
    }
    let checksum_after = victim.checksum();
    if checksum_after != checksum_before {
        return Err(Error::Divergence {
            context: "attack training".into(),
            detail: "victim parameters changed".into(),
        });
    }
    Ok(TrainLog {
        config: config.clone(),
        seed,
        entries,
        victim_checksum_before: checksum_before,
        victim_checksum_after: checksum_after,
    })
}

/// Success fraction on one batch of logits.
fn batch_rate(logits: &[f64], labels: &[usize], k: usize, config: &AttackConfig) -> f64 {
    let preds = logits.chunks(k).map(argmax);
    match config.mode {
        AttackMode::NonTargeted => preds.zip(labels).filter(|(p, y)| p != *y).count() as f64 / labels.len() as f64,
        AttackMode::Targeted => {
            let t = config.target.unwrap();
            let (mut hit, mut n) = (0, 0);
            for (p, &y) in preds.zip(labels) {
                if y != t {
                    n += 1;
                    hit += usize::from(p == t);
                }
            }
            if n == 0 {
                0.0
            } else {
                hit as f64 / n as f64
            }
        }
    }
}
