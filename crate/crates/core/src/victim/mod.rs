//! The speaker recognizer under attack.
//!
//! A sinc band-pass front end followed by a small conv/layernorm stack and a
//! two-layer classifier head, operating on 3200-sample (200 ms) frames.
//! Sentences are classified by averaging frame log-probabilities.

pub mod sinc;
mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::cyclic_window;
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv1d, LayerNorm, Linear};
use crate::numerics::{argmax, log_softmax_row, Module, Param, Tape, Tensor, Var};
use crate::rng::substream;

pub use sinc::{project_band, sinc_kernel, SincLayer};
pub use train::{accuracy, train_victim, train_victim_on, EpochLog, VictimTrainConfig, VictimTraining};

/// Frames evaluated per tape when scoring long inputs.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimConfig {
    pub num_speakers: usize,
    pub frame_len: usize,
    pub eval_hop: usize,
    pub sample_rate: f64,
    pub num_filters: usize,
    pub kernel_len: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub band_hz: f64,
    pub pool: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_blocks: usize,
    pub hidden: usize,
    pub leak: f64,
    /// normalize each channel over time instead of channels and time jointly
    pub channel_norm: bool,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            num_speakers: 10,
            frame_len: 3200,
            eval_hop: 1600,
            sample_rate: 16000.0,
            num_filters: 32,
            kernel_len: 101,
            low_hz: 30.0,
            high_hz: 7950.0,
            band_hz: 100.0,
            pool: 4,
            conv_channels: 32,
            conv_kernel: 5,
            conv_blocks: 2,
            hidden: 256,
            leak: 0.2,
            channel_norm: true,
        }
    }
}

impl VictimConfig {
    /// Length of the last feature map, or an error if the stack does not fit
    /// in one frame.
    pub fn feature_len(&self) -> Result<usize> {
        let bad = || Error::config("victim layers do not fit in one frame");
        let mut l = self.frame_len.checked_sub(self.kernel_len - 1).ok_or_else(bad)? / self.pool;
        for _ in 0..self.conv_blocks {
            l = l.checked_sub(self.conv_kernel - 1).ok_or_else(bad)? / self.pool;
        }
        if l == 0 {
            return Err(bad());
        }
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::config("victim needs at least 2 speakers"));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::config("sinc kernel length must be odd"));
        }
        if self.eval_hop == 0 || self.pool == 0 || self.conv_kernel == 0 {
            return Err(Error::config("hop, pool and conv kernel must be positive"));
        }
        self.feature_len().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct VictimModel {
    pub config: VictimConfig,
    pub sinc: SincLayer,
    pub norm0: LayerNorm,
    pub blocks: Vec<(Conv1d, LayerNorm)>,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Start offsets of the evaluation frames of a `len`-sample input.
///
/// Frames start every `hop` samples until one reaches the end; a frame that
/// runs past the end wraps around to the start.
pub fn frame_offsets(len: usize, frame: usize, hop: usize) -> Vec<usize> {
    let n = if len <= frame {
        1
    } else {
        (len - frame).div_ceil(hop) + 1
    };
    (0..n).map(|k| k * hop).collect()
}

impl VictimModel {
    pub fn new(config: VictimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = substream(seed, "victim/init");
        let sinc = SincLayer::new(
            c.num_filters,
            c.kernel_len,
            c.sample_rate,
            c.low_hz,
            c.high_hz,
            c.band_hz,
        );
        let norm0 = LayerNorm::new("norm0", c.num_filters, c.channel_norm);
        let mut blocks = Vec::with_capacity(c.conv_blocks);
        let mut cin = c.num_filters;
        for i in 0..c.conv_blocks {
            let name = format!("block{i}.conv");
            // per-channel normalization cancels a conv bias
            let conv = if c.channel_norm {
                Conv1d::without_bias(&name, cin, c.conv_channels, c.conv_kernel, 0, &mut rng)
            } else {
                Conv1d::new(&name, cin, c.conv_channels, c.conv_kernel, 0, &mut rng)
            };
            blocks.push((
                conv,
                LayerNorm::new(&format!("block{i}.norm"), c.conv_channels, c.channel_norm),
            ));
            cin = c.conv_channels;
        }
        let flat = cin * c.feature_len()?;
        let fc1 = Linear::new("fc1", flat, c.hidden, &mut rng);
        let fc2 = Linear::new("fc2", c.hidden, c.num_speakers, &mut rng);
        Ok(Self {
            config,
            sinc,
            norm0,
            blocks,
            fc1,
            fc2,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.config.num_speakers
    }

    pub fn frame_len(&self) -> usize {
        self.config.frame_len
    }

    /// `[N, 1, frame_len]` frames to `[N, num_speakers]` logits. With
    /// `frozen` no parameter gradient is recorded.
    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let shape = tape.value(x)?.shape().to_vec();
        let n = match shape[..] {
            [n, 1, l] if l == self.config.frame_len => n,
            _ => {
                return Err(Error::shape(format!(
                    "victim expects [N, 1, {}] frames, got {shape:?}",
                    self.config.frame_len
                )))
            }
        };
        let c = &self.config;
        let mut h = self.sinc.forward(tape, x, frozen)?;
        h = tape.maxpool1d(h, c.pool, c.pool)?;
        h = self.norm0.forward(tape, h, frozen)?;
        h = tape.leaky_relu(h, c.leak)?;
        for (conv, norm) in &self.blocks {
            h = conv.forward(tape, h, frozen)?;
            h = tape.maxpool1d(h, c.pool, c.pool)?;
            h = norm.forward(tape, h, frozen)?;
            h = tape.leaky_relu(h, c.leak)?;
        }
        let flat = tape.value(h)?.len() / n;
        h = tape.reshape(h, &[n, flat])?;
        h = self.fc1.forward(tape, h, frozen)?;
        h = tape.leaky_relu(h, c.leak)?;
        self.fc2.forward(tape, h, frozen)
    }

    /// Logits for each frame, evaluated without recording gradients.
    pub fn logits(&self, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let fl = self.config.frame_len;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * fl);
            for f in chunk {
                if f.len() != fl {
                    return Err(Error::shape(format!("frame of {} samples, expected {fl}", f.len())));
                }
                data.extend_from_slice(f);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), 1, fl], data)?);
            let y = self.forward(&mut tape, x, true)?;
            out.extend(tape.value(y)?.data().chunks(self.num_speakers()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Evaluation frames of an arbitrary-length input.
    pub fn frames(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        let fl = self.config.frame_len;
        frame_offsets(samples.len(), fl, self.config.eval_hop)
            .into_iter()
            .map(|o| cyclic_window(samples, o, fl))
            .collect()
    }

    /// Mean frame log-softmax over the evaluation frames of `samples`.
    pub fn sentence_scores(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::shape("cannot classify an empty waveform"));
        }
        let frames = self.frames(samples);
        let k = self.num_speakers();
        let mut acc = vec![0.0; k];
        for row in self.logits(&frames)? {
            for (a, v) in acc.iter_mut().zip(log_softmax_row(&row)) {
                *a += v;
            }
        }
        let n = frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Sentence-level label; ties go to the lowest index.
    pub fn predict_sentence(&self, samples: &[f64]) -> Result<usize> {
        Ok(argmax(&self.sentence_scores(samples)?))
    }

    /// [`predict_sentence`](Self::predict_sentence) over many inputs in
    /// parallel.
    pub fn predict_many<S: AsRef<[f64]> + Sync>(&self, inputs: &[S]) -> Result<Vec<usize>> {
        inputs.par_iter().map(|s| self.predict_sentence(s.as_ref())).collect()
    }

    pub fn to_checkpoint(&self, seed: u64, metadata: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "victim".into(),
            config: serde_json::to_value(&self.config)?,
            metadata,
            seed,
            tensors: self
                .params()
                .into_iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("victim")?;
        let config: VictimConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(config, ckpt.seed)?;
        for p in model.params_mut() {
            let shape = p.shape().to_vec();
            let mut buf = vec![0.0; p.len()];
            ckpt.restore([(p.name(), buf.as_mut_slice(), shape.as_slice())])?;
            p.set_data(&buf);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, seed: u64, metadata: serde_json::Value) -> Result<()> {
        self.to_checkpoint(seed, metadata)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 over all parameter bits, for detecting mutation.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.value().data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

impl Module for VictimModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.sinc.cutoffs];
        v.extend(self.norm0.params());
        for (conv, norm) in &self.blocks {
            v.extend(conv.params());
            v.extend(norm.params());
        }
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.sinc.cutoffs];
        v.extend(self.norm0.params_mut());
        for (conv, norm) in &mut self.blocks {
            v.extend(conv.params_mut());
            v.extend(norm.params_mut());
        }
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

#[cfg(test)]
mod tests;
