//! The perturbation generator `G`: 100-dim Gaussian noise in, a fixed-length
//! universal perturbation out.
//!
//! A linear stem reshapes the noise into a short multi-channel sequence,
//! seven up-blocks (nearest ×2, conv, batchnorm, ReLU) double its length
//! each, and a zero-initialized linear conv head collapses it to one channel.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::wav;
use crate::error::{Error, Result};
use crate::numerics::layers::{BatchNorm1d, Conv1d, Linear};
use crate::numerics::{Module, Param, Tape, Tensor, Var};
use crate::rng::substream;

pub const NOISE_DIM: usize = 100;

/// One draw of generator input noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseVector {
    pub values: Vec<f64>,
    /// seed the vector was drawn from, when known
    pub seed: Option<u64>,
}

impl NoiseVector {
    /// The vector drawn from `seed`'s noise stream.
    pub fn from_seed(seed: u64) -> Self {
        let mut z = sample_noise(&mut substream(seed, "attacker/noise"));
        z.seed = Some(seed);
        z
    }
}

/// `NOISE_DIM` i.i.d. standard normal values.
pub fn sample_noise(rng: &mut impl Rng) -> NoiseVector {
    NoiseVector {
        values: (0..NOISE_DIM).map(|_| rng.sample(StandardNormal)).collect(),
        seed: None,
    }
}

/// `β·z1 + (1 − β)·z2`.
pub fn interpolate_noise(z1: &NoiseVector, z2: &NoiseVector, beta: f64) -> NoiseVector {
    NoiseVector {
        values: z1
            .values
            .iter()
            .zip(&z2.values)
            .map(|(a, b)| beta * a + (1.0 - beta) * b)
            .collect(),
        seed: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub uap_len: usize,
    /// stem width followed by the output width of every up-block
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            uap_len: 3200,
            channels: vec![64, 64, 32, 32, 16, 16, 8, 8],
            kernel: 5,
            scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Stem length `L0 = uap_len / 2^blocks`.
    pub fn base_len(&self) -> Result<usize> {
        let f = 1usize << self.num_blocks();
        if self.channels.len() < 2 || self.uap_len == 0 || !self.uap_len.is_multiple_of(f) {
            return Err(Error::config(format!(
                "uap_len {} is not a positive multiple of 2^{}",
                self.uap_len,
                self.num_blocks()
            )));
        }
        if self.kernel.is_multiple_of(2) || self.channels.contains(&0) {
            return Err(Error::config("generator kernel must be odd and channels positive"));
        }
        Ok(self.uap_len / f)
    }
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub stem: Linear,
    pub blocks: Vec<UpBlock>,
    pub head: Conv1d,
}

/// A generated perturbation with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub samples: Vec<f64>,
    pub noise_seed: Option<u64>,
    /// hash of the generator checkpoint that produced it, if any
    pub generator_hash: Option<String>,
}

impl Perturbation {
    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            noise_seed: None,
            generator_hash: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Write as 16-bit WAV. Returns the number of samples clipped to
    /// `[-1, 1]`, which is also logged as a warning.
    pub fn write_wav(&self, path: &Path) -> Result<usize> {
        let clipped = wav::clipped_count(&self.samples);
        if clipped > 0 {
            log::warn!(
                "{}: {clipped} perturbation samples clipped on WAV export",
                path.display()
            );
        }
        wav::write_samples(path, &self.samples)?;
        Ok(clipped)
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let l0 = config.base_len()?;
        let mut rng = substream(seed, "attacker/init");
        let ch = &config.channels;
        let k = config.kernel;
        let stem = Linear::new("stem", NOISE_DIM, ch[0] * l0, &mut rng);
        let blocks = ch
            .windows(2)
            .enumerate()
            .map(|(i, w)| UpBlock {
                conv: Conv1d::without_bias(&format!("up{i}.conv"), w[0], w[1], k, k / 2, &mut rng),
                bn: BatchNorm1d::new(&format!("up{i}.bn"), w[1]),
            })
            .collect();
        let head = Conv1d::zeroed("head", *ch.last().unwrap(), 1, k, k / 2);
        Ok(Self {
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn uap_len(&self) -> usize {
        self.config.uap_len
    }

    fn stem(&self, tape: &mut Tape, z: Var, frozen: bool) -> Result<Var> {
        let n = match tape.value(z)?.shape() {
            &[n, d] if d == NOISE_DIM => n,
            s => {
                return Err(Error::shape(format!(
                    "generator expects [N, {NOISE_DIM}] noise, got {s:?}"
                )))
            }
        };
        let h = self.stem.forward(tape, z, frozen)?;
        tape.reshape(
            h,
            &[
                n,
                self.config.channels[0],
                self.config.uap_len >> self.config.num_blocks(),
            ],
        )
    }

    fn head(&self, tape: &mut Tape, h: Var, frozen: bool) -> Result<Var> {
        let n = tape.value(h)?.shape()[0];
        let y = self.head.forward(tape, h, frozen)?;
        let y = tape.reshape(y, &[n, self.config.uap_len])?;
        tape.scale(y, self.config.scale)
    }

    /// Train-mode forward: `[N, 100]` noise to `[N, uap_len]`, batchnorm on
    /// batch statistics (running statistics are updated).
    pub fn forward_train(&mut self, tape: &mut Tape, z: Var, frozen: bool) -> Result<Var> {
        let mut h = self.stem(tape, z, frozen)?;
        for b in &mut self.blocks {
            h = tape.upsample2(h)?;
            h = b.conv.forward(tape, h, frozen)?;
            h = b.bn.forward(tape, h, true, frozen)?;
            h = tape.relu(h)?;
        }
        self.head(tape, h, frozen)
    }

    /// Eval-mode forward on running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, z: Var, frozen: bool) -> Result<Var> {
        let mut h = self.stem(tape, z, frozen)?;
        for b in &self.blocks {
            h = tape.upsample2(h)?;
            h = b.conv.forward(tape, h, frozen)?;
            h = b.bn.forward_eval(tape, h, frozen)?;
            h = tape.relu(h)?;
        }
        self.head(tape, h, frozen)
    }

    /// The perturbation for `z` in eval mode.
    pub fn generate(&self, z: &NoiseVector) -> Result<Perturbation> {
        if z.values.len() != NOISE_DIM {
            return Err(Error::shape(format!(
                "noise has {} entries, expected {NOISE_DIM}",
                z.values.len()
            )));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![1, NOISE_DIM], z.values.clone())?);
        let y = self.forward_eval(&mut tape, zv, true)?;
        let samples = tape.value(y)?.data().to_vec();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptGenerator);
        }
        Ok(Perturbation {
            samples,
            noise_seed: z.seed,
            generator_hash: Some(self.checksum()),
        })
    }

    /// SHA-256 over parameters and batchnorm running statistics.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let stats = self
            .blocks
            .iter()
            .flat_map(|b| b.bn.stats.mean.iter().chain(&b.bn.stats.var));
        for v in self.params().into_iter().flat_map(|p| p.value().data()).chain(stats) {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// Parameters followed by batchnorm running statistics.
    pub fn to_checkpoint(&self, seed: u64, metadata: serde_json::Value) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            tensors.push((
                format!("up{i}.bn.running_mean"),
                Tensor::vector(b.bn.stats.mean.clone()),
            ));
            tensors.push((format!("up{i}.bn.running_var"), Tensor::vector(b.bn.stats.var.clone())));
        }
        Ok(Checkpoint {
            kind: "generator".into(),
            config: serde_json::to_value(&self.config)?,
            metadata,
            seed,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("generator")?;
        let config: GeneratorConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut g = Self::new(config, ckpt.seed)?;
        for p in g.params_mut() {
            let shape = p.shape().to_vec();
            let mut buf = vec![0.0; p.len()];
            ckpt.restore([(p.name(), buf.as_mut_slice(), shape.as_slice())])?;
            p.set_data(&buf);
        }
        for (i, b) in g.blocks.iter_mut().enumerate() {
            let c = b.bn.stats.mean.len();
            let (mean_name, var_name) = (format!("up{i}.bn.running_mean"), format!("up{i}.bn.running_var"));
            ckpt.restore([
                (mean_name.as_str(), b.bn.stats.mean.as_mut_slice(), &[c][..]),
                (var_name.as_str(), b.bn.stats.var.as_mut_slice(), &[c][..]),
            ])?;
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path, seed: u64, metadata: serde_json::Value) -> Result<()> {
        self.to_checkpoint(seed, metadata)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}
