//! Parameterized building blocks shared by the victim and the generator.

use rand::Rng;

use super::ops::RunningStats;
use super::{Param, Tape, Tensor, Var};
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Param,
    /// absent when a normalization that cancels it follows
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Uniform init in `±1/sqrt(c_in · k)`.
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let mut c = Self::without_bias(name, cin, cout, k, pad, rng);
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        c.bias = Some(Param::new(
            format!("{name}.bias"),
            Tensor::vector(uniform(rng, cout, bound)),
        ));
        c
    }

    pub fn without_bias(name: &str, cin: usize, cout: usize, k: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![cout, cin, k], uniform(rng, cout * cin * k, bound)).unwrap(),
            ),
            bias: None,
            stride: 1,
            pad,
        }
    }

    /// All-zero weights and bias.
    pub fn zeroed(name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k])),
            bias: Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let bind = |tape: &mut Tape, p: &Param| if frozen { tape.frozen(p) } else { tape.param(p) };
        let w = bind(tape, &self.weight);
        let b = self.bias.as_ref().map(|b| bind(tape, b));
        tape.conv1d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![fout, fin], uniform(rng, fout * fin, bound)).unwrap(),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::vector(uniform(rng, fout, bound))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = bind2(tape, &self.weight, &self.bias, frozen);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub stats: RunningStats,
}

impl BatchNorm1d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool, frozen: bool) -> Result<Var> {
        let (g, b) = bind2(tape, &self.gamma, &self.beta, frozen);
        tape.batchnorm1d(x, g, b, &mut self.stats, train, BN_MOMENTUM, NORM_EPS)
    }

    /// Eval-mode forward; leaves the running statistics untouched.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let (g, b) = bind2(tape, &self.gamma, &self.beta, frozen);
        let mut stats = self.stats.clone();
        tape.batchnorm1d(x, g, b, &mut stats, false, BN_MOMENTUM, NORM_EPS)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub per_channel: bool,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize, per_channel: bool) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            per_channel,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let (g, b) = bind2(tape, &self.gamma, &self.beta, frozen);
        tape.layernorm(x, g, b, self.per_channel, NORM_EPS)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

fn bind2(tape: &mut Tape, a: &Param, b: &Param, frozen: bool) -> (Var, Var) {
    if frozen {
        (tape.frozen(a), tape.frozen(b))
    } else {
        (tape.param(a), tape.param(b))
    }
}
