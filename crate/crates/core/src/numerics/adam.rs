use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the parameter order
/// given at construction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moment_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    /// One update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.len() {
                return Err(Error::shape(format!("adam: gradient size mismatch for `{}`", p.name())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: p.name().to_string(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            p.update(|data| {
                for i in 0..data.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Param::new("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p.value().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new("w", Tensor::vector(vec![0.0, 0.0]));
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[vec![0.37, -12.0]]).unwrap();
        let d = p.value().data();
        assert!((d[0] + 1e-3).abs() < 1e-10, "{}", d[0]);
        assert!((d[1] - 1e-3).abs() < 1e-10, "{}", d[1]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut w = Param::new("w", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &[&w]);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = tape.param(&w);
            let three = tape.constant(Tensor::vector(vec![3.0]));
            let d = tape.sub(wv, three).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            let g = tape.backward(loss).unwrap().wrt(&w).unwrap();
            adam.step(&mut [&mut w], &[g]).unwrap();
        }
        let v = w.value().data()[0];
        assert!((v - 3.0).abs() < 0.05, "w = {v}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Param::new("head.weight", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        let err = adam.step(&mut [&mut p], &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
        assert_eq!(p.value().data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
