//! Learnable band-pass front end.
//!
//! Each filter owns two unconstrained scalars. They are projected onto a
//! valid band `0 <= f1 < f2 <= 0.5` (cycles per sample), turned into the
//! difference of two low-pass sinc kernels and tapered by a Hamming window.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{CustomOp, Param, Tape, Tensor, Var};

/// Narrowest band the projection allows: 50 Hz at 16 kHz.
pub const MIN_BAND: f64 = 50.0 / 16000.0;

/// Project raw cutoffs onto a valid band `(f1, f2)`.
pub fn project_band(f1_raw: f64, f2_raw: f64) -> (f64, f64) {
    let f1 = f1_raw.abs().clamp(0.0, 0.5 - MIN_BAND);
    let f2 = (f1 + MIN_BAND + (f2_raw - f1_raw).abs()).max(f1 + MIN_BAND).min(0.5);
    (f1, f2)
}

/// Partial derivatives of the projection:
/// `(df1/da, df2/da, df2/db)` for `a = f1_raw`, `b = f2_raw`.
fn project_jacobian(a: f64, b: f64) -> (f64, f64, f64) {
    let (f1, _) = project_band(a, b);
    let df1_da = if a.abs() < 0.5 - MIN_BAND { sign(a) } else { 0.0 };
    let u = f1 + MIN_BAND + (b - a).abs();
    let du = if u < 0.5 { 1.0 } else { 0.0 };
    let s = sign(b - a);
    (df1_da, du * (df1_da - s), du * s)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `2f · sinc(2π f n)` with `sinc(x) = sin(x)/x`, `sinc(0) = 1`.
fn lowpass(f: f64, n: usize) -> f64 {
    if n == 0 {
        2.0 * f
    } else {
        let n = n as f64;
        (2.0 * PI * f * n).sin() / (PI * n)
    }
}

fn lowpass_df(f: f64, n: usize) -> f64 {
    2.0 * (2.0 * PI * f * n as f64).cos()
}

/// Hamming taps for offsets `-(K-1)/2 ..= (K-1)/2`, evaluated on `|n|` so the
/// window is exactly symmetric.
pub fn hamming(k: usize) -> Vec<f64> {
    let half = (k - 1) / 2;
    (0..k)
        .map(|i| {
            let n = i.abs_diff(half) as f64;
            if half == 0 {
                1.0
            } else {
                0.54 + 0.46 * (PI * n / half as f64).cos()
            }
        })
        .collect()
}

/// Band-pass taps for one filter from its raw parameters; `window = None`
/// gives the bare difference of sincs.
pub fn sinc_kernel(f1_raw: f64, f2_raw: f64, k: usize, window: Option<&[f64]>) -> Vec<f64> {
    let (f1, f2) = project_band(f1_raw, f2_raw);
    band_kernel(f1, f2, k, window)
}

/// Taps for an already valid band `(f1, f2)`.
pub fn band_kernel(f1: f64, f2: f64, k: usize, window: Option<&[f64]>) -> Vec<f64> {
    assert!(k % 2 == 1, "sinc kernel length must be odd");
    let half = (k - 1) / 2;
    (0..k)
        .map(|i| {
            let n = i.abs_diff(half);
            let h = lowpass(f2, n) - lowpass(f1, n);
            window.map_or(h, |w| h * w[i])
        })
        .collect()
}

/// Hz → mel (HTK).
fn to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn from_mel(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
pub struct SincLayer {
    /// `[F, 2]` raw `(f1, f2)` per filter
    pub cutoffs: Param,
    pub kernel_len: usize,
    pub window: Vec<f64>,
}

impl SincLayer {
    /// Lower cutoffs mel-spaced over `[low_hz, high_hz]`, each band
    /// `band_hz` wide.
    pub fn new(
        num_filters: usize,
        kernel_len: usize,
        sample_rate: f64,
        low_hz: f64,
        high_hz: f64,
        band_hz: f64,
    ) -> Self {
        let (lo, hi) = (to_mel(low_hz), to_mel(high_hz));
        let mut raw = Vec::with_capacity(2 * num_filters);
        for i in 0..num_filters {
            let t = if num_filters == 1 {
                0.0
            } else {
                i as f64 / (num_filters - 1) as f64
            };
            let f1 = (from_mel(lo + t * (hi - lo)) / sample_rate).min(0.5 - band_hz / sample_rate);
            raw.push(f1);
            raw.push(f1 + band_hz / sample_rate - MIN_BAND);
        }
        Self {
            cutoffs: Param::new("sinc.cutoffs", Tensor::new(vec![num_filters, 2], raw).unwrap()),
            kernel_len,
            window: hamming(kernel_len),
        }
    }

    /// Random bands, for tests.
    pub fn random(num_filters: usize, kernel_len: usize, rng: &mut impl Rng) -> Self {
        let raw: Vec<f64> = (0..num_filters)
            .flat_map(|_| {
                let a = rng.random_range(0.01..0.3);
                [a, a + rng.random_range(0.02..0.15)]
            })
            .collect();
        Self {
            cutoffs: Param::new("sinc.cutoffs", Tensor::new(vec![num_filters, 2], raw).unwrap()),
            kernel_len,
            window: hamming(kernel_len),
        }
    }

    pub fn num_filters(&self) -> usize {
        self.cutoffs.shape()[0]
    }

    /// Projected `(f1, f2)` per filter.
    pub fn bands(&self) -> Vec<(f64, f64)> {
        self.cutoffs
            .value()
            .data()
            .chunks(2)
            .map(|c| project_band(c[0], c[1]))
            .collect()
    }

    /// Materialize the `[F, 1, K]` kernel bank on `tape`.
    pub fn kernels(&self, tape: &mut Tape, frozen: bool) -> Result<Var> {
        let raw = if frozen {
            tape.frozen(&self.cutoffs)
        } else {
            tape.param(&self.cutoffs)
        };
        let k = self.kernel_len;
        let f = self.num_filters();
        let data: Vec<f64> = self
            .cutoffs
            .value()
            .data()
            .chunks(2)
            .flat_map(|c| sinc_kernel(c[0], c[1], k, Some(&self.window)))
            .collect();
        tape.custom(
            &[raw],
            Tensor::new(vec![f, 1, k], data)?,
            Box::new(SincKernelOp {
                window: self.window.clone(),
            }),
        )
    }

    /// `[N, 1, L] -> [N, F, L - K + 1]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let w = self.kernels(tape, frozen)?;
        tape.conv1d(x, w, None, 1, 0)
    }
}

struct SincKernelOp {
    window: Vec<f64>,
}

impl CustomOp for SincKernelOp {
    fn name(&self) -> &'static str {
        "sinc_kernel"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let raw = inputs[0].data();
        let k = self.window.len();
        let half = (k - 1) / 2;
        let mut out = vec![0.0; raw.len()];
        for (fi, c) in raw.chunks(2).enumerate() {
            let (a, b) = (c[0], c[1]);
            let (f1, f2) = project_band(a, b);
            let (df1_da, df2_da, df2_db) = project_jacobian(a, b);
            let mut d_f1 = 0.0;
            let mut d_f2 = 0.0;
            for i in 0..k {
                let n = i.abs_diff(half);
                let gw = g[fi * k + i] * self.window[i];
                d_f2 += gw * lowpass_df(f2, n);
                d_f1 -= gw * lowpass_df(f1, n);
            }
            out[2 * fi] = d_f1 * df1_da + d_f2 * df2_da;
            out[2 * fi + 1] = d_f2 * df2_db;
        }
        vec![Some(out)]
    }
}
