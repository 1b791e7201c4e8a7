//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Module, Tape, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-12)` with Euclidean norms over one
/// parameter's probed entries; non-finite inputs count as infinite.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.iter().chain(numeric).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let a = norm(&mut analytic.iter().copied());
    let n = norm(&mut numeric.iter().copied());
    diff / a.max(n).max(1e-12)
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).ok().and_then(|t| t.item().ok()).unwrap_or(f64::NAN)
}

/// One-sided slopes that disagree this much mean the probe straddled a
/// kink (ReLU, max-pool switch, clamp) and the central difference is not a
/// derivative estimate.
const KINK_TOL: f64 = 1e-3;

/// Central difference from `f(x+ε)`, `f(x)`, `f(x−ε)`, or `None` at a kink.
fn central(fp: f64, f0: f64, fm: f64, eps: f64) -> Option<f64> {
    let (fwd, bwd) = ((fp - f0) / eps, (f0 - fm) / eps);
    // floor: slope noise from rounding f itself
    let scale = fwd.abs().max(bwd.abs()).max(1e-10 * f0.abs().max(1.0) / eps);
    ((fwd - bwd).abs() <= KINK_TOL * scale).then_some((fp - fm) / (2.0 * eps))
}

/// Error over the probes that did not straddle a kink; infinite when more
/// than half did.
fn tensor_error(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let (a, n): (Vec<f64>, Vec<f64>) = analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .unzip();
    if 2 * a.len() < analytic.len() {
        return f64::INFINITY;
    }
    relative_error(&a, &n)
}

/// Check `f` with respect to every entry of `inputs`. Returns the largest
/// per-input relative error; probes that straddle a kink are left out.
pub fn grad_check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.of(v, &tape)).collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(scalar_of(&t, out))
    };

    let f0 = scalar_of(&tape, loss);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = orig;
            numeric.push(central(fp, f0, fm, eps));
        }
        worst = worst.max(tensor_error(a, &numeric));
    }
    Ok(worst)
}

/// Check `f` with respect to the parameters of `model`.
///
/// With `per_param = Some(k)` at most `k` entries per parameter are probed,
/// chosen by `seed`.
pub fn grad_check_module<M, F>(model: &mut M, eps: f64, per_param: Option<usize>, seed: u64, mut f: F) -> Result<f64>
where
    M: Module,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    let grads = tape.backward(loss)?;
    let f0 = scalar_of(&tape, loss);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        let n = a.len();
        let entries: Vec<usize> = match per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut probed = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for e in entries {
            let orig = model.params()[pi].value().data()[e];
            let mut probe = |m: &mut M, value: f64| -> Result<f64> {
                m.params_mut()[pi].update(|d| d[e] = value);
                let mut t = Tape::new();
                let out = f(m, &mut t)?;
                Ok(scalar_of(&t, out))
            };
            let fp = probe(model, orig + eps)?;
            let fm = probe(model, orig - eps)?;
            model.params_mut()[pi].update(|d| d[e] = orig);
            probed.push(a[e]);
            numeric.push(central(fp, f0, fm, eps));
        }
        worst = worst.max(tensor_error(&probed, &numeric));
    }
    Ok(worst)
}
