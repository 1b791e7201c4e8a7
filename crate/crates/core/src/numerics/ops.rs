//! Forward rules and their reverse-mode counterparts.
//!
//! Activations are laid out `[N, C, L]` (rank 2 `[C, L]` is accepted where
//! noted and treated as `N = 1`). All reductions run in ascending index
//! order so repeated runs are bit-identical.

use super::kernels::{correlate_acc, correlate_reduce};
use super::tape::{NormKind, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

fn ncl(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::shape(format!(
            "{what} expects [C, L] or [N, C, L], got {shape:?}"
        ))),
    }
}

fn with_len(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = len;
    s
}

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape.split_last() {
        Some((&k, rest)) if !rest.is_empty() => Ok((rest.iter().product(), k)),
        _ => Err(Error::shape(format!("{what} expects rank >= 2, got {shape:?}"))),
    }
}

impl Tape {
    /// Cross-correlation with zero padding; `b` optional.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let (n, cin, l) = ncl(&xs, "conv1d input")?;
        let (cout, wcin, k) = match *self.nodes[wi].value.shape() {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::shape(format!("conv1d weight must be rank 3, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv1d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d stride must be >= 1"));
        }
        if k == 0 || k > l + 2 * pad {
            return Err(Error::shape(format!(
                "conv1d kernel {k} longer than padded input {}",
                l + 2 * pad
            )));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != cout {
                return Err(Error::shape("conv1d bias length differs from output channels"));
            }
        }
        let lp = l + 2 * pad;
        let lout = (lp - k) / stride + 1;
        let xd = self.nodes[xi].value.data();
        let wd = self.nodes[wi].value.data();
        let bd = bi.map(|bi| self.nodes[bi].value.data());
        let mut out = vec![0.0; n * cout * lout];
        let mut xp = vec![0.0; cin * lp];
        for s in 0..n {
            let xs_ = &xd[s * cin * l..(s + 1) * cin * l];
            let xrows: &[f64] = if pad == 0 {
                xs_
            } else {
                for ci in 0..cin {
                    xp[ci * lp + pad..ci * lp + pad + l].copy_from_slice(&xs_[ci * l..(ci + 1) * l]);
                }
                &xp
            };
            for co in 0..cout {
                let orow = &mut out[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                let bias = bd.map_or(0.0, |b| b[co]);
                orow.iter_mut().for_each(|o| *o = bias);
                for ci in 0..cin {
                    let xrow = &xrows[ci * lp..(ci + 1) * lp];
                    let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    if stride == 1 {
                        correlate_acc(orow, xrow, wrow);
                    } else {
                        for (t, o) in orow.iter_mut().enumerate() {
                            for (kk, &wv) in wrow.iter().enumerate() {
                                *o += wv * xrow[t * stride + kk];
                            }
                        }
                    }
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = cout;
        shape[r - 1] = lout;
        let rg = self.requires(xi) || self.requires(wi) || bi.is_some_and(|b| self.requires(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 along the last axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() == 0 || t.is_empty() {
            return Err(Error::shape("upsample2 on empty input"));
        }
        let l = *t.shape().last().unwrap();
        let mut out = Vec::with_capacity(t.len() * 2);
        for &v in t.data() {
            out.push(v);
            out.push(v);
        }
        let shape = with_len(t.shape(), 2 * l);
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2 { x: xi }, rg))
    }

    /// Batch normalization over `[N, C, L]`, per channel.
    ///
    /// Train mode uses batch statistics and folds them into `stats` with
    /// `momentum`; eval mode reads `stats` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let (n, c, l) = ncl(&xs, "batchnorm1d")?;
        if self.nodes[gi].value.len() != c || self.nodes[bi].value.len() != c || stats.mean.len() != c {
            return Err(Error::shape("batchnorm1d parameter length differs from channels"));
        }
        let m = n * l;
        let xd = self.nodes[xi].value.data();
        let (mean, inv_std) = if train {
            if m < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batchnorm1d in train mode needs >= 2 values per channel, got {m}"
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                        s += v;
                    }
                }
                let mu = s / m as f64;
                let mut q = 0.0;
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / m as f64;
            }
            for ch in 0..c {
                let unbiased = var[ch] * m as f64 / (m - 1) as f64;
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv)
        };
        let gd = self.nodes[gi].value.data();
        let bd = self.nodes[bi].value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = gd[ch] * *h + bd[ch];
                }
            }
        }
        let kind = if train {
            NormKind::BatchTrain { channels: c, len: l }
        } else {
            NormKind::BatchEval { channels: c, len: l }
        };
        let rg = self.requires(xi) || self.requires(gi) || self.requires(bi);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::Norm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                kind,
            },
            rg,
        ))
    }

    /// Per-sample normalization of `[N, C, L]` with a per-channel affine.
    ///
    /// `per_channel` normalizes each channel's time series on its own;
    /// otherwise statistics span the whole `C × L` feature map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, per_channel: bool, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let (_, c, l) = ncl(&xs, "layernorm")?;
        if self.nodes[gi].value.len() != c || self.nodes[bi].value.len() != c {
            return Err(Error::shape("layernorm parameter length differs from channels"));
        }
        let row = if per_channel { l } else { c * l };
        if row < 2 {
            return Err(Error::DegenerateBatch("layernorm over fewer than 2 values".into()));
        }
        let xd = self.nodes[xi].value.data();
        let gd = self.nodes[gi].value.data();
        let bd = self.nodes[bi].value.data();
        let rows = xd.len() / row;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let seg = &xd[r * row..(r + 1) * row];
            let mu = seg.iter().sum::<f64>() / row as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (j, &v) in seg.iter().enumerate() {
                let flat = r * row + j;
                let ch = (flat / l) % c;
                let h = (v - mu) * inv;
                xhat[flat] = h;
                out[flat] = gd[ch] * h + bd[ch];
            }
        }
        let rg = self.requires(xi) || self.requires(gi) || self.requires(bi);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::Norm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                kind: NormKind::Layer {
                    channels: c,
                    len: l,
                    per_channel,
                },
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x: xi }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::LeakyRelu { x: xi, alpha }, rg))
    }

    /// Affine map over the last axis: `x [.., in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let (rows, fin) = rows_cols(&xs, "linear")?;
        let (fout, win) = match *self.nodes[wi].value.shape() {
            [o, i] => (o, i),
            ref s => return Err(Error::shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if win != fin {
            return Err(Error::shape(format!(
                "linear: input has {fin} features, weight expects {win}"
            )));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != fout {
                return Err(Error::shape("linear bias length differs from outputs"));
            }
        }
        let xd = self.nodes[xi].value.data();
        let wd = self.nodes[wi].value.data();
        let bd = bi.map(|bi| self.nodes[bi].value.data());
        let mut out = vec![0.0; rows * fout];
        for r in 0..rows {
            let xr = &xd[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                let mut s = bd.map_or(0.0, |b| b[o]);
                for (&a, &b) in wr.iter().zip(xr) {
                    s += a * b;
                }
                out[r * fout + o] = s;
            }
        }
        let shape = with_len(&xs, fout);
        let rg = self.requires(xi) || self.requires(wi) || bi.is_some_and(|b| self.requires(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    /// Max over windows of the last axis; the first maximal index wins ties.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let (rows, l) = rows_cols(t.shape(), "maxpool1d")?;
        if window == 0 || stride == 0 || window > l {
            return Err(Error::shape(format!(
                "maxpool1d window {window} / stride {stride} invalid for length {l}"
            )));
        }
        let lout = (l - window) / stride + 1;
        let xd = t.data();
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for o in 0..lout {
                let start = r * l + o * stride;
                let mut best = start;
                for j in start + 1..start + window {
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let shape = with_len(t.shape(), lout);
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x: xi, argmax }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let (rows, k) = match t.rank() {
            1 => (1, t.len()),
            _ => rows_cols(t.shape(), "log_softmax")?,
        };
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * k..(r + 1) * k];
            out[r * k..(r + 1) * k].copy_from_slice(&log_softmax_row(row));
        }
        let shape = t.shape().to_vec();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x: xi }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.clone().reshaped(shape)?;
        let rg = self.requires(xi);
        Ok(self.push(t, Op::Reshape { x: xi }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("sub {:?} - {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a: ai, b: bi }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x: xi, c }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: f64 = self.nodes[xi].value.data().iter().sum();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        if t.is_empty() {
            return Err(Error::shape("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires(xi);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: xi }, rg))
    }

    /// `out[r] = x[r, idx[r]]` for `x [R, K]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let (rows, k) = rows_cols(t.shape(), "pick")?;
        if idx.len() != rows {
            return Err(Error::shape(format!("pick: {} indices for {rows} rows", idx.len())));
        }
        let mut flat = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= k {
                return Err(Error::LabelOutOfRange { label: j, classes: k });
            }
            flat.push(r * k + j);
        }
        let out: Vec<f64> = flat.iter().map(|&f| t.data()[f]).collect();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::vector(out), Op::Pick { x: xi, flat }, rg))
    }

    /// `out[r] = max_{j != idx[r]} x[r, j]` for `x [R, K]`, `K >= 2`.
    pub fn max_except(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let (rows, k) = rows_cols(t.shape(), "max_except")?;
        if k < 2 {
            return Err(Error::config("max_except needs at least 2 classes"));
        }
        if idx.len() != rows {
            return Err(Error::shape(format!(
                "max_except: {} indices for {rows} rows",
                idx.len()
            )));
        }
        let mut flat = Vec::with_capacity(rows);
        for (r, &ex) in idx.iter().enumerate() {
            if ex >= k {
                return Err(Error::LabelOutOfRange { label: ex, classes: k });
            }
            let row = &t.data()[r * k..(r + 1) * k];
            let j = argmax_except(row, ex);
            flat.push(r * k + j);
        }
        let out: Vec<f64> = flat.iter().map(|&f| t.data()[f]).collect();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::vector(out), Op::MaxExcept { x: xi, flat }, rg))
    }

    /// `min(x, limit)` elementwise; the clamped branch has zero gradient.
    pub fn clamp_max(&mut self, x: Var, limit: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let out: Vec<f64> = t.data().iter().map(|&v| if v < limit { v } else { limit }).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::ClampMax { x: xi, limit }, rg))
    }

    /// Euclidean norm of each leading-axis slice: `[R, ...] -> [R]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() == 0 || t.shape()[0] == 0 {
            return Err(Error::shape("row_norm on empty input"));
        }
        let rows = t.shape()[0];
        let m = t.len() / rows;
        let out: Vec<f64> = (0..rows)
            .map(|r| t.data()[r * m..(r + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.requires(xi);
        Ok(self.push(Tensor::vector(out), Op::RowNorm { x: xi }, rg))
    }

    /// Tile the last axis cyclically to `len` samples.
    pub fn repeat_clip(&mut self, x: Var, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let (rows, period) = match t.rank() {
            1 => (1, t.len()),
            _ => rows_cols(t.shape(), "repeat_clip")?,
        };
        if period == 0 || len == 0 {
            return Err(Error::shape("repeat_clip with empty source or target"));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let src = &t.data()[r * period..(r + 1) * period];
            out.extend((0..len).map(|i| src[i % period]));
        }
        let shape = with_len(t.shape(), len);
        let rg = self.requires(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::RepeatClip { x: xi, period }, rg))
    }

    pub(super) fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::Conv1d { x, w, b, stride, pad } => {
                let xt = &self.nodes[x].value;
                let wt = &self.nodes[w].value;
                let (n, cin, l) = ncl(xt.shape(), "").unwrap();
                let (cout, k) = (wt.shape()[0], wt.shape()[2]);
                let lp = l + 2 * pad;
                let lout = (lp - k) / stride + 1;
                if let Some(b) = b {
                    self.accumulate(grads, b, |db| {
                        for s in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += g[(s * cout + co) * lout..(s * cout + co + 1) * lout]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    });
                }
                let xd = xt.data();
                let wd = wt.data();
                let padded = |s: usize| -> Vec<f64> {
                    let mut xp = vec![0.0; cin * lp];
                    for ci in 0..cin {
                        xp[ci * lp + pad..ci * lp + pad + l]
                            .copy_from_slice(&xd[(s * cin + ci) * l..(s * cin + ci + 1) * l]);
                    }
                    xp
                };
                if self.requires(w) {
                    self.accumulate(grads, w, |dw| {
                        for s in 0..n {
                            let xp = padded(s);
                            for co in 0..cout {
                                let gy = &g[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                                for ci in 0..cin {
                                    let xrow = &xp[ci * lp..(ci + 1) * lp];
                                    let dwrow = &mut dw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                    if stride == 1 {
                                        correlate_reduce(dwrow, gy, xrow);
                                    } else {
                                        for (kk, d) in dwrow.iter_mut().enumerate() {
                                            let mut acc = 0.0;
                                            for (t, &a) in gy.iter().enumerate() {
                                                acc += a * xrow[t * stride + kk];
                                            }
                                            *d += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.requires(x) {
                    self.accumulate(grads, x, |dx| {
                        let mut dxp = vec![0.0; cin * lp];
                        // stride 1: dx = g (zero-extended by k-1 each side) correlated
                        // with the flipped kernel
                        let wflip: Vec<f64> = wd.chunks(k).flat_map(|r| r.iter().rev().copied()).collect();
                        let mut gpad = vec![0.0; lout + 2 * (k - 1)];
                        for s in 0..n {
                            dxp.iter_mut().for_each(|v| *v = 0.0);
                            for co in 0..cout {
                                let gy = &g[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                                if stride == 1 {
                                    gpad[k - 1..k - 1 + lout].copy_from_slice(gy);
                                }
                                for ci in 0..cin {
                                    let drow = &mut dxp[ci * lp..(ci + 1) * lp];
                                    if stride == 1 {
                                        let wrow = &wflip[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                        correlate_acc(drow, &gpad, wrow);
                                    } else {
                                        let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                        for (kk, &wv) in wrow.iter().enumerate() {
                                            for (t, &a) in gy.iter().enumerate() {
                                                drow[t * stride + kk] += wv * a;
                                            }
                                        }
                                    }
                                }
                            }
                            for ci in 0..cin {
                                let dst = &mut dx[(s * cin + ci) * l..(s * cin + ci + 1) * l];
                                for (d, &v) in dst.iter_mut().zip(&dxp[ci * lp + pad..ci * lp + pad + l]) {
                                    *d += v;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Upsample2 { x } => self.accumulate(grads, x, |dx| {
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[2 * j] + g[2 * j + 1];
                }
            }),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let gd = self.nodes[gamma].value.data();
                let (c, l) = match *kind {
                    NormKind::BatchTrain { channels, len }
                    | NormKind::BatchEval { channels, len }
                    | NormKind::Layer { channels, len, .. } => (channels, len),
                };
                let chan = |flat: usize| (flat / l) % c;
                self.accumulate(grads, gamma, |dg| {
                    for (f, (&gy, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[chan(f)] += gy * h;
                    }
                });
                self.accumulate(grads, beta, |db| {
                    for (f, &gy) in g.iter().enumerate() {
                        db[chan(f)] += gy;
                    }
                });
                if !self.requires(x) {
                    return;
                }
                match *kind {
                    NormKind::BatchEval { .. } => self.accumulate(grads, x, |dx| {
                        for (f, d) in dx.iter_mut().enumerate() {
                            let ch = chan(f);
                            *d += g[f] * gd[ch] * inv_std[ch];
                        }
                    }),
                    NormKind::BatchTrain { .. } => {
                        let n = g.len() / (c * l);
                        let m = (n * l) as f64;
                        let mut sum_dh = vec![0.0; c];
                        let mut sum_dh_h = vec![0.0; c];
                        for f in 0..g.len() {
                            let ch = chan(f);
                            let dh = g[f] * gd[ch];
                            sum_dh[ch] += dh;
                            sum_dh_h[ch] += dh * xhat[f];
                        }
                        self.accumulate(grads, x, |dx| {
                            for (f, d) in dx.iter_mut().enumerate() {
                                let ch = chan(f);
                                let dh = g[f] * gd[ch];
                                *d += inv_std[ch] / m * (m * dh - sum_dh[ch] - xhat[f] * sum_dh_h[ch]);
                            }
                        });
                    }
                    NormKind::Layer { per_channel, .. } => {
                        let row = if per_channel { l } else { c * l };
                        let m = row as f64;
                        self.accumulate(grads, x, |dx| {
                            for r in 0..g.len() / row {
                                let span = r * row..(r + 1) * row;
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for f in span.clone() {
                                    let dh = g[f] * gd[chan(f)];
                                    s1 += dh;
                                    s2 += dh * xhat[f];
                                }
                                for f in span {
                                    let dh = g[f] * gd[chan(f)];
                                    dx[f] += inv_std[r] / m * (m * dh - s1 - xhat[f] * s2);
                                }
                            }
                        });
                    }
                }
            }
            &Op::Relu { x } => {
                let xd = self.nodes[x].value.data();
                self.accumulate(grads, x, |dx| {
                    for ((d, &gy), &v) in dx.iter_mut().zip(g).zip(xd) {
                        if v > 0.0 {
                            *d += gy;
                        }
                    }
                });
            }
            &Op::LeakyRelu { x, alpha } => {
                let xd = self.nodes[x].value.data();
                self.accumulate(grads, x, |dx| {
                    for ((d, &gy), &v) in dx.iter_mut().zip(g).zip(xd) {
                        *d += if v > 0.0 { gy } else { alpha * gy };
                    }
                });
            }
            &Op::Linear { x, w, b } => {
                let xt = &self.nodes[x].value;
                let wt = &self.nodes[w].value;
                let (fout, fin) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.len() / fin;
                if let Some(b) = b {
                    self.accumulate(grads, b, |db| {
                        for r in 0..rows {
                            for (d, &gy) in db.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                                *d += gy;
                            }
                        }
                    });
                }
                self.accumulate(grads, w, |dw| {
                    for r in 0..rows {
                        let xr = &xt.data()[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let gy = g[r * fout + o];
                            for (d, &xv) in dw[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                                *d += gy * xv;
                            }
                        }
                    }
                });
                self.accumulate(grads, x, |dx| {
                    for r in 0..rows {
                        let dr = &mut dx[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let gy = g[r * fout + o];
                            for (d, &wv) in dr.iter_mut().zip(&wt.data()[o * fin..(o + 1) * fin]) {
                                *d += gy * wv;
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |dx| {
                for (&j, &gy) in argmax.iter().zip(g) {
                    dx[j] += gy;
                }
            }),
            &Op::LogSoftmax { x } => {
                let y = node.value.data();
                let k = match node.value.rank() {
                    1 => y.len(),
                    _ => *node.value.shape().last().unwrap(),
                };
                self.accumulate(grads, x, |dx| {
                    for r in 0..y.len() / k {
                        let span = r * k..(r + 1) * k;
                        let gs: f64 = g[span.clone()].iter().sum();
                        for f in span {
                            dx[f] += g[f] - y[f].exp() * gs;
                        }
                    }
                });
            }
            &Op::Reshape { x } => self.accumulate(grads, x, |dx| {
                for (d, &gy) in dx.iter_mut().zip(g) {
                    *d += gy;
                }
            }),
            &Op::Add { a, b } => {
                for t in [a, b] {
                    self.accumulate(grads, t, |d| {
                        for (d, &gy) in d.iter_mut().zip(g) {
                            *d += gy;
                        }
                    });
                }
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, |d| {
                    for (d, &gy) in d.iter_mut().zip(g) {
                        *d += gy;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for (d, &gy) in d.iter_mut().zip(g) {
                        *d -= gy;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |d| {
                    for ((d, &gy), &o) in d.iter_mut().zip(g).zip(bd) {
                        *d += gy * o;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((d, &gy), &o) in d.iter_mut().zip(g).zip(ad) {
                        *d += gy * o;
                    }
                });
            }
            &Op::Scale { x, c } => self.accumulate(grads, x, |dx| {
                for (d, &gy) in dx.iter_mut().zip(g) {
                    *d += c * gy;
                }
            }),
            &Op::Sum { x } => self.accumulate(grads, x, |dx| {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }),
            &Op::Mean { x } => self.accumulate(grads, x, |dx| {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }),
            Op::Pick { x, flat } | Op::MaxExcept { x, flat } => self.accumulate(grads, *x, |dx| {
                for (&f, &gy) in flat.iter().zip(g) {
                    dx[f] += gy;
                }
            }),
            &Op::ClampMax { x, limit } => {
                let xd = self.nodes[x].value.data();
                self.accumulate(grads, x, |dx| {
                    for ((d, &gy), &v) in dx.iter_mut().zip(g).zip(xd) {
                        if v < limit {
                            *d += gy;
                        }
                    }
                });
            }
            &Op::RowNorm { x } => {
                let xd = self.nodes[x].value.data();
                let norms = node.value.data();
                let m = xd.len() / norms.len();
                self.accumulate(grads, x, |dx| {
                    for (r, (&nr, &gy)) in norms.iter().zip(g).enumerate() {
                        if nr > 0.0 {
                            for f in r * m..(r + 1) * m {
                                dx[f] += gy * xd[f] / nr;
                            }
                        }
                    }
                });
            }
            &Op::RepeatClip { x, period } => {
                let len = *node.value.shape().last().unwrap();
                self.accumulate(grads, x, |dx| {
                    for r in 0..g.len() / len {
                        for i in 0..len {
                            dx[r * period + i % period] += g[r * len + i];
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let gs = op.backward(&ins, &node.value, g);
                for (&j, gj) in inputs.iter().zip(gs) {
                    if let Some(gj) = gj {
                        self.accumulate(grads, j, |d| {
                            for (d, v) in d.iter_mut().zip(gj) {
                                *d += v;
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry other than `skip`; lowest index on ties.
pub(crate) fn argmax_except(row: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != skip && (best == usize::MAX || v > row[best]) {
            best = j;
        }
    }
    best
}

/// Index of the largest entry; lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
