//! Register-tiled 1-D correlation loops.
//!
//! Each output element still accumulates its terms in ascending tap order,
//! so tiling changes speed, not results.

const TILE: usize = 16;

/// `out[t] += Σ_k w[k] · x[t + k]` for every `t`.
pub(super) fn correlate_acc(out: &mut [f64], x: &[f64], w: &[f64]) {
    let n = out.len();
    debug_assert!(x.len() + 1 >= n + w.len());
    let mut t0 = 0;
    while t0 + TILE <= n {
        let mut acc: [f64; TILE] = out[t0..t0 + TILE].try_into().unwrap();
        for (k, &wv) in w.iter().enumerate() {
            let xs: &[f64; TILE] = x[t0 + k..t0 + k + TILE].try_into().unwrap();
            for j in 0..TILE {
                acc[j] += wv * xs[j];
            }
        }
        out[t0..t0 + TILE].copy_from_slice(&acc);
        t0 += TILE;
    }
    for t in t0..n {
        let mut acc = out[t];
        for (k, &wv) in w.iter().enumerate() {
            acc += wv * x[t + k];
        }
        out[t] = acc;
    }
}

/// `dw[k] += Σ_t g[t] · x[t + k]` for every `k`.
pub(super) fn correlate_reduce(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let kn = dw.len();
    let mut k0 = 0;
    while k0 + TILE <= kn {
        let mut acc = [0.0; TILE];
        for (t, &gv) in g.iter().enumerate() {
            let xs: &[f64; TILE] = x[t + k0..t + k0 + TILE].try_into().unwrap();
            for j in 0..TILE {
                acc[j] += gv * xs[j];
            }
        }
        for j in 0..TILE {
            dw[k0 + j] += acc[j];
        }
        k0 += TILE;
    }
    for k in k0..kn {
        let mut acc = 0.0;
        for (t, &gv) in g.iter().enumerate() {
            acc += gv * x[t + k];
        }
        dw[k] += acc;
    }
}
