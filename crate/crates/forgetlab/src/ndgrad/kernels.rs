//! Raw f64 routines shared by the autodiff graph and the no-grad inference path.
//!
//! Keeping a single set of kernels means both paths produce bit-identical
//! numbers, which the rest of the toolkit relies on for reproducibility.

/// Additive logit for masked attention keys. Large enough that `exp`
/// underflows to exactly zero after max-subtraction, finite enough that
/// no NaN can appear from masked arithmetic.
pub const MASK_NEG: f64 = -1.0e30;

pub const LAYER_NORM_EPS: f64 = 1.0e-5;

/// c += a · b for row-major a[m×k], b[k×n].
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut c);
    c
}

/// da += g · bᵀ for g[m×n], b[k×n]; da is [m×k].
pub fn matmul_grad_lhs_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dv) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *dv += s;
        }
    }
}

/// db += aᵀ · g for a[m×k], g[m×n]; db is [k×n].
pub fn matmul_grad_rhs_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

/// y[i,j] = x[i,j] + bias[j] for x[m×n], bias[n].
pub fn add_row_bias(x: &[f64], bias: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            y.push(x[i * n + j] + bias[j]);
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Numerically stable softmax of one contiguous row, in place.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = x.to_vec();
    let mut lane = vec![0.0; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (a, lv) in lane.iter_mut().enumerate() {
                *lv = y[base + a * inner];
            }
            softmax_row_inplace(&mut lane);
            for (a, &lv) in lane.iter().enumerate() {
                y[base + a * inner] = lv;
            }
        }
    }
    y
}

/// Per-row layer norm over the last axis of x[m×n] with learned gain/bias[n].
/// Returns (y, per-row (mean, rstd)) — the stats are needed for backward.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut y = vec![0.0; m * n];
    let mut stats = Vec::with_capacity(m);
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out = &mut y[i * n..(i + 1) * n];
        for j in 0..n {
            out[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    (y, stats)
}

/// Key-validity mask for scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    /// Every key visible to every query.
    None,
    /// Query i may attend to keys j <= i.
    Causal,
    /// Per batch element, only the first `valid[b]` keys are visible
    /// (padding always sits at the tail).
    KeyPadding(Vec<usize>),
}

impl AttnMask {
    #[inline]
    fn allows(&self, b: usize, qi: usize, kj: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => kj <= qi,
            AttnMask::KeyPadding(valid) => kj < valid[b],
        }
    }
}

/// Multi-head scaled dot-product attention forward.
///
/// q is [batch*q_len × d], k and v are [batch*k_len × d], d = heads · head_dim.
/// Returns the attended output [batch*q_len × d] and the cached attention
/// weights laid out as [batch][head][q_len × k_len] for backward.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    q_len: usize,
    k_len: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; batch * q_len * d];
    let mut attn = vec![0.0; batch * heads * q_len * k_len];
    let mut scores = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let hs = h * hd;
            let abase = (b * heads + h) * q_len * k_len;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * d + hs..(b * q_len + i) * d + hs + hd];
                for (j, sc) in scores.iter_mut().enumerate() {
                    if mask.allows(b, i, j) {
                        let krow = &k[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        let mut s = 0.0;
                        for (&qv, &kv) in qrow.iter().zip(krow) {
                            s += qv * kv;
                        }
                        *sc = s * scale;
                    } else {
                        *sc = MASK_NEG;
                    }
                }
                softmax_row_inplace(&mut scores);
                attn[abase + i * k_len..abase + (i + 1) * k_len].copy_from_slice(&scores);
                let orow = &mut out[(b * q_len + i) * d + hs..(b * q_len + i) * d + hs + hd];
                for (j, &w) in scores.iter().enumerate() {
                    if w != 0.0 {
                        let vrow = &v[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        for (ov, &vv) in orow.iter_mut().zip(vrow) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
    }
    (out, attn)
}

/// Backward pass matching [`attention_forward`]. Accumulates into dq/dk/dv.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    attn: &[f64],
    g_out: &[f64],
    batch: usize,
    q_len: usize,
    k_len: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dattn = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let hs = h * hd;
            let abase = (b * heads + h) * q_len * k_len;
            for i in 0..q_len {
                let grow = &g_out[(b * q_len + i) * d + hs..(b * q_len + i) * d + hs + hd];
                let arow = &attn[abase + i * k_len..abase + (i + 1) * k_len];
                // dv[j] += attn[i,j] * g_out[i];  dattn[i,j] = <g_out[i], v[j]>
                let mut dot_sum = 0.0;
                for j in 0..k_len {
                    let w = arow[j];
                    if w != 0.0 {
                        let vrow = &v[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        let dvrow =
                            &mut dv[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        let mut da = 0.0;
                        for ((&gv, &vv), dvv) in grow.iter().zip(vrow).zip(dvrow.iter_mut()) {
                            da += gv * vv;
                            *dvv += w * gv;
                        }
                        dattn[j] = da;
                        dot_sum += da * w;
                    } else {
                        dattn[j] = 0.0;
                    }
                }
                // softmax backward, then through the scaled dot products.
                let qrow_base = (b * q_len + i) * d + hs;
                for j in 0..k_len {
                    let w = arow[j];
                    if w != 0.0 {
                        let ds = w * (dattn[j] - dot_sum) * scale;
                        let krow = &k[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        let dkrow =
                            &mut dk[(b * k_len + j) * d + hs..(b * k_len + j) * d + hs + hd];
                        let qrow = &q[qrow_base..qrow_base + hd];
                        let dqrow = &mut dq[qrow_base..qrow_base + hd];
                        for x in 0..hd {
                            dqrow[x] += ds * krow[x];
                            dkrow[x] += ds * qrow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Mean per-token cross-entropy of logits[rows×vocab] against targets,
/// skipping `pad_id` positions. Returns (loss, softmax probs, non-pad count).
pub fn cross_entropy(
    logits: &[f64],
    targets: &[u32],
    vocab: usize,
    pad_id: u32,
) -> (f64, Vec<f64>, usize) {
    let rows = targets.len();
    let mut probs = vec![0.0; rows * vocab];
    let mut loss = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let prow = &mut probs[i * vocab..(i + 1) * vocab];
        prow.copy_from_slice(row);
        softmax_row_inplace(prow);
        if t != pad_id {
            loss -= prow[t as usize].ln();
            count += 1;
        }
    }
    if count > 0 {
        loss /= count as f64;
    }
    (loss, probs, count)
}
