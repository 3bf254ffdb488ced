//! Forward kernels over flat row-major slices.
//!
//! Every kernel accumulates in `f64` and rounds once on store. The tape and
//! the plain-function API both call into this module so the two paths are
//! numerically identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Norm guard for divisions by a vector length.
pub const NORM_EPS: f64 = 1e-9;

#[inline]
pub(crate) fn round<T: Real>(acc: &[f64]) -> Vec<T> {
    acc.iter().map(|&x| T::from_f64(x)).collect()
}

/// Dot product with four independent accumulators (fixed order, so
/// deterministic, but friendlier to the vectorizer than one chain).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i].to_f64() * b[i].to_f64();
        acc[1] += a[i + 1].to_f64() * b[i + 1].to_f64();
        acc[2] += a[i + 2].to_f64() * b[i + 2].to_f64();
        acc[3] += a[i + 3].to_f64() * b[i + 3].to_f64();
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].to_f64() * b[i].to_f64();
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn sum_sq<T: Real>(a: &[T]) -> f64 {
    a.iter().map(|x| x.to_f64() * x.to_f64()).sum()
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            let aik = a[i * k + kk].to_f64();
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aik * bv.to_f64();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64(x)));
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub(crate) fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| x[at(k)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = libm::exp(x[at(k)].to_f64() - m);
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[at(k)] = T::from_f64(b / total);
            }
        }
    }
    out
}

/// Row softmax with one extra logit pinned at zero. The extra slot's
/// probability is dropped, so each output row sums to `1 - leak`.
pub(crate) fn leaky_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().map(|v| v.to_f64()).fold(0.0, f64::max);
        let leak = libm::exp(-m);
        let exps: Vec<f64> = row.iter().map(|v| libm::exp(v.to_f64() - m)).collect();
        let total = leak + exps.iter().sum::<f64>();
        out.extend(exps.iter().map(|e| T::from_f64(e / total)));
    }
    out
}

/// Leak probability per row for [`leaky_softmax_rows`].
pub(crate) fn leak_mass<T: Real>(x: &[T], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .map(|row| {
            let m = row.iter().map(|v| v.to_f64()).fold(0.0, f64::max);
            let leak = libm::exp(-m);
            let total = leak + row.iter().map(|v| libm::exp(v.to_f64() - m)).sum::<f64>();
            leak / total
        })
        .collect()
}

/// Squash scale `‖s‖/(1+‖s‖²)`, so that `squash(s) = scale·s`. Zero at the origin.
#[inline]
pub(crate) fn squash_scale(norm_sq: f64) -> f64 {
    libm::sqrt(norm_sq) / (1.0 + norm_sq)
}

/// Squash over the last axis of width `d`.
pub(crate) fn squash_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let k = squash_scale(sum_sq(row));
        out.extend(row.iter().map(|&v| T::from_f64(k * v.to_f64())));
    }
    out
}

pub(crate) fn row_norms<T: Real>(x: &[T], d: usize) -> Vec<T> {
    x.chunks(d).map(|r| T::from_f64(libm::sqrt(sum_sq(r)))).collect()
}

pub(crate) fn gather_rows<T: Real>(table: &[T], width: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        out.extend_from_slice(&table[id * width..(id + 1) * width]);
    }
    out
}

/// Number of window positions for a strided 1-D convolution.
pub fn conv_output_len(len: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || len < window {
        None
    } else {
        Some((len - window) / stride + 1)
    }
}

/// N-gram convolution pre-activation.
///
/// `x` is `[len, dim]`, `w` is `[filters, window·dim]`, `b` is `[filters]`.
/// Returns `[positions, filters]`.
pub(crate) fn ngram_conv<T: Real>(
    x: &[T],
    dim: usize,
    w: &[T],
    b: &[T],
    window: usize,
    stride: usize,
    positions: usize,
) -> Vec<T> {
    let filters = b.len();
    let span = window * dim;
    let mut out = Vec::with_capacity(positions * filters);
    for t in 0..positions {
        let start = t * stride * dim;
        let win = &x[start..start + span];
        for f in 0..filters {
            let acc = b[f].to_f64() + dot(&w[f * span..(f + 1) * span], win);
            out.push(T::from_f64(acc));
        }
    }
    out
}

/// Primary capsule pre-activation.
///
/// `g` is `[positions, in_ch]`, `w` is `[caps_filters, in_ch, d]`, `b` is
/// `[caps_filters, d]`. Output row `t·caps_filters + f` holds filter `f`
/// at position `t`.
pub(crate) fn primary_caps<T: Real>(
    g: &[T],
    in_ch: usize,
    w: &[T],
    b: &[T],
    caps_filters: usize,
    d: usize,
) -> Vec<T> {
    let positions = g.len() / in_ch;
    let mut out = Vec::with_capacity(positions * caps_filters * d);
    let mut acc = vec![0.0f64; d];
    for t in 0..positions {
        let grow = &g[t * in_ch..(t + 1) * in_ch];
        for f in 0..caps_filters {
            for (a, bv) in acc.iter_mut().zip(&b[f * d..(f + 1) * d]) {
                *a = bv.to_f64();
            }
            for (c, gv) in grow.iter().enumerate() {
                let gv = gv.to_f64();
                if gv == 0.0 {
                    continue;
                }
                let wrow = &w[(f * in_ch + c) * d..(f * in_ch + c + 1) * d];
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += gv * wv.to_f64();
                }
            }
            out.extend(acc.iter().map(|&x| T::from_f64(x)));
        }
    }
    out
}

/// Per-class affine transform: `out[j,i,:] = w[j]·u[i] + b[j]`.
pub(crate) fn transform<T: Real>(u: &[T], w: &[T], b: &[T], classes: usize, d: usize) -> Vec<T> {
    let n = u.len() / d;
    let mut out = Vec::with_capacity(classes * n * d);
    for j in 0..classes {
        for i in 0..n {
            let ui = &u[i * d..(i + 1) * d];
            for a in 0..d {
                let row = &w[(j * d + a) * d..(j * d + a + 1) * d];
                out.push(T::from_f64(b[j * d + a].to_f64() + dot(row, ui)));
            }
        }
    }
    out
}

/// `y[c] = a · x[c]` for every slab `x[c]` of shape `[n, d]`.
pub(crate) fn left_matmul_batched<T: Real>(a: &[T], x: &[T], n: usize, d: usize) -> Vec<T> {
    let slabs = x.len() / (n * d);
    let mut out = Vec::with_capacity(x.len());
    for c in 0..slabs {
        out.extend(matmul(a, &x[c * n * d..(c + 1) * n * d], n, n, d));
    }
    out
}

/// `s[j,:] = Σ_i c[i,j]·o[j,i,:]` with `c: [n, classes]`, `o: [classes, n, d]`.
pub(crate) fn weighted_vote_sum<T: Real>(c: &[T], o: &[T], classes: usize, d: usize) -> Vec<T> {
    let n = c.len() / classes;
    let mut out = Vec::with_capacity(classes * d);
    let mut acc = vec![0.0f64; d];
    for j in 0..classes {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let cij = c[i * classes + j].to_f64();
            let oji = &o[(j * n + i) * d..(j * n + i + 1) * d];
            for (s, ov) in acc.iter_mut().zip(oji) {
                *s += cij * ov.to_f64();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64(x)));
    }
    out
}

/// `a[i,j] = û[j,i,:]·v[j,:]`, returned as `[n, classes]`.
pub(crate) fn agreement<T: Real>(u_hat: &[T], v: &[T], classes: usize, d: usize) -> Vec<T> {
    let n = u_hat.len() / (classes * d);
    let mut out = vec![T::ZERO; n * classes];
    for j in 0..classes {
        let vj = &v[j * d..(j + 1) * d];
        for i in 0..n {
            out[i * classes + j] = T::from_f64(dot(&u_hat[(j * n + i) * d..(j * n + i + 1) * d], vj));
        }
    }
    out
}

/// Capsule margin loss over class lengths.
pub(crate) fn margin_loss<T: Real>(p: &[T], label: usize, m_pos: f64, m_neg: f64, lambda: f64) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            let pk = pk.to_f64();
            if k == label {
                let h = (m_pos - pk).max(0.0);
                h * h
            } else {
                let h = (pk - m_neg).max(0.0);
                lambda * h * h
            }
        })
        .sum()
}

pub(crate) fn cross_entropy<T: Real>(p: &[T], label: usize) -> f64 {
    let m = p.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(p.iter().map(|v| libm::exp(v.to_f64() - m)).sum::<f64>());
    lse - p[label].to_f64()
}
