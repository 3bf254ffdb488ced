//! Intra-layer relationship matrices between capsules and their normalizations.
//!
//! A relation value `a_ij` is the negated distance between capsules `i` and
//! `j` (cosine similarity shifted by one for `CS`), so it is nonpositive,
//! zero on the diagonal, and larger for closer capsules.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, NORM_EPS};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Distance used to relate two capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// 1-Wasserstein distance.
    #[serde(rename = "WD")]
    Wd,
    /// Euclidean distance.
    #[serde(rename = "ED")]
    Ed,
    /// Cosine similarity.
    #[serde(rename = "CS")]
    Cs,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Wd, Metric::Ed, Metric::Cs];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Wd => "WD",
            Metric::Ed => "ED",
            Metric::Cs => "CS",
        }
    }
}

/// How a capsule vector is read as a measure for the Wasserstein distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WdMode {
    /// Each capsule is a point mass at its pose vector: `W₁ = ‖y_i − y_j‖₁`.
    #[default]
    Dirac,
    /// Each capsule's coordinates are an empirical 1-D sample:
    /// `W₁ ∝ ‖sort(y_i) − sort(y_j)‖₁`.
    Sorted,
}

/// Normalization applied to a relation matrix before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Row softmax plus identity.
    General,
    /// Symmetric degree renormalization of `A + I` on exponentiated distances.
    Classic,
    /// The identity matrix, ignoring the relation.
    Identity,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::General => "general",
            NormMode::Classic => "classic",
            NormMode::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix<T = f32> {
    pub values: Tensor<T>,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T = f32> {
    pub values: Tensor<T>,
    pub mode: NormMode,
}

fn sorted_with_perm<T: Real>(row: &[T]) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..row.len()).collect();
    perm.sort_by(|&a, &b| row[a].to_f64().total_cmp(&row[b].to_f64()));
    (perm.iter().map(|&k| row[k].to_f64()).collect(), perm)
}

/// `[n×n]` relation matrix over the rows of `x: [n, d]`.
pub(crate) fn relation_matrix<T: Real>(x: &[T], n: usize, d: usize, metric: Metric, wd: WdMode) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let sorted: Vec<Vec<f64>> = if metric == Metric::Wd && wd == WdMode::Sorted {
        (0..n).map(|i| sorted_with_perm(row(i)).0).collect()
    } else {
        Vec::new()
    };
    let norms: Vec<f64> = if metric == Metric::Cs {
        (0..n).map(|i| libm::sqrt(kernels::sum_sq(row(i))).max(NORM_EPS)).collect()
    } else {
        Vec::new()
    };
    for i in 0..n {
        for j in i + 1..n {
            let v = match (metric, wd) {
                (Metric::Wd, WdMode::Dirac) => {
                    -row(i).iter().zip(row(j)).map(|(p, q)| libm::fabs(p.to_f64() - q.to_f64())).sum::<f64>()
                }
                (Metric::Wd, WdMode::Sorted) => {
                    -sorted[i].iter().zip(&sorted[j]).map(|(p, q)| libm::fabs(p - q)).sum::<f64>()
                }
                (Metric::Ed, _) => {
                    let s: f64 = row(i)
                        .iter()
                        .zip(row(j))
                        .map(|(p, q)| {
                            let t = p.to_f64() - q.to_f64();
                            t * t
                        })
                        .sum();
                    -libm::sqrt(s)
                }
                (Metric::Cs, _) => kernels::dot(row(i), row(j)) / (norms[i] * norms[j]) - 1.0,
            };
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds `Σ_ij g_ij ∂a_ij/∂x` into `gx`. The diagonal is constant.
pub(crate) fn relation_backward<T: Real>(
    x: &[T],
    n: usize,
    d: usize,
    metric: Metric,
    wd: WdMode,
    g: &[f64],
    gx: &mut [f64],
) {
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let sorted: Vec<(Vec<f64>, Vec<usize>)> = if metric == Metric::Wd && wd == WdMode::Sorted {
        (0..n).map(|i| sorted_with_perm(row(i))).collect()
    } else {
        Vec::new()
    };
    let norms: Vec<f64> = if metric == Metric::Cs {
        (0..n).map(|i| libm::sqrt(kernels::sum_sq(row(i)))).collect()
    } else {
        Vec::new()
    };
    for i in 0..n {
        for j in i + 1..n {
            let w = g[i * n + j] + g[j * n + i];
            if w == 0.0 {
                continue;
            }
            match (metric, wd) {
                (Metric::Wd, WdMode::Dirac) => {
                    for k in 0..d {
                        let s = sign(row(i)[k].to_f64() - row(j)[k].to_f64());
                        gx[i * d + k] -= w * s;
                        gx[j * d + k] += w * s;
                    }
                }
                (Metric::Wd, WdMode::Sorted) => {
                    let (si, pi) = &sorted[i];
                    let (sj, pj) = &sorted[j];
                    for k in 0..d {
                        let s = sign(si[k] - sj[k]);
                        gx[i * d + pi[k]] -= w * s;
                        gx[j * d + pj[k]] += w * s;
                    }
                }
                (Metric::Ed, _) => {
                    let diff: Vec<f64> = row(i).iter().zip(row(j)).map(|(p, q)| p.to_f64() - q.to_f64()).collect();
                    let dist = libm::sqrt(diff.iter().map(|t| t * t).sum::<f64>());
                    if dist <= NORM_EPS {
                        continue;
                    }
                    for k in 0..d {
                        gx[i * d + k] -= w * diff[k] / dist;
                        gx[j * d + k] += w * diff[k] / dist;
                    }
                }
                (Metric::Cs, _) => {
                    let (ni, nj) = (norms[i], norms[j]);
                    let (ti, tj) = (ni.max(NORM_EPS), nj.max(NORM_EPS));
                    let cos = kernels::dot(row(i), row(j)) / (ti * tj);
                    for k in 0..d {
                        let (xi, xj) = (row(i)[k].to_f64(), row(j)[k].to_f64());
                        let mut di = xj / (ti * tj);
                        let mut dj = xi / (ti * tj);
                        if ni > NORM_EPS {
                            di -= cos * xi / (ni * ni);
                        }
                        if nj > NORM_EPS {
                            dj -= cos * xj / (nj * nj);
                        }
                        gx[i * d + k] += w * di;
                        gx[j * d + k] += w * dj;
                    }
                }
            }
        }
    }
}

/// Nonnegative affinities for the classic renormalization: `exp(−distance)`
/// for WD/ED and cosine similarity clamped to `[0, 1]` for CS. Zero diagonal.
pub(crate) fn classic_from_relation(a: &[f64], n: usize, metric: Metric) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let r = a[i * n + j];
                m[i * n + j] = match metric {
                    Metric::Wd | Metric::Ed => libm::exp(r),
                    Metric::Cs => (r + 1.0).clamp(0.0, 1.0),
                };
            }
        }
    }
    m
}

/// Upstream weights on the relation matrix given upstream `g` on the affinities.
pub(crate) fn classic_chain(a: &[f64], g: &[f64], n: usize, metric: Metric) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let r = a[i * n + j];
                w[i * n + j] = match metric {
                    Metric::Wd | Metric::Ed => g[i * n + j] * libm::exp(r),
                    Metric::Cs => {
                        let c = r + 1.0;
                        if c > 0.0 && c < 1.0 {
                            g[i * n + j]
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
    }
    w
}

pub(crate) fn sym_normalize<T: Real>(m: &[T], n: usize) -> Result<Vec<f64>> {
    let mut r = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = m[i * n..(i + 1) * n].iter().map(|v| v.to_f64()).sum();
        if deg <= 0.0 {
            return Err(Error::ZeroRowSum { row: i });
        }
        r[i] = 1.0 / libm::sqrt(deg);
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * n + j].to_f64() * r[i] * r[j];
        }
    }
    Ok(out)
}

pub(crate) fn sym_normalize_backward<T: Real>(m: &[T], n: usize, g: &[f64], gm: &mut [f64]) {
    let r: Vec<f64> = (0..n)
        .map(|i| 1.0 / libm::sqrt(m[i * n..(i + 1) * n].iter().map(|v| v.to_f64()).sum::<f64>()))
        .collect();
    let mv = |i: usize, j: usize| m[i * n + j].to_f64();
    let mut q = vec![0.0; n];
    for k in 0..n {
        for j in 0..n {
            q[k] += g[k * n + j] * mv(k, j) * r[j] + g[j * n + k] * mv(j, k) * r[j];
        }
    }
    for k in 0..n {
        let dr = -0.5 * r[k] * r[k] * r[k] * q[k];
        for l in 0..n {
            gm[k * n + l] += g[k * n + l] * r[k] * r[l] + dr;
        }
    }
}

/// Vars produced while building a normalized adjacency on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdjacencyVars {
    /// Relation matrix (general mode) or nonnegative affinities (classic mode).
    pub relation: Option<Var>,
    pub normalized: Var,
}

/// Builds the normalized adjacency for the capsule rows `caps: [N, d]`.
pub fn build_normalized<T: Real>(
    tape: &mut Tape<T>,
    caps: Var,
    metric: Metric,
    wd: WdMode,
    mode: NormMode,
) -> Result<AdjacencyVars> {
    match mode {
        NormMode::General => {
            let a = tape.adjacency(caps, metric, wd)?;
            let s = tape.softmax(a, 1)?;
            let normalized = tape.add_identity(s)?;
            Ok(AdjacencyVars {
                relation: Some(a),
                normalized,
            })
        }
        NormMode::Classic => {
            let m = tape.classic_affinity(caps, metric, wd)?;
            let with_self = tape.add_identity(m)?;
            let normalized = tape.sym_normalize(with_self)?;
            Ok(AdjacencyVars {
                relation: Some(m),
                normalized,
            })
        }
        NormMode::Identity => {
            let n = tape.shape(caps)[0];
            let normalized = tape.constant(Tensor::identity(n));
            Ok(AdjacencyVars {
                relation: None,
                normalized,
            })
        }
    }
}

fn check_caps<T: Real>(caps: &Tensor<T>) -> Result<()> {
    if caps.rank() != 2 || caps.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "pairwise_adjacency",
            left: caps.shape().to_vec(),
            right: vec![1, 1],
        });
    }
    Ok(())
}

/// Relation matrix for `caps: [N, d]`, with the Dirac reading of WD.
pub fn pairwise_adjacency<T: Real>(caps: &Tensor<T>, metric: Metric) -> Result<AdjacencyMatrix<T>> {
    pairwise_adjacency_with(caps, metric, WdMode::Dirac)
}

pub fn pairwise_adjacency_with<T: Real>(caps: &Tensor<T>, metric: Metric, wd: WdMode) -> Result<AdjacencyMatrix<T>> {
    check_caps(caps)?;
    let mut tape = Tape::new();
    let x = tape.constant(caps.clone());
    let a = tape.adjacency(x, metric, wd)?;
    Ok(AdjacencyMatrix {
        values: tape.value(a).clone(),
        metric,
    })
}

/// Row softmax of `A` plus the identity.
pub fn normalize_general<T: Real>(a: &AdjacencyMatrix<T>) -> Result<NormalizedAdjacency<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(a.values.clone());
    let s = tape.softmax(x, 1)?;
    let out = tape.add_identity(s)?;
    Ok(NormalizedAdjacency {
        values: tape.value(out).clone(),
        mode: NormMode::General,
    })
}

/// Classic renormalization `D̂^{-1/2}(A + I)D̂^{-1/2}` over exponentiated distances.
pub fn normalize_classic<T: Real>(caps: &Tensor<T>, metric: Metric) -> Result<NormalizedAdjacency<T>> {
    normalize_classic_with(caps, metric, WdMode::Dirac)
}

pub fn normalize_classic_with<T: Real>(caps: &Tensor<T>, metric: Metric, wd: WdMode) -> Result<NormalizedAdjacency<T>> {
    check_caps(caps)?;
    let mut tape = Tape::new();
    let x = tape.constant(caps.clone());
    let vars = build_normalized(&mut tape, x, metric, wd, NormMode::Classic)?;
    Ok(NormalizedAdjacency {
        values: tape.value(vars.normalized).clone(),
        mode: NormMode::Classic,
    })
}

pub fn identity_adjacency<T: Real>(n: usize) -> NormalizedAdjacency<T> {
    NormalizedAdjacency {
        values: Tensor::identity(n),
        mode: NormMode::Identity,
    }
}
