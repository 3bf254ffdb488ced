//! How well each layer's vectors agree with the final class capsules.
//!
//! Every row of a layer is labeled with the class whose output capsule is
//! nearest in Euclidean distance; the score is the share of rows that land on
//! the predicted class.

use alloc::vec::Vec;

use crate::capsule::{argmax, LayerTag};
use crate::error::{Error, Result};
use crate::kernels::squash_scale;
use crate::model::{DocForward, Model};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Index of the row of `v` (`rows×d`, row-major) closest to `x`. Ties go to
/// the lowest index.
pub fn nearest_row(v: &[f64], d: usize, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, row) in v.chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best.0
}

/// Fraction of `rows` whose nearest row of `v` is `target`.
pub fn consistency_fraction<T: Real>(rows: &Tensor<T>, v: &Tensor<T>, target: usize) -> Result<f64> {
    if rows.rank() != 2 || v.rank() != 2 || rows.shape()[1] != v.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "consistency",
            left: rows.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let d = v.shape()[1];
    let v = v.to_f64_vec();
    let n = rows.shape()[0];
    if n == 0 {
        return Ok(0.0);
    }
    let hits = rows
        .data()
        .chunks(d)
        .filter(|row| {
            let x: Vec<f64> = row.iter().map(|a| a.to_f64()).collect();
            nearest_row(&v, d, &x) == target
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// The `m×d` rows of `layer` for one forward pass.
///
/// * NCL: the n-gram features projected by the primary-capsule weights,
///   before the squash.
/// * PCL: the primary capsules.
/// * RL: per child capsule, the squashed coupling-weighted sum of its votes
///   under the final couplings, scaled by the child count.
pub fn layer_rows<T: Real>(tape: &Tape<T>, fwd: &DocForward, layer: LayerTag) -> Tensor<T> {
    match layer {
        LayerTag::Ncl => tape.value(fwd.pcl_pre).clone(),
        LayerTag::Pcl => tape.value(fwd.pcl).clone(),
        LayerTag::Rl => routed_rows(tape, fwd),
    }
}

fn routed_rows<T: Real>(tape: &Tape<T>, fwd: &DocForward) -> Tensor<T> {
    let votes = tape.value(fwd.routing.votes);
    let (c, n, d) = (votes.shape()[0], votes.shape()[1], votes.shape()[2]);
    let couplings = tape.value(*fwd.routing.couplings.last().expect("at least one iteration"));
    // leaky couplings carry an extra orphan column
    let stride = couplings.shape()[1];
    let (votes, couplings) = (votes.to_f64_vec(), couplings.to_f64_vec());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut s = alloc::vec![0.0; d];
        for j in 0..c {
            let cij = couplings[i * stride + j] * n as f64;
            let o = &votes[(j * n + i) * d..(j * n + i + 1) * d];
            s.iter_mut().zip(o).for_each(|(a, b)| *a += cij * b);
        }
        let norm_sq: f64 = s.iter().map(|x| x * x).sum();
        let k = squash_scale(norm_sq);
        out.extend(s.iter().map(|x| T::from_f64(x * k)));
    }
    Tensor::from_parts(alloc::vec![n, d], out)
}

/// Consistency percentages per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsistencyReport {
    pub ncl: f64,
    pub pcl: f64,
    pub rl: f64,
    pub documents: usize,
}

impl ConsistencyReport {
    pub fn get(&self, layer: LayerTag) -> f64 {
        match layer {
            LayerTag::Ncl => self.ncl,
            LayerTag::Pcl => self.pcl,
            LayerTag::Rl => self.rl,
        }
    }
}

/// Mean per-document consistency, as percentages, over padded documents.
pub fn semantic_consistency<'a, T: Real>(
    model: &Model<T>,
    docs: impl IntoIterator<Item = &'a [usize]>,
) -> Result<ConsistencyReport> {
    let mut sums = [0.0; 3];
    let mut count = 0;
    for tokens in docs {
        let mut tape = Tape::new();
        let fwd = model.forward_doc(&mut tape, tokens)?;
        let v = tape.value(fwd.v);
        let predicted = argmax(&tape.value(fwd.probs).to_f64_vec());
        for (k, layer) in [LayerTag::Ncl, LayerTag::Pcl, LayerTag::Rl].into_iter().enumerate() {
            sums[k] += consistency_fraction(&layer_rows(&tape, &fwd, layer), v, predicted)?;
        }
        count += 1;
    }
    let pct = |s: f64| if count == 0 { 0.0 } else { 100.0 * s / count as f64 };
    Ok(ConsistencyReport {
        ncl: pct(sums[0]),
        pcl: pct(sums[1]),
        rl: pct(sums[2]),
        documents: count,
    })
}
