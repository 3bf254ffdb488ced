//! Non-routing capsule layers: n-gram convolution, primary capsules,
//! compression, per-class transformation and the representation layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::tape::{MarginParams, Tape};
use crate::tensor::Tensor;

/// Which layer a set of capsule poses came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerTag {
    Ncl,
    Pcl,
    Rl,
}

/// `N×d` capsule poses for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet<T = f32> {
    poses: Tensor<T>,
    pub layer: LayerTag,
}

impl<T: Real> CapsuleSet<T> {
    pub fn new(poses: Tensor<T>, layer: LayerTag) -> Result<Self> {
        if poses.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "capsule_set",
                left: poses.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        Ok(Self { poses, layer })
    }

    pub fn poses(&self) -> &Tensor<T> {
        &self.poses
    }

    pub fn count(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.poses.shape()[1]
    }

    /// Row norms of every capsule.
    pub fn lengths(&self) -> Vec<f64> {
        (0..self.count())
            .map(|i| libm::sqrt(kernels::sum_sq(self.poses.row(i))))
            .collect()
    }
}

/// Prediction vectors `û_{j|i}` stored as `[C, N, d]` (parent, child, pose).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor<T = f32> {
    values: Tensor<T>,
}

impl<T: Real> PredictionTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "prediction_tensor",
                left: values.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        Ok(Self { values })
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn children(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    /// `û_{parent|child}`.
    pub fn vote(&self, parent: usize, child: usize) -> &[T] {
        let (n, d) = (self.children(), self.dim());
        let start = (parent * n + child) * d;
        &self.values.data()[start..start + d]
    }
}

/// `(‖s‖²/(1+‖s‖²))·s/‖s‖`, with `squash(0) = 0`.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    kernels::squash_rows(s, s.len().max(1))
}

/// N-gram convolution followed by ReLU.
///
/// `x: [L, D]`, `w: [B1, K·D]`, `b: [B1]`; returns `[L', B1]` with
/// `L' = ⌊(L−K)/s⌋ + 1`.
pub fn ngram_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let pre = tape.ngram_conv(x, w, b, window, stride)?;
    let g = tape.relu(pre);
    Ok(tape.value(g).clone())
}

/// Squashed primary capsules. `g: [L', B1]`, `w: [B2, B1, d]`, `b: [B2, d]`.
///
/// Returns `[L'·B2, d]`; row `t·B2 + f` is filter `f` at position `t`.
pub fn primary_capsules<T: Real>(g: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (g, w, b) = (tape.constant(g.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let pre = tape.primary_caps(g, w, b)?;
    let p = tape.squash(pre)?;
    Ok(tape.value(p).clone())
}

/// Learned weighted sums of capsules: `u = w·p` with `w: [N, M]`, `p: [M, d]`.
pub fn compress<T: Real>(p: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (p, w) = (tape.constant(p.clone()), tape.constant(w.clone()));
    let u = tape.matmul(w, p)?;
    Ok(tape.value(u).clone())
}

/// `û_{j|i} = W_j·u_i + b_j` with `w: [C, d, d]`, `b: [C, d]`.
pub fn transform<T: Real>(u: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<PredictionTensor<T>> {
    let mut tape = Tape::new();
    let (u, w, b) = (tape.constant(u.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = tape.transform(u, w, b)?;
    PredictionTensor::new(tape.value(out).clone())
}

/// Class lengths and the predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `p̂_k = ‖v_k‖` for `v: [C, d]`.
pub fn class_probs<T: Real>(v: &Tensor<T>) -> ClassProbs {
    let d = v.shape().last().copied().unwrap_or(1).max(1);
    let probs: Vec<f64> = kernels::row_norms(v.data(), d).iter().map(|x: &T| x.to_f64()).collect();
    let predicted = argmax(&probs);
    ClassProbs { probs, predicted }
}

/// Margin loss with `m⁺ = 0.9`, `m⁻ = 0.1`, `λ = 0.5`.
pub fn margin_loss<T: Real>(p: &[T], label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    let m = MarginParams::default();
    Ok(kernels::margin_loss(p, label, m.m_pos, m.m_neg, m.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_norm_examples() {
        assert!((norm(&squash(&[1.0f64, 0.0])) - 0.5).abs() < 1e-15);
        assert!((norm(&squash(&[0.0f64, 3.0])) - 0.9).abs() < 1e-15);
        assert_eq!(squash(&[0.0f64, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let x = Tensor::<f32>::zeros([7, 4]);
        let w = Tensor::from_fn([5, 12], |i| (i as f32 * 0.37).sin());
        let b = Tensor::zeros([5]);
        let g = ngram_conv(&x, &w, &b, 3, 2).unwrap();
        assert_eq!(g.shape(), &[3, 5]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_full_window_gives_one_position() {
        let x = Tensor::<f32>::full([4, 2], 1.0);
        let w = Tensor::full([3, 8], 0.5);
        let b = Tensor::zeros([3]);
        let g = ngram_conv(&x, &w, &b, 4, 1).unwrap();
        assert_eq!(g.shape(), &[1, 3]);
        assert_eq!(g.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_rejects_short_sequence() {
        let x = Tensor::<f32>::zeros([2, 3]);
        let w = Tensor::zeros([1, 9]);
        let b = Tensor::zeros([1]);
        assert_eq!(
            ngram_conv(&x, &w, &b, 3, 1),
            Err(Error::SequenceTooShort { len: 2, window: 3 })
        );
    }

    #[test]
    fn conv_matches_window_oracle() {
        let (len, dim, filters, window, stride) = (7, 3, 2, 3, 2);
        let x = Tensor::<f64>::from_fn([len, dim], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let w = Tensor::<f64>::from_fn([filters, window * dim], |i| ((i * 5 % 13) as f64 - 6.0) / 9.0);
        let b = Tensor::<f64>::from_f64([filters], &[0.1, -0.2]).unwrap();
        let g = ngram_conv(&x, &w, &b, window, stride).unwrap();
        let mut expected = Vec::new();
        let mut start = 0;
        while start + window <= len {
            for f in 0..filters {
                let mut s = b.data()[f];
                for k in 0..window {
                    for c in 0..dim {
                        s += w.at(&[f, k * dim + c]) * x.at(&[start + k, c]);
                    }
                }
                expected.push(s.max(0.0));
            }
            start += stride;
        }
        assert_eq!(g.shape(), &[3, filters]);
        for (a, e) in g.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn primary_zero_input_zero_caps() {
        let g = Tensor::<f32>::zeros([3, 4]);
        let w = Tensor::from_fn([2, 4, 5], |i| i as f32 * 0.01);
        let b = Tensor::zeros([2, 5]);
        let p = primary_capsules(&g, &w, &b).unwrap();
        assert_eq!(p.shape(), &[6, 5]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn primary_single_capsule_matches_hand_composition() {
        // One position, one input channel, one filter, d = 2.
        let g = Tensor::<f64>::from_f64([1, 1], &[2.0]).unwrap();
        let w = Tensor::<f64>::from_f64([1, 1, 2], &[0.5, -1.0]).unwrap();
        let b = Tensor::<f64>::from_f64([1, 2], &[0.25, 0.5]).unwrap();
        let p = primary_capsules(&g, &w, &b).unwrap();
        let s = [2.0 * 0.5 + 0.25, -2.0 + 0.5];
        let n2: f64 = s[0] * s[0] + s[1] * s[1];
        let k = n2 / (1.0 + n2) / n2.sqrt();
        assert!((p.data()[0] - k * s[0]).abs() < 1e-15);
        assert!((p.data()[1] - k * s[1]).abs() < 1e-15);
    }

    #[test]
    fn compress_examples() {
        let p = Tensor::<f64>::from_fn([4, 3], |i| i as f64 - 5.0);
        let onehot = Tensor::from_f64([2, 4], &[0., 0., 1., 0., 1., 0., 0., 0.]).unwrap();
        let u = compress(&p, &onehot).unwrap();
        assert_eq!(u.row(0), p.row(2));
        assert_eq!(u.row(1), p.row(0));

        let u = compress(&p, &Tensor::zeros([2, 4])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));

        let u = compress(&p, &Tensor::full([1, 4], 0.25)).unwrap();
        for a in 0..3 {
            let mean = (0..4).map(|r| p.at(&[r, a])).sum::<f64>() / 4.0;
            assert!((u.at(&[0, a]) - mean).abs() < 1e-12);
        }
        assert!(compress(&p, &Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn transform_identity_and_zero() {
        let d = 3;
        let u = Tensor::<f64>::from_fn([2, d], |i| i as f64 * 0.5 - 1.0);
        let mut w = Tensor::zeros([2, d, d]);
        for j in 0..2 {
            for a in 0..d {
                w.data_mut()[(j * d + a) * d + a] = 1.0;
            }
        }
        let pt = transform(&u, &w, &Tensor::zeros([2, d])).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(pt.vote(j, i), u.row(i));
            }
        }
        let b = Tensor::from_f64([2, d], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let pt = transform(&Tensor::zeros([2, d]), &w, &b).unwrap();
        assert_eq!(pt.vote(1, 0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn class_probs_examples() {
        let v = Tensor::<f64>::from_f64([2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap();
        let cp = class_probs(&v);
        assert_eq!(cp.probs, vec![5.0, 1.0]);
        assert_eq!(cp.predicted, 0);

        let cp = class_probs(&Tensor::<f32>::zeros([3, 4]));
        assert_eq!(cp.probs, vec![0.0; 3]);
        assert_eq!(cp.predicted, 0);
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(margin_loss(&[0.9f64, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!((margin_loss(&[0.0f64, 0.0], 1).unwrap() - 0.81).abs() < 1e-15);
        assert!((margin_loss(&[1.0f64, 1.0], 0).unwrap() - 0.405).abs() < 1e-15);
        assert!(margin_loss(&[0.0f64, 0.0], 2).is_err());
    }
}
