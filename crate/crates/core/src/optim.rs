//! Parameters and the Adam optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            value,
            grad: None,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(Tensor::zeros(self.value.shape().to_vec()));
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds the gradients of every parameter leaf on `tape` into this store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            let shape = p.value.shape().to_vec();
            let dst = p.grad.get_or_insert_with(|| Tensor::zeros(shape));
            for (a, &b) in dst.data_mut().iter_mut().zip(g) {
                *a = T::from_f64(a.to_f64() + b.to_f64());
            }
        }
    }

    /// Copy with values converted to another scalar type. Optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update over every parameter.
    ///
    /// Fails without touching anything when a parameter has no gradient.
    pub fn step<T: Real>(&self, params: &mut [Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient { name: p.name.clone() });
        }
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
            let grad = p.grad.as_ref().expect("checked above").data();
            let (m, v, x) = (p.adam_m.data_mut(), p.adam_v.data_mut(), p.value.data_mut());
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                let mi = self.beta1 * m[i].to_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].to_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.lr * (mi / bc1) / (libm::sqrt(vi / bc2) + self.eps);
                x[i] = T::from_f64(x[i].to_f64() - update);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step<T: Real>(params: &mut [Parameter<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    Adam { lr, beta1, beta2, eps }.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_param(name: &str, x: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(name, Tensor::from_f64([1], &[x]).unwrap());
        p.grad = Some(Tensor::from_f64([1], &[g]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
        let mut ps = vec![scalar_param("x", 1.0, 1.0)];
        adam_step(&mut ps, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        let expected = 1.0 - 1e-2 * 1.0 / (1.0 + 1e-8);
        assert!((ps[0].value.item() - expected).abs() < 1e-15);
        assert!((1.0 - ps[0].value.item() - 1e-2).abs() < 1e-9);
        assert_eq!(ps[0].step_count, 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = vec![scalar_param("x", 0.75, 0.0)];
        Adam::default().step(&mut ps).unwrap();
        assert_eq!(ps[0].value.item(), 0.75);
        assert_eq!(ps[0].step_count, 1);
    }

    #[test]
    fn symmetric_params_get_identical_updates() {
        let mut ps = vec![scalar_param("a", 0.3, -0.2), scalar_param("b", 0.3, -0.2)];
        let adam = Adam::with_lr(1e-3);
        for _ in 0..3 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps[0].value, ps[1].value);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = vec![
            scalar_param("ok", 0.0, 1.0),
            Parameter::new("W_b", Tensor::<f64>::zeros([2])),
        ];
        let err = Adam::default().step(&mut ps).unwrap_err();
        assert_eq!(err, Error::MissingGradient { name: "W_b".into() });
        assert_eq!(ps[0].step_count, 0);
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut ps = vec![scalar_param("x", 0.123456789, 0.5)];
        Adam::with_lr(0.0).step(&mut ps).unwrap();
        assert_eq!(ps[0].value.item().to_bits(), 0.123456789f64.to_bits());
    }
}
