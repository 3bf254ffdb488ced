//! Central finite-difference checks against tape gradients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::optim::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this compare absolutely: below it, central
/// differences are dominated by round-off in the loss.
pub const RELATIVE_FLOOR: f64 = 1e-7;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(RELATIVE_FLOOR);
    (a - b).abs() / denom
}

/// Largest relative error between the tape gradient of `f` at `x` and its
/// central-difference estimate with the given step.
///
/// `f` receives a fresh tape and the input var and must return a scalar.
pub fn finite_diff_check<T: Real>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item().to_f64())
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let base = x.data()[i].to_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64(base + step);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64(base - step);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Worst coordinate of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Hook applied to each block's tape gradient before comparison.
pub type GradHook<'a> = &'a dyn Fn(&str, &mut [f64]);

/// Checks every parameter block of `store` against central differences.
///
/// `loss` builds a scalar on a fresh tape from the given store. `hook`, when
/// given, may alter the analytic gradients (negative controls).
pub fn check_params<T: Real>(
    store: &ParamStore<T>,
    step: f64,
    loss: impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    hook: Option<GradHook<'_>>,
) -> Result<Vec<BlockCheck>> {
    check_params_except(store, step, loss, hook, &|_, _| false)
}

/// Like [`check_params`], skipping coordinates for which `frozen(block, index)`
/// holds: values the model reads but deliberately never trains.
pub fn check_params_except<T: Real>(
    store: &ParamStore<T>,
    step: f64,
    mut loss: impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    hook: Option<GradHook<'_>>,
    frozen: &dyn Fn(&str, usize) -> bool,
) -> Result<Vec<BlockCheck>> {
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.numel()]).collect();
    for (id, g) in tape.param_grads() {
        for (a, v) in analytic[id.index()].iter_mut().zip(g) {
            *a += v.to_f64();
        }
    }
    drop(tape);

    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.get(id).name.clone();
        if let Some(h) = hook {
            h(&name, &mut analytic[id.index()]);
        }
        let mut report = BlockCheck {
            numel: store.get(id).numel(),
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut first = true;
        for (i, &a) in analytic[id.index()].iter().enumerate() {
            if frozen(&report.name, i) {
                continue;
            }
            let numeric = central_difference(&mut probe, id, i, step, &mut loss)?;
            let err = relative_error(a, numeric);
            if first || err > report.max_rel_error {
                first = false;
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn central_difference<T: Real>(
    probe: &mut ParamStore<T>,
    id: ParamId,
    i: usize,
    step: f64,
    loss: &mut impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
) -> Result<f64> {
    let original = probe.get(id).value.data()[i];
    let base = original.to_f64();
    let mut eval = |probe: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, probe)?;
        Ok(tape.value(out).item().to_f64())
    };
    probe.get_mut(id).value.data_mut()[i] = T::from_f64(base + step);
    let plus = eval(probe)?;
    probe.get_mut(id).value.data_mut()[i] = T::from_f64(base - step);
    let minus = eval(probe)?;
    probe.get_mut(id).value.data_mut()[i] = original;
    Ok((plus - minus) / (2.0 * step))
}
