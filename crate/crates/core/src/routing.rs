//! Routing between child capsules and class capsules.
//!
//! All variants share one agreement loop: couplings come from a softmax of
//! the logits over parents, parents are the squashed coupling-weighted sums of
//! the votes, and logits grow by the dot product of each prediction with its
//! parent. Graph routing only changes the votes that are summed: predictions
//! are first mixed across children by a normalized adjacency and a GCN weight,
//! then optionally gated by attention over parents.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adjacency::{self, AdjacencyVars, Metric, NormMode, WdMode};
use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingVariant {
    Dynamic,
    Leaky,
    GcnOnly,
    Graph,
}

impl RoutingVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingVariant::Dynamic => "dynamic",
            RoutingVariant::Leaky => "leaky",
            RoutingVariant::GcnOnly => "gcn_only",
            RoutingVariant::Graph => "graph",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub variant: RoutingVariant,
    pub metric: Metric,
    pub wd_mode: WdMode,
    pub norm_mode: NormMode,
    pub attention: bool,
    pub iterations: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            variant: RoutingVariant::Graph,
            metric: Metric::Wd,
            wd_mode: WdMode::Dirac,
            norm_mode: NormMode::General,
            attention: true,
            iterations: 3,
        }
    }
}

impl RoutingConfig {
    pub fn dynamic(iterations: usize) -> Self {
        Self {
            variant: RoutingVariant::Dynamic,
            attention: false,
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("routing iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether a `d×d` GCN weight participates.
    pub fn uses_gcn_weight(&self) -> bool {
        matches!(self.variant, RoutingVariant::Graph | RoutingVariant::GcnOnly)
    }

    /// Whether the attention scorer participates.
    pub fn uses_attention(&self) -> bool {
        self.variant == RoutingVariant::Graph && self.attention
    }
}

/// Trainable routing weights as tape vars.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoutingParams {
    pub gcn_weight: Option<Var>,
    /// Attention scorer `(w: [d], b: scalar)`.
    pub attention: Option<(Var, Var)>,
}

/// Everything a routing pass records on the tape.
#[derive(Debug, Clone)]
pub struct RoutingOutput {
    /// Parent capsules `[C, d]`.
    pub v: Var,
    /// Logits `[N, C]` fed to the softmax at each iteration.
    pub logits: Vec<Var>,
    /// Couplings `[N, C]` at each iteration.
    pub couplings: Vec<Var>,
    /// Parent capsules after each iteration.
    pub parents: Vec<Var>,
    /// Votes `[C, N, d]` summed into the parents (`o`, or `û` for dynamic routing).
    pub votes: Var,
    /// GCN output `h` `[C, N, d]`.
    pub aggregated: Option<Var>,
    /// Attention weights `[C, N]`.
    pub attention: Option<Var>,
    pub adjacency: Option<AdjacencyVars>,
    pub leaky: bool,
}

fn check_predictions(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "routing",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

struct Agreement {
    v: Var,
    logits: Vec<Var>,
    couplings: Vec<Var>,
    parents: Vec<Var>,
}

/// Shared agreement loop: sums `votes`, updates logits with `u_hat·v`.
fn agreement_loop<T: Real>(tape: &mut Tape<T>, votes: Var, u_hat: Var, iterations: usize, leaky: bool) -> Result<Agreement> {
    let (classes, n, _) = check_predictions(tape.shape(u_hat))?;
    let mut e = tape.constant(Tensor::zeros([n, classes]));
    let mut out = Agreement {
        v: e,
        logits: Vec::with_capacity(iterations),
        couplings: Vec::with_capacity(iterations),
        parents: Vec::with_capacity(iterations),
    };
    for it in 0..iterations {
        let c = if leaky { tape.leaky_softmax(e)? } else { tape.softmax(e, 1)? };
        let s = tape.weighted_vote_sum(c, votes)?;
        let v = tape.squash(s)?;
        out.logits.push(e);
        out.couplings.push(c);
        out.parents.push(v);
        out.v = v;
        if it + 1 < iterations {
            let a = tape.agreement(u_hat, v)?;
            e = tape.add(e, a)?;
        }
    }
    Ok(out)
}

/// `h[j] = Ã·û[j]·W_g` for every parent `j`.
pub fn gcn_aggregate_on<T: Real>(tape: &mut Tape<T>, u_hat: Var, a_norm: Var, gcn_weight: Var) -> Result<Var> {
    let (classes, n, d) = check_predictions(tape.shape(u_hat))?;
    let mixed = tape.left_matmul_batched(a_norm, u_hat)?;
    let flat = tape.reshape(mixed, &[classes * n, d])?;
    let projected = tape.matmul(flat, gcn_weight)?;
    tape.reshape(projected, &[classes, n, d])
}

/// Attention over parents: `α = softmax_j tanh(h_{j|i}·w + b)`, `o = α·h`.
/// Returns `(o, α)`.
pub fn attention_gate_on<T: Real>(tape: &mut Tape<T>, h: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let (classes, n, d) = check_predictions(tape.shape(h))?;
    let flat = tape.reshape(h, &[classes * n, d])?;
    let scores = tape.affine_score(flat, w, b)?;
    let m = tape.tanh(scores);
    let m = tape.reshape(m, &[classes, n])?;
    let alpha = tape.softmax(m, 0)?;
    let o = tape.scale_vectors(h, alpha)?;
    Ok((o, alpha))
}

/// Runs the routing selected by `cfg`. `u_hat: [C, N, d]` are the
/// predictions and `u: [N, d]` the child capsules the adjacency is built from.
pub fn route<T: Real>(tape: &mut Tape<T>, u_hat: Var, u: Var, cfg: &RoutingConfig, params: &RoutingParams) -> Result<RoutingOutput> {
    cfg.validate()?;
    let (classes, n, _) = check_predictions(tape.shape(u_hat))?;
    match cfg.variant {
        RoutingVariant::Dynamic | RoutingVariant::Leaky => {
            let leaky = cfg.variant == RoutingVariant::Leaky;
            let a = agreement_loop(tape, u_hat, u_hat, cfg.iterations, leaky)?;
            Ok(RoutingOutput {
                v: a.v,
                logits: a.logits,
                couplings: a.couplings,
                parents: a.parents,
                votes: u_hat,
                aggregated: None,
                attention: None,
                adjacency: None,
                leaky,
            })
        }
        RoutingVariant::GcnOnly => {
            let w = params.gcn_weight.ok_or_else(|| Error::InvalidConfig("gcn_only routing needs a GCN weight".into()))?;
            let adj = adjacency::build_normalized(tape, u, cfg.metric, cfg.wd_mode, NormMode::General)?;
            let h = gcn_aggregate_on(tape, u_hat, adj.normalized, w)?;
            let uniform = tape.constant(Tensor::full([n, classes], T::from_f64(1.0 / n as f64)));
            let s = tape.weighted_vote_sum(uniform, h)?;
            let v = tape.squash(s)?;
            Ok(RoutingOutput {
                v,
                logits: Vec::new(),
                couplings: vec![uniform],
                parents: vec![v],
                votes: h,
                aggregated: Some(h),
                attention: None,
                adjacency: Some(adj),
                leaky: false,
            })
        }
        RoutingVariant::Graph => {
            let w = params.gcn_weight.ok_or_else(|| Error::InvalidConfig("graph routing needs a GCN weight".into()))?;
            let adj = adjacency::build_normalized(tape, u, cfg.metric, cfg.wd_mode, cfg.norm_mode)?;
            let h = gcn_aggregate_on(tape, u_hat, adj.normalized, w)?;
            let (votes, alpha) = if cfg.attention {
                let (aw, ab) = params
                    .attention
                    .ok_or_else(|| Error::InvalidConfig("attention enabled without attention weights".into()))?;
                let (o, alpha) = attention_gate_on(tape, h, aw, ab)?;
                (o, Some(alpha))
            } else {
                (h, None)
            };
            let a = agreement_loop(tape, votes, u_hat, cfg.iterations, false)?;
            Ok(RoutingOutput {
                v: a.v,
                logits: a.logits,
                couplings: a.couplings,
                parents: a.parents,
                votes,
                aggregated: Some(h),
                attention: alpha,
                adjacency: Some(adj),
                leaky: false,
            })
        }
    }
}

/// Routing state after one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T = f32> {
    pub iteration: usize,
    /// Logits `e` `[N, C]` used for this iteration's couplings.
    pub logits: Tensor<T>,
    /// Couplings `c` `[N, C]`.
    pub couplings: Tensor<T>,
    /// Per-child leak probability when leaky routing is used.
    pub leak: Option<Vec<f64>>,
    /// `‖v_j‖` after this iteration.
    pub parent_norms: Vec<f64>,
}

/// Reads per-iteration states back from a finished routing pass.
pub fn trace<T: Real>(tape: &Tape<T>, out: &RoutingOutput) -> Vec<RoutingState<T>> {
    out.logits
        .iter()
        .zip(&out.couplings)
        .zip(&out.parents)
        .enumerate()
        .map(|(iteration, ((&e, &c), &v))| {
            let logits = tape.value(e).clone();
            let classes = logits.shape()[1];
            let leak = out.leaky.then(|| kernels::leak_mass(logits.data(), classes));
            let vt = tape.value(v);
            let d = vt.shape()[1];
            RoutingState {
                iteration,
                couplings: tape.value(c).clone(),
                leak,
                parent_norms: vt.data().chunks(d).map(|r| libm::sqrt(kernels::sum_sq(r))).collect(),
                logits,
            }
        })
        .collect()
}

/// Concrete routing weights for the plain-function API.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphWeights<T = f32> {
    pub gcn_weight: Tensor<T>,
    pub attention: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> GraphWeights<T> {
    /// Identity GCN weight and no attention.
    pub fn identity(d: usize) -> Self {
        Self {
            gcn_weight: Tensor::identity(d),
            attention: None,
        }
    }
}

/// Dynamic routing (optionally leaky) over `u_hat: [C, N, d]`; returns `[C, d]`.
pub fn dynamic_routing<T: Real>(u_hat: &Tensor<T>, iterations: usize, leaky: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(u_hat.clone());
    let cfg = RoutingConfig {
        variant: if leaky { RoutingVariant::Leaky } else { RoutingVariant::Dynamic },
        iterations,
        ..RoutingConfig::dynamic(iterations)
    };
    let out = route(&mut tape, x, x, &cfg, &RoutingParams::default())?;
    Ok(tape.value(out.v).clone())
}

/// Any routing variant through the plain API, with its per-iteration trace.
pub fn route_traced<T: Real>(
    u_hat: &Tensor<T>,
    u: &Tensor<T>,
    cfg: &RoutingConfig,
    weights: &GraphWeights<T>,
) -> Result<(Tensor<T>, Vec<RoutingState<T>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(u_hat.clone());
    let children = tape.constant(u.clone());
    let params = RoutingParams {
        gcn_weight: Some(tape.constant(weights.gcn_weight.clone())),
        attention: weights
            .attention
            .as_ref()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone()))),
    };
    let out = route(&mut tape, x, children, cfg, &params)?;
    let states = trace(&tape, &out);
    Ok((tape.value(out.v).clone(), states))
}

/// Graph routing: adjacency over `u`, GCN aggregation, optional attention,
/// then the agreement loop. `cfg.variant` must be [`RoutingVariant::Graph`].
pub fn graph_routing<T: Real>(u_hat: &Tensor<T>, u: &Tensor<T>, cfg: &RoutingConfig, weights: &GraphWeights<T>) -> Result<Tensor<T>> {
    if cfg.variant != RoutingVariant::Graph {
        return Err(Error::InvalidConfig("graph_routing requires the graph variant".into()));
    }
    route_traced(u_hat, u, cfg, weights).map(|(v, _)| v)
}

/// One GCN step `h[j] = Ã·û[j]·W_g`.
pub fn gcn_aggregate<T: Real>(u_hat: &Tensor<T>, a_norm: &Tensor<T>, gcn_weight: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, a, w) = (
        tape.constant(u_hat.clone()),
        tape.constant(a_norm.clone()),
        tape.constant(gcn_weight.clone()),
    );
    let h = gcn_aggregate_on(&mut tape, x, a, w)?;
    Ok(tape.value(h).clone())
}

/// Attention gate; returns `(o, α)`.
pub fn attention_gate<T: Real>(h: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (h, w, b) = (tape.constant(h.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let (o, alpha) = attention_gate_on(&mut tape, h, w, b)?;
    Ok((tape.value(o).clone(), tape.value(alpha).clone()))
}

/// GCN aggregation under the general normalization followed by a squashed
/// mean over children, with no agreement iterations.
pub fn gcn_only<T: Real>(u_hat: &Tensor<T>, u: &Tensor<T>, metric: Metric, gcn_weight: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = RoutingConfig {
        variant: RoutingVariant::GcnOnly,
        metric,
        ..RoutingConfig::default()
    };
    let weights = GraphWeights {
        gcn_weight: gcn_weight.clone(),
        attention: None,
    };
    route_traced(u_hat, u, &cfg, &weights).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn single_child_single_parent_is_squash() {
        let u_hat = Tensor::<f64>::from_f64([1, 1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let v = dynamic_routing(&u_hat, 1, false).unwrap();
        let expected = crate::capsule::squash(u_hat.data());
        assert_eq!(v.data(), expected.as_slice());
    }

    #[test]
    fn identical_parent_votes_give_identical_parents() {
        let one = pseudo(&[1, 5, 4], 3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let u_hat = Tensor::new([2, 5, 4], data).unwrap();
        let (_, states) = route_traced(&u_hat, &pseudo(&[5, 4], 9), &RoutingConfig::dynamic(4), &GraphWeights::identity(4)).unwrap();
        for s in &states {
            assert_eq!(s.parent_norms[0], s.parent_norms[1]);
        }
        let v = dynamic_routing(&u_hat, 4, false).unwrap();
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn leaky_single_parent_routes_half() {
        // With C = 1 and zero logits the coupling is σ(0) = 1/2.
        let u_hat = pseudo(&[1, 3, 2], 5);
        let v = dynamic_routing(&u_hat, 1, true).unwrap();
        let mut s = [0.0; 2];
        for i in 0..3 {
            for (a, sa) in s.iter_mut().enumerate() {
                *sa += 0.5 * u_hat.at(&[0, i, a]);
            }
        }
        let expected = crate::capsule::squash(&s);
        for (x, e) in v.data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_graph_reduces_to_dynamic_bitwise() {
        for seed in 0..10u64 {
            let u_hat = pseudo(&[3, 4, 5], seed);
            let u = pseudo(&[4, 5], seed + 100);
            let cfg = RoutingConfig {
                norm_mode: NormMode::Identity,
                attention: false,
                iterations: 3,
                ..RoutingConfig::default()
            };
            let g = graph_routing(&u_hat, &u, &cfg, &GraphWeights::identity(5)).unwrap();
            let d = dynamic_routing(&u_hat, 3, false).unwrap();
            assert!(g.bit_eq(&d));
        }
    }

    #[test]
    fn single_node_general_graph_doubles_vote() {
        // Ã = softmax([[0]]) + 1 = [[2]], so v = squash(2·û·W_g).
        let u_hat = Tensor::<f64>::from_f64([1, 1, 2], &[0.3, -0.4]).unwrap();
        let u = Tensor::<f64>::from_f64([1, 2], &[1.0, 1.0]).unwrap();
        let w = Tensor::<f64>::from_f64([2, 2], &[0.5, 1.0, -1.0, 2.0]).unwrap();
        let cfg = RoutingConfig {
            attention: false,
            iterations: 1,
            ..RoutingConfig::default()
        };
        let weights = GraphWeights {
            gcn_weight: w.clone(),
            attention: None,
        };
        let v = graph_routing(&u_hat, &u, &cfg, &weights).unwrap();
        let s = [2.0 * (0.3 * 0.5 + -0.4 * -1.0), 2.0 * (0.3 * 1.0 + -0.4 * 2.0)];
        let expected = crate::capsule::squash(&s);
        for (x, e) in v.data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-15);
        }
        let g = gcn_only(&u_hat, &u, Metric::Wd, &w).unwrap();
        for (x, e) in g.data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_identity_is_passthrough() {
        let u_hat = pseudo(&[2, 3, 4], 1);
        let h = gcn_aggregate(&u_hat, &Tensor::identity(3), &Tensor::identity(4)).unwrap();
        assert!(h.bit_eq(&u_hat));
    }

    #[test]
    fn attention_examples() {
        let h = pseudo(&[1, 4, 3], 2);
        let (o, alpha) = attention_gate(&h, &pseudo(&[3], 4), &Tensor::scalar(0.1)).unwrap();
        assert!(alpha.data().iter().all(|&a| a == 1.0));
        assert!(o.bit_eq(&h));

        let h = pseudo(&[4, 3, 2], 6);
        let (o, alpha) = attention_gate(&h, &Tensor::zeros([2]), &Tensor::scalar(0.0)).unwrap();
        assert!(alpha.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        for (x, y) in o.data().iter().zip(h.data()) {
            assert!((x - y / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let u_hat = pseudo(&[2, 2, 2], 0);
        assert!(matches!(dynamic_routing(&u_hat, 0, false), Err(Error::InvalidConfig(_))));
    }
}
