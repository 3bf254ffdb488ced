#![allow(clippy::needless_range_loop)]

use capsgraph_core::adjacency::{normalize_general, pairwise_adjacency_with};
use capsgraph_core::routing::{attention_gate, dynamic_routing, graph_routing, route_traced, GraphWeights};
use capsgraph_core::tape::MarginParams;
use capsgraph_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const METRICS: [(Metric, WdMode); 4] = [
    (Metric::Wd, WdMode::Dirac),
    (Metric::Wd, WdMode::Sorted),
    (Metric::Ed, WdMode::Dirac),
    (Metric::Cs, WdMode::Dirac),
];

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Permutes the child axis of `[C, N, d]`.
fn permute_children(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (c, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(t.len());
    for j in 0..c {
        for &p in perm {
            data.extend_from_slice(&t.data()[(j * n + p) * d..(j * n + p + 1) * d]);
        }
    }
    Tensor::new([c, n, d], data).unwrap()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn squash_is_bounded_and_keeps_direction(s in prop::collection::vec(-10.0f64..10.0, 1..=16)) {
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(n > 1e-6);
        let v = capsule::squash(&s);
        let m = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(m < 1.0);
        prop_assert!((m - n * n / (1.0 + n * n)).abs() < 1e-12);
        let cos = v.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / (m * n);
        prop_assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn couplings_sum_to_one(seed in any::<u64>(), c in 1usize..=4, n in 1usize..=8, d in 1usize..=16, r in 1usize..=4, leaky in any::<bool>()) {
        let mut g = rng(seed);
        let u_hat = rand_tensor(&[c, n, d], &mut g, 1.0);
        let cfg = if leaky {
            RoutingConfig { variant: RoutingVariant::Leaky, ..RoutingConfig::dynamic(r) }
        } else {
            RoutingConfig::dynamic(r)
        };
        let (_, states) = route_traced(&u_hat, &Tensor::zeros([n, d]), &cfg, &GraphWeights::identity(d)).unwrap();
        prop_assert_eq!(states.len(), r);
        for s in &states {
            for i in 0..n {
                let row: f64 = s.couplings.row(i).iter().sum();
                let leak = s.leak.as_ref().map_or(0.0, |l| l[i]);
                prop_assert!((row + leak - 1.0).abs() < 1e-12, "row {} sums to {}", i, row + leak);
            }
        }
    }

    #[test]
    fn attention_sums_to_one_over_parents(seed in any::<u64>(), c in 1usize..=4, n in 1usize..=8, d in 1usize..=16) {
        let mut g = rng(seed);
        let h = rand_tensor(&[c, n, d], &mut g, 2.0);
        let w = rand_tensor(&[d], &mut g, 2.0);
        let b = Tensor::scalar(g.random_range(-1.0..1.0));
        let (o, alpha) = attention_gate(&h, &w, &b).unwrap();
        for i in 0..n {
            let total: f64 = (0..c).map(|j| alpha.at(&[j, i])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        for j in 0..c {
            for i in 0..n {
                for k in 0..d {
                    let want = alpha.at(&[j, i]) * h.at(&[j, i, k]);
                    prop_assert!((o.at(&[j, i, k]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjacency_is_symmetric_zero_diagonal_nonpositive(seed in any::<u64>(), n in 1usize..=8, d in 1usize..=16) {
        let caps = rand_tensor(&[n, d], &mut rng(seed), 1.0);
        for (metric, wd) in METRICS {
            let a = pairwise_adjacency_with(&caps, metric, wd).unwrap().values;
            for i in 0..n {
                prop_assert_eq!(a.at(&[i, i]), 0.0);
                for j in 0..n {
                    prop_assert!(a.at(&[i, j]) <= 0.0);
                    prop_assert!((a.at(&[i, j]) - a.at(&[j, i])).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn general_normalization_rows_sum_to_two(seed in any::<u64>(), n in 1usize..=8, d in 1usize..=16, scale in 0.01f64..100.0) {
        let caps = rand_tensor(&[n, d], &mut rng(seed), scale);
        for (metric, wd) in METRICS {
            let a = normalize_general(&pairwise_adjacency_with(&caps, metric, wd).unwrap()).unwrap().values;
            for i in 0..n {
                let row: f64 = a.row(i).iter().sum();
                prop_assert!((row - 2.0).abs() <= 1e-6, "{:?} row {} = {}", metric, i, row);
            }
        }
    }

    #[test]
    fn adjacency_is_permutation_equivariant((n, perm) in (1usize..=8).prop_flat_map(|n| (Just(n), perm_strategy(n))), seed in any::<u64>(), d in 1usize..=16) {
        let caps = rand_tensor(&[n, d], &mut rng(seed), 1.0);
        let permuted = permute_rows(&caps, &perm);
        for (metric, wd) in METRICS {
            let a = pairwise_adjacency_with(&caps, metric, wd).unwrap().values;
            let b = pairwise_adjacency_with(&permuted, metric, wd).unwrap().values;
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((b.at(&[i, j]) - a.at(&[perm[i], perm[j]])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn routing_is_invariant_to_child_order(
        (n, perm) in (1usize..=8).prop_flat_map(|n| (Just(n), perm_strategy(n))),
        seed in any::<u64>(), c in 1usize..=4, d in 1usize..=8, r in 1usize..=4,
    ) {
        let mut g = rng(seed);
        let u_hat = rand_tensor(&[c, n, d], &mut g, 1.0);
        let u = rand_tensor(&[n, d], &mut g, 1.0);
        let weights = GraphWeights {
            gcn_weight: rand_tensor(&[d, d], &mut g, 1.0),
            attention: Some((rand_tensor(&[d], &mut g, 1.0), Tensor::scalar(0.1))),
        };
        let (pu_hat, pu) = (permute_children(&u_hat, &perm), permute_rows(&u, &perm));
        let a = dynamic_routing(&u_hat, r, false).unwrap();
        let b = dynamic_routing(&pu_hat, r, false).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
        for (metric, _) in METRICS {
            for norm_mode in [NormMode::General, NormMode::Classic] {
                let cfg = RoutingConfig { metric, norm_mode, iterations: r, ..RoutingConfig::default() };
                let a = graph_routing(&u_hat, &u, &cfg, &weights).unwrap();
                let b = graph_routing(&pu_hat, &pu, &cfg, &weights).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-10);
            }
        }
    }

    #[test]
    fn euclidean_relation_obeys_triangle_inequality(seed in any::<u64>(), d in 1usize..=16) {
        let caps = rand_tensor(&[3, d], &mut rng(seed), 1.0);
        let a = pairwise_adjacency_with(&caps, Metric::Ed, WdMode::Dirac).unwrap().values;
        let dist = |i, j| -a.at(&[i, j]);
        prop_assert!(dist(0, 2) <= dist(0, 1) + dist(1, 2) + 1e-12);
    }

    #[test]
    fn sorted_wasserstein_never_exceeds_dirac(seed in any::<u64>(), n in 2usize..=8, d in 1usize..=16) {
        let caps = rand_tensor(&[n, d], &mut rng(seed), 1.0);
        let dirac = pairwise_adjacency_with(&caps, Metric::Wd, WdMode::Dirac).unwrap().values;
        let sorted = pairwise_adjacency_with(&caps, Metric::Wd, WdMode::Sorted).unwrap().values;
        for (x, y) in dirac.data().iter().zip(sorted.data()) {
            prop_assert!(x <= &(y + 1e-12));
        }
    }

    #[test]
    fn same_seed_same_model(seed in any::<u64>()) {
        let cfg = ModelConfig {
            embed_dim: 4, conv_channels: 3, capsule_channels: 2, num_capsules: 3, capsule_dim: 4,
            num_classes: 3, max_len: 8, vocab_size: 12, seed, ..ModelConfig::default()
        };
        let a = Model::<f32>::new(cfg.clone()).unwrap();
        let b = Model::<f32>::new(cfg).unwrap();
        for (x, y) in a.store().iter().zip(b.store().iter()) {
            prop_assert!(x.value.bit_eq(&y.value));
        }
        let doc = [2, 3, 4, 5, 11, 1, 0, 0];
        let (va, pa) = a.predict_doc(&doc).unwrap();
        let (vb, pb) = b.predict_doc(&doc).unwrap();
        prop_assert!(va.bit_eq(&vb) && pa.bit_eq(&pb));
    }
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let w = t.constant(rand_tensor(&shape, &mut rng(seed ^ 0xabc), 1.0));
    let prod = t.mul(y, w).unwrap();
    t.sum(prod)
}

/// Worst mixed error between the tape gradient and central differences:
/// relative for gradients above 1e-3, absolute below, so coordinates whose
/// gradient nearly cancels do not turn truncation error into noise.
fn check(x: &Tensor<f64>, mut f: impl FnMut(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    const STEP: f64 = 1e-5;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<f64> = tape.grad(xv).map_or(vec![0.0; x.len()], |g| g.to_vec());
    let mut eval = |p: Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.input(p);
        let out = f(&mut tape, v).unwrap();
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += STEP;
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * STEP);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

const FD_TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fd_elementwise_and_linear(seed in any::<u64>(), m in 1usize..=4, k in 1usize..=4, n in 1usize..=4) {
        let mut g = rng(seed);
        let a = rand_tensor(&[m, k], &mut g, 1.0);
        let b = rand_tensor(&[k, n], &mut g, 1.0);
        let e = rand_tensor(&[m, k], &mut g, 1.0);
        let bc = b.clone();
        prop_assert!(check(&a, |t, x| { let b = t.constant(bc.clone()); let y = t.matmul(x, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        let ac = a.clone();
        prop_assert!(check(&b, |t, x| { let a = t.constant(ac.clone()); let y = t.matmul(a, x)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        let ec = e.clone();
        prop_assert!(check(&a, |t, x| { let e = t.constant(ec.clone()); let y = t.add(x, e)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&a, |t, x| { let y = t.mul(x, x)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&a, |t, x| { let y = t.scale(x, -2.5); Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&a, |t, x| { let y = t.tanh(x); Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&a, |t, x| { let y = t.reshape(x, &[m * k])?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&a, |t, x| Ok(t.sum(x))) < FD_TOL, "fd check");
        prop_assert!(check(&a, |t, x| { let y = t.l2_norm(x); Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        let away = a.map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
        prop_assert!(check(&away, |t, x| { let y = t.relu(x); Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
    }

    #[test]
    fn fd_softmaxes_squash_norms(seed in any::<u64>(), n in 1usize..=5, c in 1usize..=5) {
        let x = rand_tensor(&[n, c], &mut rng(seed), 2.0);
        for axis in 0..2 {
            let e = check(&x, |t, v| { let y = t.softmax(v, axis)?; Ok(probe(t, y, seed)) });
            prop_assert!(e < FD_TOL, "softmax axis {} error {}", axis, e);
        }
        prop_assert!(check(&x, |t, v| { let y = t.leaky_softmax(v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&x, |t, v| { let y = t.squash(v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&x, |t, v| { let y = t.row_norms(v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
    }

    #[test]
    fn fd_layers(seed in any::<u64>(), dim in 1usize..=3, b1 in 1usize..=3, b2 in 1usize..=2, d in 1usize..=3, c in 1usize..=3) {
        let mut g = rng(seed);
        let (len, window, stride) = (5, 3, 2);
        let table = rand_tensor(&[6, dim], &mut g, 1.0);
        let ids = [1, 4, 0, 2, 5];
        prop_assert!(check(&table, |t, v| { let y = t.gather(v, &ids, None)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let x = rand_tensor(&[len, dim], &mut g, 1.0);
        let w = rand_tensor(&[b1, window * dim], &mut g, 1.0);
        let b = rand_tensor(&[b1], &mut g, 1.0);
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        prop_assert!(check(&x, |t, v| { let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone())); let y = t.ngram_conv(v, w, b, window, stride)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&w, |t, v| { let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone())); let y = t.ngram_conv(x, v, b, window, stride)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&b, |t, v| { let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone())); let y = t.ngram_conv(x, w, v, window, stride)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let gin = rand_tensor(&[2, b1], &mut g, 1.0).map(|v| v.abs() + 0.1);
        let pw = rand_tensor(&[b2, b1, d], &mut g, 1.0);
        let pb = rand_tensor(&[b2, d], &mut g, 1.0);
        let (gc, pwc, pbc) = (gin.clone(), pw.clone(), pb.clone());
        prop_assert!(check(&gin, |t, v| { let (w, b) = (t.constant(pwc.clone()), t.constant(pbc.clone())); let y = t.primary_caps(v, w, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&pw, |t, v| { let (x, b) = (t.constant(gc.clone()), t.constant(pbc.clone())); let y = t.primary_caps(x, v, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&pb, |t, v| { let (x, w) = (t.constant(gc.clone()), t.constant(pwc.clone())); let y = t.primary_caps(x, w, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let u = rand_tensor(&[3, d], &mut g, 1.0);
        let tw = rand_tensor(&[c, d, d], &mut g, 1.0);
        let tb = rand_tensor(&[c, d], &mut g, 1.0);
        let (uc, twc, tbc) = (u.clone(), tw.clone(), tb.clone());
        prop_assert!(check(&u, |t, v| { let (w, b) = (t.constant(twc.clone()), t.constant(tbc.clone())); let y = t.transform(v, w, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&tw, |t, v| { let (x, b) = (t.constant(uc.clone()), t.constant(tbc.clone())); let y = t.transform(x, v, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&tb, |t, v| { let (x, w) = (t.constant(uc.clone()), t.constant(twc.clone())); let y = t.transform(x, w, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
    }

    #[test]
    fn fd_graph_ops(seed in any::<u64>(), n in 2usize..=5, d in 1usize..=4) {
        let caps = rand_tensor(&[n, d], &mut rng(seed), 1.0);
        // the Wasserstein relations have kinks wherever two coordinates tie
        let mut vals = caps.data().to_vec();
        vals.sort_by(f64::total_cmp);
        prop_assume!(vals.windows(2).all(|w| w[1] - w[0] > 1e-3));
        for (metric, wd) in METRICS {
            prop_assert!(check(&caps, |t, v| { let y = t.adjacency(v, metric, wd)?; Ok(probe(t, y, seed)) }) < FD_TOL, "{:?}", metric);
            prop_assert!(check(&caps, |t, v| { let y = t.classic_affinity(v, metric, wd)?; Ok(probe(t, y, seed)) }) < FD_TOL, "{:?}", metric);
            prop_assert!(check(&caps, |t, v| {
                let a = t.classic_affinity(v, metric, wd)?;
                let m = t.add_identity(a)?;
                let y = t.sym_normalize(m)?;
                Ok(probe(t, y, seed))
            }) < FD_TOL, "{:?}", metric);
        }
        let sq = rand_tensor(&[n, n], &mut rng(seed ^ 1), 1.0);
        prop_assert!(check(&sq, |t, v| { let y = t.add_identity(v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
    }

    #[test]
    fn fd_routing_ops(seed in any::<u64>(), c in 1usize..=3, n in 1usize..=4, d in 1usize..=4) {
        let mut g = rng(seed);
        let a = rand_tensor(&[n, n], &mut g, 1.0);
        let x = rand_tensor(&[c, n, d], &mut g, 1.0);
        let (ac, xc) = (a.clone(), x.clone());
        prop_assert!(check(&a, |t, v| { let x = t.constant(xc.clone()); let y = t.left_matmul_batched(v, x)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&x, |t, v| { let a = t.constant(ac.clone()); let y = t.left_matmul_batched(a, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let rows = rand_tensor(&[c * n, d], &mut g, 1.0);
        let w = rand_tensor(&[d], &mut g, 1.0);
        let b = Tensor::scalar(0.3);
        let (rc, wc, bc) = (rows.clone(), w.clone(), b.clone());
        prop_assert!(check(&rows, |t, v| { let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone())); let y = t.affine_score(v, w, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&w, |t, v| { let (x, b) = (t.constant(rc.clone()), t.constant(bc.clone())); let y = t.affine_score(x, v, b)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&b, |t, v| { let (x, w) = (t.constant(rc.clone()), t.constant(wc.clone())); let y = t.affine_score(x, w, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let alpha = rand_tensor(&[c, n], &mut g, 1.0);
        let alc = alpha.clone();
        prop_assert!(check(&x, |t, v| { let al = t.constant(alc.clone()); let y = t.scale_vectors(v, al)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&alpha, |t, v| { let x = t.constant(xc.clone()); let y = t.scale_vectors(x, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let cpl = rand_tensor(&[n, c], &mut g, 1.0);
        let cc = cpl.clone();
        prop_assert!(check(&cpl, |t, v| { let o = t.constant(xc.clone()); let y = t.weighted_vote_sum(v, o)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&x, |t, v| { let cp = t.constant(cc.clone()); let y = t.weighted_vote_sum(cp, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());

        let par = rand_tensor(&[c, d], &mut g, 1.0);
        let pc = par.clone();
        prop_assert!(check(&x, |t, v| { let p = t.constant(pc.clone()); let y = t.agreement(v, p)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
        prop_assert!(check(&par, |t, v| { let u = t.constant(xc.clone()); let y = t.agreement(u, v)?; Ok(probe(t, y, seed)) }) < FD_TOL, "fd check {}", line!());
    }

    #[test]
    fn fd_losses(seed in any::<u64>(), c in 2usize..=5) {
        let mut g = rng(seed);
        let p: Tensor<f64> = Tensor::from_fn(vec![c], |_| g.random_range(0.02..0.98));
        prop_assume!(p.data().iter().all(|&x| (x - 0.9).abs() > 1e-3 && (x - 0.1).abs() > 1e-3));
        let label = (seed as usize) % c;
        prop_assert!(check(&p, |t, v| t.margin_loss(v, label, MarginParams::default())) < FD_TOL, "fd check");
        prop_assert!(check(&p, |t, v| t.cross_entropy(v, label)) < FD_TOL, "fd check");
    }

    #[test]
    fn fd_full_routing(seed in any::<u64>(), c in 1usize..=3, n in 1usize..=4, d in 1usize..=4, leaky in any::<bool>()) {
        let u_hat = rand_tensor(&[c, n, d], &mut rng(seed), 1.0);
        let variant = if leaky { RoutingVariant::Leaky } else { RoutingVariant::Dynamic };
        let cfg = RoutingConfig { variant, ..RoutingConfig::dynamic(3) };
        prop_assert!(check(&u_hat, |t, v| {
            let out = routing::route(t, v, v, &cfg, &routing::RoutingParams::default())?;
            Ok(probe(t, out.v, seed))
        }) < FD_TOL, "fd check");
    }
}
