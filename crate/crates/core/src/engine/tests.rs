use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::precompute::build_pool_plan;

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero, for checks around kinks.
fn rand_away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen() { v } else { -v }
            })
            .collect(),
    )
}

fn rand_coeffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compare the analytic gradient of `build` with respect to each input
/// against central differences; returns the worst relative error.
fn fd_check<'a>(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<'a, f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars);
        g.value(out).data[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .of(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].data.len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= h;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

fn random_index(n_out: usize, pixels: usize, n_in: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n_out * pixels).map(|_| rng.gen_range(0..n_in as u32)).collect()
}

fn random_pool(n: usize, seed: u64) -> PoolPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // points on a 0.1 lattice so every 0.2 cell holds at most 8
    let mut cells: Vec<[f64; 3]> = Vec::new();
    while cells.len() < n {
        let p = [0, 1, 2].map(|_| rng.gen_range(0..6) as f64 * 0.1 + 0.05);
        if !cells.contains(&p) {
            cells.push(p);
        }
    }
    build_pool_plan(&cells, 0.2).unwrap()
}

#[test]
fn identity_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(5, 3, &mut rng);
    let index: Vec<u32> = (0..5).flat_map(|n| [n; 9]).collect();
    let mut g = Graph::new();
    let v = g.input(x.clone()).unwrap();
    let m = g.gather(v, &index, 9).unwrap();
    for n in 0..5 {
        for l in 0..9 {
            assert_eq!(&g.value(m).row(n)[l * 3..l * 3 + 3], x.row(n));
        }
    }
}

#[test]
fn gather_one_hot_gradient_lands_on_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(6, 2, &mut rng);
    let index = random_index(4, 9, 6, &mut rng);
    let mut coeffs = vec![0.0; 4 * 9 * 2];
    let (n, l, c) = (2, 5, 1);
    coeffs[n * 18 + l * 2 + c] = 1.0;
    let mut g = Graph::new();
    let v = g.input(x).unwrap();
    let m = g.gather(v, &index, 9).unwrap();
    let s = g.weighted_sum(m, &coeffs).unwrap();
    let grads = g.backward(s).unwrap();
    let dx = grads.of(v).unwrap();
    let src = index[n * 9 + l] as usize;
    for (i, &d) in dx.iter().enumerate() {
        assert_eq!(d, if i == src * 2 + c { 1.0 } else { 0.0 });
    }
}

#[test]
fn gather_rejects_bad_index() {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::zeros(3, 1)).unwrap();
    let index = [0, 1, 3];
    assert_eq!(
        g.gather(v, &index, 3),
        Err(EngineError::IndexOutOfRange { index: 3, len: 3 })
    );
}

#[test]
fn gather_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(7, 3, &mut rng);
    let index = random_index(5, 9, 7, &mut rng);
    let coeffs = rand_coeffs(5 * 9 * 3, &mut rng);
    let err = fd_check(&[x], |g, v| {
        let m = g.gather(v[0], &index, 9).unwrap();
        g.weighted_sum(m, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mix_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = rand_tensor(4, 9 * 2, &mut rng);
    let ones = vec![1.0; 4 * 9];
    let halves = vec![0.5; 4 * 9];
    let mut g = Graph::new();
    let a = g.input(m.clone()).unwrap();
    let b = g.input(m.clone()).unwrap();
    let one = g.weighted_mix(&[a], &[&ones], 9).unwrap();
    assert_eq!(g.value(one), &m);
    let two = g.weighted_mix(&[a, b], &[&halves, &halves], 9).unwrap();
    assert_eq!(g.value(two), &m);
    assert!(matches!(g.weighted_mix(&[a, b], &[&halves], 9), Err(EngineError::Shape(_))));
}

#[test]
fn mix_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(4, 9 * 3, &mut rng);
    let b = rand_tensor(4, 9 * 3, &mut rng);
    let h1: Vec<f64> = (0..36).map(|_| rng.gen()).collect();
    let h2: Vec<f64> = h1.iter().map(|h| 1.0 - h).collect();
    let coeffs = rand_coeffs(4 * 27, &mut rng);
    let err = fd_check(&[a, b], |g, v| {
        let m = g.weighted_mix(&[v[0], v[1]], &[&h1, &h2], 9).unwrap();
        g.weighted_sum(m, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn concat_pixels_layout_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(3, 9 * 2, &mut rng);
    let d = rand_tensor(3, 9, &mut rng);
    let mut g = Graph::new();
    let va = g.input(a.clone()).unwrap();
    let vd = g.input(d.clone()).unwrap();
    let m = g.concat_pixels(va, vd, 9).unwrap();
    let out = g.value(m);
    assert_eq!(out.cols, 27);
    for n in 0..3 {
        for l in 0..9 {
            assert_eq!(out.row(n)[l * 3..l * 3 + 2], a.row(n)[l * 2..l * 2 + 2]);
            assert_eq!(out.row(n)[l * 3 + 2], d.row(n)[l]);
        }
    }
    let coeffs = rand_coeffs(3 * 27, &mut rng);
    let err = fd_check(&[a, d], |g, v| {
        let m = g.concat_pixels(v[0], v[1], 9).unwrap();
        g.weighted_sum(m, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn center_one_hot_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = rand_tensor(10, 9, &mut rng);
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let mut g = Graph::new();
    let vm = g.input(m.clone()).unwrap();
    let vw = g.input(Tensor::new(9, 1, w)).unwrap();
    let out = g.tangent_conv(vm, vw, None, 9).unwrap();
    for n in 0..10 {
        assert_eq!(g.value(out).data[n], m.row(n)[4]);
    }
}

#[test]
fn tangent_conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = rand_tensor(6, 9 * 3, &mut rng);
    let w = rand_tensor(27, 4, &mut rng);
    let b = rand_tensor(1, 4, &mut rng);
    let coeffs = rand_coeffs(6 * 4, &mut rng);
    let err = fd_check(&[m, w, b], |g, v| {
        let y = g.tangent_conv(v[0], v[1], Some(v[2]), 9).unwrap();
        g.weighted_sum(y, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_spans_several_row_chunks() {
    // more rows than one parallel chunk, checked against a naive product
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = 3 * par::CHUNK_ROWS + 17;
    let x = rand_tensor(rows, 5, &mut rng);
    let w = rand_tensor(5, 3, &mut rng);
    let b = rand_tensor(1, 3, &mut rng);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.input(x.clone()).unwrap(), g.input(w.clone()).unwrap(), g.input(b.clone()).unwrap());
    let y = g.conv1x1(vx, vw, Some(vb)).unwrap();
    for n in 0..rows {
        for o in 0..3 {
            let want: f64 = b.data[o] + (0..5).map(|k| x.row(n)[k] * w.data[k * 3 + o]).sum::<f64>();
            assert!((g.value(y).data[n * 3 + o] - want).abs() < 1e-12);
        }
    }
    let coeffs = rand_coeffs(rows * 3, &mut rng);
    let s = g.weighted_sum(y, &coeffs).unwrap();
    let grads = g.backward(s).unwrap();
    // dW[k, o] = Σ_n x[n, k] c[n, o]
    let dw = grads.of(vw).unwrap();
    for k in 0..5 {
        for o in 0..3 {
            let want: f64 = (0..rows).map(|n| x.row(n)[k] * coeffs[n * 3 + o]).sum();
            assert!((dw[k * 3 + o] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn conv1x1_identity_and_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(4, 3, &mut rng);
    let eye = Tensor::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let vx = g.input(x.clone()).unwrap();
    let vi = g.input(eye).unwrap();
    let y = g.conv1x1(vx, vi, None).unwrap();
    assert_eq!(g.value(y), &x);

    let one = Tensor::new(1, 3, vec![1.0, 2.0, 3.0]);
    let w = Tensor::new(3, 2, vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
    let vo = g.input(one).unwrap();
    let vw = g.input(w).unwrap();
    let y = g.conv1x1(vo, vw, None).unwrap();
    assert_eq!(g.value(y).data, vec![1.0 - 2.0, 0.5 + 4.0 + 3.0]);

    let x = rand_tensor(5, 3, &mut rng);
    let w = rand_tensor(3, 2, &mut rng);
    let b = rand_tensor(1, 2, &mut rng);
    let coeffs = rand_coeffs(10, &mut rng);
    let err = fd_check(&[x, w, b], |g, v| {
        let y = g.conv1x1(v[0], v[1], Some(v[2])).unwrap();
        g.weighted_sum(y, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(1, 3, vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
    assert_eq!(g.value(y).data, vec![-0.2, 0.0, 2.0]);
    let ones = [1.0; 3];
    let s = g.weighted_sum(y, &ones).unwrap();
    // subgradient at zero is the slope
    assert_eq!(g.backward(s).unwrap().of(x).unwrap(), &[0.2, 0.2, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_away_from_zero(6, 4, &mut rng);
    let coeffs = rand_coeffs(24, &mut rng);
    let err = fd_check(&[x], |g, v| {
        let y = g.leaky_relu(v[0], LEAKY_SLOPE).unwrap();
        g.weighted_sum(y, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pool_matches_group_by() {
    let plan = random_pool(60, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(60, 3, &mut rng);
    let mut g = Graph::new();
    let v = g.input(x.clone()).unwrap();
    let avg = g.pool(v, &plan, PoolMode::Average).unwrap();
    let max = g.pool(v, &plan, PoolMode::Max).unwrap();
    for r in 0..plan.rows() {
        let members: Vec<usize> = (0..60).filter(|&m| plan.parent[m] as usize == r).collect();
        for c in 0..3 {
            let vals: Vec<f64> = members.iter().map(|&m| x.row(m)[c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((g.value(avg).row(r)[c] - mean).abs() < 1e-12);
            assert_eq!(g.value(max).row(r)[c], hi);
        }
    }
}

#[test]
fn pool_trivial_cases() {
    let singles = build_pool_plan(&[[0.05, 0.05, 0.05], [0.5, 0.5, 0.5]], 0.2).unwrap();
    let mut g = Graph::new();
    let x = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let v = g.input(x.clone()).unwrap();
    let p = g.pool(v, &singles, PoolMode::Average).unwrap();
    assert_eq!(g.value(p), &x);

    let eight: Vec<[f64; 3]> = (0..8).map(|c| [0.05 + 0.1 * (c & 1) as f64, 0.05 + 0.1 * ((c >> 1) & 1) as f64, 0.05 + 0.1 * (c >> 2) as f64]).collect();
    let full = build_pool_plan(&eight, 0.2).unwrap();
    let v = g.input(Tensor::new(8, 1, vec![0.3; 8])).unwrap();
    let p = g.pool(v, &full, PoolMode::Average).unwrap();
    assert!((g.value(p).data[0] - 0.3f64).abs() < 1e-15);
}

#[test]
fn max_pool_ties_go_to_smallest_member() {
    let eight: Vec<[f64; 3]> = (0..8).map(|c| [0.05 + 0.1 * (c & 1) as f64, 0.05 + 0.1 * ((c >> 1) & 1) as f64, 0.05 + 0.1 * (c >> 2) as f64]).collect();
    let plan = build_pool_plan(&eight, 0.2).unwrap();
    let mut g = Graph::new();
    let v = g.input(Tensor::new(8, 1, vec![0.0, 1.0, 0.5, 1.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
    let p = g.pool(v, &plan, PoolMode::Max).unwrap();
    let one = [1.0];
    let s = g.weighted_sum(p, &one).unwrap();
    let dx = g.backward(s).unwrap().of(v).unwrap().to_vec();
    assert_eq!(dx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_gradients() {
    let plan = random_pool(40, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(40, 2, &mut rng);
    let coeffs = rand_coeffs(plan.rows() * 2, &mut rng);
    for mode in [PoolMode::Average, PoolMode::Max] {
        let err = fd_check(&[x.clone()], |g, v| {
            let p = g.pool(v[0], &plan, mode).unwrap();
            g.weighted_sum(p, &coeffs).unwrap()
        });
        assert!(err < 1e-6, "{mode:?} {err}");
    }
}

#[test]
fn unpool_behaviour_and_gradient() {
    let plan = random_pool(50, 14);
    let mut g = Graph::new();
    let c = g.input(Tensor::new(50, 2, vec![0.7; 100])).unwrap();
    let p = g.pool(c, &plan, PoolMode::Average).unwrap();
    let u = g.unpool(p, &plan).unwrap();
    assert!(g.value(u).data.iter().all(|&v: &f64| (v - 0.7).abs() < 1e-15));

    // per-cell-constant input: unpool∘pool(max) returns it unchanged
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let per_row: Vec<f64> = (0..plan.rows()).map(|_| rng.gen()).collect();
    let x = Tensor::new(50, 1, plan.parent.iter().map(|&r| per_row[r as usize]).collect());
    let v = g.input(x.clone()).unwrap();
    let p = g.pool(v, &plan, PoolMode::Max).unwrap();
    let u = g.unpool(p, &plan).unwrap();
    assert_eq!(g.value(u), &x);

    let xc = rand_tensor(plan.rows(), 3, &mut rng);
    let coeffs = rand_coeffs(50 * 3, &mut rng);
    let err = fd_check(&[xc], |g, v| {
        let u = g.unpool(v[0], &plan).unwrap();
        g.weighted_sum(u, &coeffs).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn concat_order_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_tensor(4, 2, &mut rng);
    let b = rand_tensor(4, 3, &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
    let c = g.concat(va, vb).unwrap();
    assert_eq!(g.value(c).cols, 5);
    assert_eq!(&g.value(c).row(1)[..2], a.row(1));
    assert_eq!(&g.value(c).row(1)[2..], b.row(1));
    let coeffs = rand_coeffs(20, &mut rng);
    let s = g.weighted_sum(c, &coeffs).unwrap();
    let grads = g.backward(s).unwrap();
    for n in 0..4 {
        assert_eq!(&grads.of(va).unwrap()[n * 2..n * 2 + 2], &coeffs[n * 5..n * 5 + 2]);
        assert_eq!(&grads.of(vb).unwrap()[n * 3..n * 3 + 3], &coeffs[n * 5 + 2..n * 5 + 5]);
    }
}

#[test]
fn cross_entropy_limits() {
    let labels = [0u32, 2, 1];
    let unit = [1.0; 3];
    let mut g = Graph::new();
    let peaked = Tensor::new(3, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 50.0, 0.0]);
    let v = g.input(peaked).unwrap();
    let l = g.weighted_cross_entropy(v, &labels, &unit).unwrap();
    assert!(g.value(l).data[0] < 1e-20);

    let v = g.input(Tensor::new(3, 3, vec![0.3; 9])).unwrap();
    let l = g.weighted_cross_entropy(v, &labels, &unit).unwrap();
    assert!((g.value(l).data[0] - 3f64.ln()).abs() < 1e-15);

    // huge logits stay finite thanks to max subtraction
    let v = g.input(Tensor::new(1, 2, vec![1e300, -1e300])).unwrap();
    let one = [1u32];
    let l = g.weighted_cross_entropy(v, &one, &unit[..2]).unwrap();
    assert!(g.value(l).data[0].is_infinite() || g.value(l).data[0] > 1e299);
}

#[test]
fn cross_entropy_ignores_unlabeled_and_weights() {
    let logits = Tensor::new(3, 2, vec![1.0, 0.0, 0.5, 0.5, -2.0, 3.0]);
    let labels = [0u32, UNLABELED, 1];
    let w = [2.0, 0.5];
    let mut g = Graph::new();
    let v = g.input(logits.clone()).unwrap();
    let l = g.weighted_cross_entropy(v, &labels, &w).unwrap();
    let nll = |row: &[f64], y: usize| -(row[y].exp() / row.iter().map(|x| x.exp()).sum::<f64>()).ln();
    let want = (2.0 * nll(logits.row(0), 0) + 0.5 * nll(logits.row(2), 1)) / 2.0;
    assert!((g.value(l).data[0] - want).abs() < 1e-14);

    let none = [UNLABELED; 3];
    assert_eq!(g.weighted_cross_entropy(v, &none, &w), Err(EngineError::NoLabels));
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let logits = rand_tensor(8, 4, &mut rng);
    let labels: Vec<u32> = (0..8).map(|i| if i == 3 { UNLABELED } else { rng.gen_range(0..4) }).collect();
    let w = [0.5, 1.0, 2.0, 1.5];
    let err = fd_check(&[logits], |g, v| g.weighted_cross_entropy(v[0], &labels, &w).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn non_finite_forward_is_reported() {
    let mut g = Graph::<f64>::new();
    let err = g.input(Tensor::new(1, 2, vec![1.0, f64::NAN])).unwrap_err();
    assert!(matches!(err, EngineError::NonFinite { op: "input", .. }));
    let x = g.input(Tensor::new(1, 1, vec![1e200])).unwrap();
    let w = g.input(Tensor::new(1, 1, vec![1e200])).unwrap();
    assert!(matches!(g.conv1x1(x, w, None), Err(EngineError::NonFinite { op: "linear", .. })));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(2, 2)).unwrap();
    assert_eq!(g.backward(x).err(), Some(EngineError::NotScalar { rows: 2, cols: 2 }));
}

#[test]
fn param_gradients_are_collected() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f64>::new();
    let w = store.add_uniform("w", 3, 2, &mut rng);
    let b = store.add_zeros("b", 1, 2);
    let mut g = Graph::new();
    let x = g.input(rand_tensor(4, 3, &mut rng)).unwrap();
    let vw = g.param(&store, w).unwrap();
    let vb = g.param(&store, b).unwrap();
    let y = g.conv1x1(x, vw, Some(vb)).unwrap();
    let ones = [1.0; 8];
    let s = g.weighted_sum(y, &ones).unwrap();
    let grads = g.backward(s).unwrap().params();
    assert_eq!(grads.len(), 2);
    assert_eq!(grads[1], (b, vec![4.0, 4.0]));
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(2, 2, vec![1.0, -1.0, 0.5, 2.0])).unwrap();
    let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
    let labels = [0u32, 1];
    let w = [1.0f32, 1.0];
    let l = g.weighted_cross_entropy(y, &labels, &w).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.of(x).unwrap().len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gather_backward_conserves_mass(seed in 0u64..10_000, n in 1usize..40, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(n, c, &mut rng);
        let index = random_index(n, 9, n, &mut rng);
        let coeffs = rand_coeffs(n * 9 * c, &mut rng);
        let mut g = Graph::new();
        let v = g.input(x).unwrap();
        let m = g.gather(v, &index, 9).unwrap();
        let s = g.weighted_sum(m, &coeffs).unwrap();
        let dx: f64 = g.backward(s).unwrap().of(v).unwrap().iter().sum();
        prop_assert!((dx - coeffs.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn average_pool_preserves_mean_on_full_cells(seed in 0u64..10_000, cells in 1usize..6) {
        // every coarse cell holds exactly 8 points
        let mut positions = Vec::new();
        for cell in 0..cells {
            for c in 0..8 {
                positions.push([
                    cell as f64 * 0.2 + 0.05 + 0.1 * (c & 1) as f64,
                    0.05 + 0.1 * ((c >> 1) & 1) as f64,
                    0.05 + 0.1 * (c >> 2) as f64,
                ]);
            }
        }
        let plan = build_pool_plan(&positions, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(positions.len(), 2, &mut rng);
        let mut g = Graph::new();
        let v = g.input(x.clone()).unwrap();
        let p = g.pool(v, &plan, PoolMode::Average).unwrap();
        let mean_in: f64 = x.data.iter().sum::<f64>() / x.data.len() as f64;
        let out = &g.value(p).data;
        let mean_out: f64 = out.iter().sum::<f64>() / out.len() as f64;
        prop_assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn tangent_conv_gradient_random_shapes(seed in 0u64..10_000, n in 1usize..12, cin in 1usize..4, cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(n, cin, &mut rng);
        let index = random_index(n, 9, n, &mut rng);
        let w = rand_tensor(9 * cin, cout, &mut rng);
        let b = rand_tensor(1, cout, &mut rng);
        let coeffs = rand_coeffs(n * cout, &mut rng);
        let err = fd_check(&[x, w, b], |g, v| {
            let m = g.gather(v[0], &index, 9).unwrap();
            let y = g.tangent_conv(m, v[1], Some(v[2]), 9).unwrap();
            g.weighted_sum(y, &coeffs).unwrap()
        });
        prop_assert!(err < 1e-6, "{}", err);
    }
}
