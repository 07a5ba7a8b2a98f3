use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_leaves, Tolerance};
use crate::indexing::GroupTable;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Fixed random weights turn any output into a scalar with nontrivial
/// per-element gradients.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(r, c, &mut rng));
    // sum(x ⊙ w), one column at a time
    let mut total = None;
    for col in 0..c {
        let xc = g.slice_cols(x, col, col + 1).unwrap();
        let wc = g.slice_cols(w, col, col + 1).unwrap();
        let p = g.mul_rows(wc, xc).unwrap();
        let s = g.sum_all(p);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
    }
    total.unwrap_or_else(|| g.constant(Matrix::scalar(0.0)))
}

#[test]
fn linear_identity_and_bias() {
    let mut g = Graph::new();
    let x = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let w = g.constant(Matrix::identity(2));
    let b = g.constant(Matrix::zeros(1, 2));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let z = g.constant(Matrix::zeros(3, 2));
    let w2 = g.constant(random(2, 4, &mut ChaCha8Rng::seed_from_u64(1)));
    let b2 = g.constant(m(&[&[1.0, -2.0, 3.0, 0.5]]));
    let y2 = g.linear(z, w2, b2).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y2).row(r), &[1.0, -2.0, 3.0, 0.5]);
    }
    assert!(g.linear(x, w2, b).is_err());
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let leaves = vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)];
    let report = check_leaves(
        &leaves,
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            Ok(weighted_sum(g, y, 3))
        },
        Tolerance::default(),
        None,
        0,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.checked, 12 + 8 + 2);
}

#[test]
fn relu_concat_layer_norm() {
    let mut g = Graph::new();
    let x = g.constant(m(&[&[-1.0, 2.0]]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let a = g.constant(Matrix::filled(2, 3, 1.0));
    let b = g.constant(Matrix::filled(2, 5, 2.0));
    let c = g.concat_cols(a, b).unwrap();
    assert_eq!(g.shape(c), (2, 8));
    assert_eq!(g.value(c).row(1), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    let short = g.constant(Matrix::zeros(1, 2));
    assert!(g.concat_cols(a, short).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = g.constant(random(6, 16, &mut rng));
    let gain = g.constant(Matrix::filled(1, 16, 1.0));
    let bias = g.constant(Matrix::zeros(1, 16));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for r in 0..6 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gather_rows_forward_backward() {
    let mut g = Graph::new();
    let x = g.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.gather_rows(x, &[0, 1]).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let mut g = Graph::new();
    let x = g.leaf(m(&[&[1.0, 2.0, 3.0]]));
    let y = g.gather_rows(x, &[0, 0, 0]).unwrap();
    assert_eq!(g.shape(y), (3, 3));
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[3.0, 3.0, 3.0]);
    assert!(g.gather_rows(x, &[1]).is_err());
}

#[test]
fn scatter_mean_examples() {
    let mut g = Graph::new();
    let x = g.constant(m(&[&[1.0, 3.0], &[3.0, 5.0]]));
    let y = g.scatter_mean(x, &GroupTable::single(2)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);

    let ident = GroupTable::from_keys(0..2);
    let y = g.scatter_mean(x, &ident).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn scatter_max_examples() {
    let mut g = Graph::new();
    let x = g.leaf(m(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let y = g.scatter_max(x, &GroupTable::single(2)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 1.0, 0.0]);

    // ties route to the lowest member index
    let mut g = Graph::new();
    let x = g.leaf(m(&[&[2.0], &[2.0], &[1.0]]));
    let y = g.scatter_max(x, &GroupTable::single(3)).unwrap();
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn smooth_l1_examples() {
    let mut g = Graph::new();
    let p = g.leaf(m(&[&[0.3, 1.0]]));
    let same = g.smooth_l1(p, &m(&[&[0.3, 1.0]]), 1.0).unwrap();
    assert_eq!(g.value(same).data()[0], 0.0);

    let q = g.leaf(Matrix::scalar(1.5));
    let l = g.smooth_l1(q, &Matrix::scalar(0.0), 1.0).unwrap();
    assert_eq!(g.value(l).data()[0], 1.0);

    let r = g.leaf(Matrix::scalar(0.3));
    let l = g.smooth_l1(r, &Matrix::scalar(0.0), 1.0).unwrap();
    let grads = g.backward(l).unwrap();
    assert!((grads.wrt(r).data()[0] - 0.3).abs() < 1e-15);
    assert!(g.smooth_l1(r, &Matrix::zeros(2, 1), 1.0).is_err());
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::filled(2, 3, 0.5));
    let unused = g.leaf(Matrix::filled(4, 1, 1.0));
    let s = g.sum_all(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x), Matrix::filled(2, 3, 1.0));
    assert_eq!(grads.wrt(unused), Matrix::zeros(4, 1));
    assert!(g.backward(x).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(2.0));
    let d = g.detach(x);
    let y = g.add(x, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0]);
}

#[test]
fn subm_conv_center_tap_only_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(1, 3, &mut rng);
    let w = random(9 * 3, 2, &mut rng);
    let mut taps = [None; KERNEL_TAPS];
    taps[4] = Some(0);
    let rb = Arc::new(vec![taps]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.subm_conv(xv, wv, &rb).unwrap();
    let center = Matrix::new(3, 2, w.data()[4 * 6..5 * 6].to_vec()).unwrap();
    let expect = x.matmul(&center).unwrap();
    assert!(g.value(y).max_abs_diff(&expect) < 1e-15);
}

/// Random groups over `n` items.
fn random_groups(n: usize, n_keys: u64, rng: &mut ChaCha8Rng) -> GroupTable {
    GroupTable::from_keys((0..n).map(|_| rng.gen_range(0..n_keys)))
}

#[test]
fn every_primitive_passes_gradcheck_over_seeds() {
    let tol = Tolerance::default();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=32);
        let c = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let groups = random_groups(n, rng.gen_range(1..=n as u64), &mut rng);
        let n_groups = groups.n_groups();
        let index: Vec<usize> = (0..rng.gen_range(1..=32)).map(|_| rng.gen_range(0..n)).collect();
        let x = random(n, c, &mut rng);
        let w = random(c, d, &mut rng);
        let b = random(1, d, &mut rng);
        let gain = random(1, c, &mut rng);
        let target = random(n, c, &mut rng);
        let other = random(n, d, &mut rng);
        let col = random(n, 1, &mut rng);

        type Build = Box<dyn Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>>;
        let cases: Vec<(&str, Vec<Matrix>, Build)> = vec![
            (
                "linear",
                vec![x.clone(), w.clone(), b.clone()],
                Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    Ok(weighted_sum(g, y, seed))
                }),
            ),
            (
                "relu",
                vec![x.clone()],
                Box::new(move |g, v| {
                    let y = g.relu(v[0]);
                    Ok(weighted_sum(g, y, seed))
                }),
            ),
            (
                "layer_norm",
                vec![x.clone(), gain.clone(), gain.clone()],
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    Ok(weighted_sum(g, y, seed))
                }),
            ),
            (
                "concat_cols",
                vec![x.clone(), other.clone()],
                Box::new(move |g, v| {
                    let y = g.concat_cols(v[0], v[1])?;
                    Ok(weighted_sum(g, y, seed))
                }),
            ),
            ("gather_rows", vec![x.clone()], {
                let index = index.clone();
                Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &index)?;
                    Ok(weighted_sum(g, y, seed))
                })
            }),
            ("scatter_mean", vec![x.clone()], {
                let groups = groups.clone();
                Box::new(move |g, v| {
                    let y = g.scatter_mean(v[0], &groups)?;
                    Ok(weighted_sum(g, y, seed))
                })
            }),
            ("scatter_sum", vec![x.clone()], {
                let groups = groups.clone();
                Box::new(move |g, v| {
                    let y = g.scatter_sum(v[0], &groups)?;
                    Ok(weighted_sum(g, y, seed))
                })
            }),
            ("scatter_max", vec![x.clone()], {
                let groups = groups.clone();
                Box::new(move |g, v| {
                    let y = g.scatter_max(v[0], &groups)?;
                    Ok(weighted_sum(g, y, seed))
                })
            }),
            ("segment_softmax", vec![col.clone()], {
                let groups = groups.clone();
                Box::new(move |g, v| {
                    let y = g.segment_softmax(v[0], &groups)?;
                    Ok(weighted_sum(g, y, seed))
                })
            }),
            (
                "mul_rows",
                vec![x.clone(), col.clone()],
                Box::new(move |g, v| {
                    let y = g.mul_rows(v[0], v[1])?;
                    Ok(weighted_sum(g, y, seed))
                }),
            ),
            ("smooth_l1", vec![x.clone()], {
                let target = target.clone();
                Box::new(move |g, v| {
                    let s = g.scale(v[0], 2.0);
                    g.smooth_l1(s, &target, 1.0)
                })
            }),
        ];
        for (name, leaves, build) in cases {
            let report = check_leaves(&leaves, build, tol, None, seed).unwrap();
            assert!(
                report.passed(),
                "{name} seed {seed} (n={n}, c={c}, groups={n_groups}): {:?}",
                report.failures
            );
        }
    }
}

#[test]
fn subm_conv_gradcheck() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g_sites = rng.gen_range(1..=10);
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let rb: Rulebook = (0..g_sites)
            .map(|_| {
                let mut t = [None; KERNEL_TAPS];
                for slot in &mut t {
                    if rng.gen_bool(0.5) {
                        *slot = Some(rng.gen_range(0..g_sites));
                    }
                }
                t
            })
            .collect();
        let rb = Arc::new(rb);
        let leaves = vec![random(g_sites, cin, &mut rng), random(9 * cin, cout, &mut rng)];
        let report = check_leaves(
            &leaves,
            |g, v| {
                let y = g.subm_conv(v[0], v[1], &rb)?;
                Ok(weighted_sum(g, y, seed))
            },
            Tolerance::default(),
            None,
            seed,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }
}

#[test]
fn composite_graph_gradcheck() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = random_groups(8, 3, &mut rng);
        let leaves = vec![random(8, 5, &mut rng), random(5, 6, &mut rng), random(1, 6, &mut rng)];
        let target = random(groups.n_groups(), 6, &mut rng);
        let report = check_leaves(
            &leaves,
            |g, v| {
                let h = g.linear(v[0], v[1], v[2])?;
                let h = g.relu(h);
                let pooled = g.scatter_mean(h, &groups)?;
                let back = g.gather_rows(pooled, groups.group_of())?;
                let cat = g.concat_cols(back, h)?;
                let mx = g.scatter_max(cat, &groups)?;
                let first = g.slice_cols(mx, 0, 6)?;
                g.smooth_l1(first, &target, 1.0)
            },
            Tolerance::default(),
            None,
            seed,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }
}

proptest! {
    #[test]
    fn scatter_mean_conserves_column_sums(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 1..40),
        n_keys in 1u64..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = random_groups(rows.len(), n_keys, &mut rng);
        let x = Matrix::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.scatter_mean(xv, &groups).unwrap();
        for col in 0..3 {
            let lhs: f64 = (0..groups.n_groups())
                .map(|gi| g.value(y).get(gi, col) * groups.members(gi).len() as f64)
                .sum();
            let rhs: f64 = (0..rows.len()).map(|r| x.get(r, col)).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        // gather then re-mean is a fixed point
        let back = g.gather_rows(y, groups.group_of()).unwrap();
        let again = g.scatter_mean(back, &groups).unwrap();
        prop_assert!(g.value(again).max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn forward_is_bitwise_reproducible(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let groups = random_groups(12, 4, &mut rng);
            let mut g = Graph::new();
            let x = g.constant(random(12, 4, &mut rng));
            let w = g.constant(random(4, 4, &mut rng));
            let b = g.constant(random(1, 4, &mut rng));
            let y = g.linear(x, w, b).unwrap();
            let y = g.scatter_mean(y, &groups).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data(), b.data());
    }
}
