use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrum_core::alignment::{cost_matrix, dtw, expected_alignment, soft_dtw, soft_dtw_grad, tape_soft_dtw};
use spectrum_core::autodiff::{finite_diff_check, CheckOptions, TapeObjective};
use spectrum_core::Matrix;

/// Every monotone path from (0,0) to (n-1,m-1) as a list of cells.
fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n {
                walk(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                walk(i, j + 1, n, m, cur, out);
            }
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    walk(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

fn path_costs(a: &Matrix<f64>, b: &Matrix<f64>) -> (Vec<Vec<(usize, usize)>>, Vec<f64>) {
    let paths = all_paths(a.rows(), b.rows());
    let costs = paths
        .iter()
        .map(|p| {
            p.iter()
                .map(|&(i, j)| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum()
        })
        .collect();
    (paths, costs)
}

fn rand_seq(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Matrix<f64> {
    Matrix::from_fn(l, d, |_, _| rng.random_range(-2.0..2.0))
}

#[test]
fn dtw_is_the_cheapest_enumerated_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (la, lb, d) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=3));
        let (a, b) = (rand_seq(&mut rng, la, d), rand_seq(&mut rng, lb, d));
        let (_, costs) = path_costs(&a, &b);
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((dtw(&a, &b).unwrap() - best).abs() < 1e-9);
    }
}

#[test]
fn two_against_one_counts_both_cells() {
    let a = Matrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap();
    let b = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let (paths, costs) = path_costs(&a, &b);
    assert_eq!(paths.len(), 1);
    assert_eq!(costs[0], 2.0);
    assert_eq!(dtw(&a, &b).unwrap(), 2.0);
}

#[test]
fn soft_dtw_is_a_log_partition_over_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for gamma in [0.3, 1.0, 5.0] {
        let (a, b) = (rand_seq(&mut rng, 3, 2), rand_seq(&mut rng, 4, 2));
        let (paths, costs) = path_costs(&a, &b);
        let z: f64 = costs.iter().map(|c| (-c / gamma).exp()).sum();
        let want = -gamma * z.ln();
        assert!((soft_dtw(&a, &b, gamma).unwrap() - want).abs() < 1e-9);

        // E is the path-posterior occupancy of each cell.
        let e = expected_alignment(&cost_matrix(&a, &b).unwrap(), gamma).unwrap();
        let mut occ = Matrix::<f64>::zeros(3, 4);
        for (p, c) in paths.iter().zip(&costs) {
            let w = (-c / gamma).exp() / z;
            for &(i, j) in p {
                occ[(i, j)] += w;
            }
        }
        assert!(e.max_abs_diff(&occ) < 1e-9);
        for &(i, j) in &[(0, 0), (1, 1), (2, 3)] {
            assert!(e[(i, j)] >= 1e-12);
        }
    }
}

#[test]
fn small_gamma_approaches_hard_dtw() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (a, b) = (rand_seq(&mut rng, 10, 2), rand_seq(&mut rng, 10, 2));
        let hard = dtw(&a, &b).unwrap();
        let soft = soft_dtw(&a, &b, 1e-3).unwrap();
        assert!((hard - soft).abs() <= 1e-2 * hard.abs().max(1e-12));
    }
}

#[test]
fn soft_dtw_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_seq(&mut rng, 7, 3);
    let b = rand_seq(&mut rng, 5, 3);
    let obj = TapeObjective {
        params: vec![a.clone(), b.clone()],
        names: vec!["a".into(), "b".into()],
        program: |t: &mut spectrum_core::autodiff::Tape<f64>, v: &[spectrum_core::autodiff::Var]| {
            tape_soft_dtw(t, v[0], v[1], 5.0)
        },
    };
    let rep = finite_diff_check(&obj, &CheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");

    // Self-alignment: the gradient with respect to the first argument only.
    let obj = TapeObjective {
        params: vec![a.clone()],
        names: vec!["a".into()],
        program: move |t: &mut spectrum_core::autodiff::Tape<f64>, v: &[spectrum_core::autodiff::Var]| {
            let fixed = t.constant(a.clone());
            tape_soft_dtw(t, v[0], fixed, 5.0)
        },
    };
    let rep = finite_diff_check(&obj, &CheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    let direct = soft_dtw_grad(&b, &b, 5.0).unwrap();
    assert!(direct.is_finite());
}

fn seq_strategy() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
    (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(la, lb, d)| {
        (
            proptest::collection::vec(-3.0f64..3.0, la * d),
            proptest::collection::vec(-3.0f64..3.0, lb * d),
        )
            .prop_map(move |(x, y)| (Matrix::from_vec(la, d, x).unwrap(), Matrix::from_vec(lb, d, y).unwrap()))
    })
}

proptest! {
    #[test]
    fn dtw_is_symmetric((a, b) in seq_strategy()) {
        prop_assert!((dtw(&a, &b).unwrap() - dtw(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn soft_never_exceeds_hard((a, b) in seq_strategy(), gamma in 1e-3f64..10.0) {
        prop_assert!(soft_dtw(&a, &b, gamma).unwrap() <= dtw(&a, &b).unwrap() + 1e-9);
    }

    #[test]
    fn soft_dtw_is_non_increasing_in_gamma((a, b) in seq_strategy()) {
        let vals: Vec<f64> = [0.01, 0.1, 1.0, 5.0, 10.0].iter().map(|&g| soft_dtw(&a, &b, g).unwrap()).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
    }
}
