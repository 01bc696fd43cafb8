use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkflow::eval::{gradcheck, gradcheck_instance, GradcheckConfig};
use sinkflow::oracle::{finite_difference_gradient, relative_error, unrolled_gradient};
use sinkflow::ot_layer::{null_space_recenter, sinkhorn_backward_observed, ForwardMode};
use sinkflow::{sinkhorn_backward, sinkhorn_forward, Mat, PotentialMatrix, SinkhornConfig};

fn random_mat(rng: &mut ChaCha8Rng, k: usize, range: f64) -> Mat {
    Mat::from_vec(k, k, (0..k * k).map(|_| rng.gen_range(-range..=range)).collect()).unwrap()
}

#[test]
fn constant_potentials_give_uniform_matrix() {
    for k in [2, 3, 7] {
        let m = PotentialMatrix::new(Mat::filled(k, k, 2.5)).unwrap();
        let s = sinkhorn_forward(&m, &SinkhornConfig::default()).unwrap();
        assert!(s.entries().as_slice().iter().all(|v| (v - 1.0 / k as f64).abs() < 1e-9));
    }
}

#[test]
fn adding_row_and_column_constants_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SinkhornConfig::default();
    for k in [3, 5, 8] {
        for _ in 0..20 {
            let m = random_mat(&mut rng, k, 5.0);
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut shifted = m.clone();
            for i in 0..k {
                for j in 0..k {
                    shifted[(i, j)] += u[i] + v[j];
                }
            }
            let tight = SinkhornConfig::tight();
            let a = sinkhorn_forward(&PotentialMatrix::new(m).unwrap(), &tight).unwrap();
            let b = sinkhorn_forward(&PotentialMatrix::new(shifted).unwrap(), &tight).unwrap();
            assert!(a.entries().max_abs_diff(b.entries()) <= 10.0 * cfg.tol);
        }
    }
}

#[test]
fn log_domain_matches_direct_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let m = PotentialMatrix::new(random_mat(&mut rng, 4, 5.0)).unwrap();
        let direct = sinkhorn_forward(&m, &SinkhornConfig::tight()).unwrap();
        let log = sinkhorn_forward(
            &m,
            &SinkhornConfig {
                mode: ForwardMode::LogDomain,
                ..SinkhornConfig::tight()
            },
        )
        .unwrap();
        assert!(direct.entries().max_abs_diff(log.entries()) < 1e-9);
    }
}

#[test]
fn backward_matches_both_oracles() {
    for k in [3, 4, 5, 8] {
        let report = gradcheck(&GradcheckConfig::new(k, 10, 21)).unwrap();
        assert!(report.passed, "k={k}: {report:?}");
        assert!(report.max_fd_rel_error <= 1e-4);
        assert!(report.max_unrolled_rel_error <= 1e-5);
    }
}

#[test]
fn oracles_agree_with_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_mat(&mut rng, 4, 2.0);
    let d_s = random_mat(&mut rng, 4, 1.0);
    let n = sinkhorn_forward(&PotentialMatrix::new(m.clone()).unwrap(), &SinkhornConfig::tight())
        .unwrap()
        .iterations_used();
    let fd = finite_difference_gradient(&m, &d_s, 2 * n + 50, 1e-5).unwrap();
    let unrolled = unrolled_gradient(&m, &d_s, n.max(100));
    assert!(relative_error(&fd, &unrolled) < 1e-6);
}

#[test]
fn loose_forward_fails_gradcheck() {
    let mut cfg = GradcheckConfig::new(4, 5, 0);
    cfg.forward.tol = 1e-1;
    assert!(!gradcheck(&cfg).unwrap().passed);
}

#[test]
fn constant_upstream_gradient_has_no_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = PotentialMatrix::new(random_mat(&mut rng, 5, 3.0)).unwrap();
    let cfg = SinkhornConfig::tight();
    let s = sinkhorn_forward(&m, &cfg).unwrap();
    // sum(S) = k for every doubly stochastic S.
    let d_s = Mat::filled(5, 5, 1.7);
    let g = sinkhorn_backward(&s, &d_s, &cfg).unwrap();
    assert!(g.potential.frobenius_norm() < 1e-9);
}

#[test]
fn richardson_reaches_tolerance_and_reports_each_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = SinkhornConfig::tight();
    let m = PotentialMatrix::new(random_mat(&mut rng, 6, 5.0)).unwrap();
    let s = sinkhorn_forward(&m, &cfg).unwrap();
    let d_s = random_mat(&mut rng, 6, 1.0);
    let mut seen = Vec::new();
    let g = sinkhorn_backward_observed(&s, &d_s, &cfg, |step| seen.push(step.residual)).unwrap();
    assert!(g.workspace.converged);
    assert_eq!(seen.len(), g.workspace.iterations_used);
    assert!(seen.last().unwrap() <= &cfg.backward_tol);
    assert!(seen.last().unwrap() < seen.first().unwrap());
}

#[test]
fn backward_iterations_stay_within_ten_forward_counts() {
    let report = gradcheck(&GradcheckConfig::new(5, 20, 77)).unwrap();
    for t in &report.trials {
        assert!(t.iteration_ratio() <= 10.0, "{t:?}");
    }
}

#[test]
fn backward_workspace_size_ignores_forward_iteration_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = PotentialMatrix::new(random_mat(&mut rng, 6, 5.0)).unwrap();
    let d_s = random_mat(&mut rng, 6, 1.0);
    let mut sizes = Vec::new();
    for iters in [10, 100, 1000] {
        let cfg = SinkhornConfig {
            max_iters: iters,
            tol: 0.0,
            ..SinkhornConfig::tight()
        };
        let s = sinkhorn_forward(&m, &cfg).unwrap();
        sizes.push(sinkhorn_backward(&s, &d_s, &cfg).unwrap().workspace.heap_bytes());
    }
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");
}

#[test]
fn gradcheck_is_reproducible() {
    let cfg = GradcheckConfig::new(3, 4, 5);
    assert_eq!(gradcheck(&cfg).unwrap(), gradcheck(&cfg).unwrap());
    let m = Mat::identity(3);
    let once = gradcheck_instance(&m, &Mat::identity(3), &cfg, 0).unwrap();
    assert!(once.skipped.is_none());
}

proptest! {
    #[test]
    fn recentering_preserves_outer_sum(
        pairs in (1usize..8).prop_flat_map(|k| (
            prop::collection::vec(-10.0f64..10.0, k),
            prop::collection::vec(-10.0f64..10.0, k),
        ))
    ) {
        let (a_bar, b_bar) = pairs;
        let (a, b) = null_space_recenter(&a_bar, &b_bar).unwrap();
        let k = a.len();
        for i in 0..k {
            for j in 0..k {
                prop_assert!(((a[i] + b[j]) - (a_bar[i] + b_bar[j])).abs() < 1e-12);
            }
        }
        let diff: f64 = a.iter().sum::<f64>() - b.iter().sum::<f64>();
        prop_assert!(diff.abs() < 1e-10);
    }

    #[test]
    fn forward_output_is_doubly_stochastic(seed in any::<u64>(), k in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = PotentialMatrix::new(random_mat(&mut rng, k, 5.0)).unwrap();
        let s = sinkhorn_forward(&m, &SinkhornConfig::tight()).unwrap();
        prop_assert!(s.converged());
        prop_assert!(s.entries().as_slice().iter().all(|&v| v > 0.0));
        for r in s.entries().row_sums().into_iter().chain(s.entries().col_sums()) {
            prop_assert!((r - 1.0).abs() <= 1e-12);
        }
    }
}
