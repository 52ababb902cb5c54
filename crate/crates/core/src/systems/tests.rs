use super::*;
use nalgebra::{dmatrix, dvector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bench_system() -> LTISystem {
    let a = dmatrix![0.5, -0.5; 1.0, 0.5];
    LTISystem::new(
        a,
        DMatrix::identity(2, 2),
        Some(DMatrix::identity(2, 2) * 0.1),
    )
    .unwrap()
}

fn ball(center: EmpiricalDistribution, radius: f64) -> OTAmbiguitySet {
    OTAmbiguitySet::new(center, radius, TransportCost::sq_norm()).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-spread..spread)))
        .collect()
}

#[test]
fn stack_basics() {
    let sys = bench_system();
    let one = stack(&sys, 1).unwrap();
    assert_eq!(one.a_pow, *sys.a());
    assert_eq!(one.b_stack, *sys.b());
    assert_eq!(one.d_stack, *sys.d());

    let ident = LTISystem::new(DMatrix::identity(2, 2), dmatrix![1.0; 2.0], None).unwrap();
    let three = stack(&ident, 3).unwrap();
    for k in 0..3 {
        assert_eq!(DMatrix::from(three.b_stack.columns(k, 1)), *ident.b());
    }

    // D_stack for the two-step horizon is [D, A D] = [0.1 I, 0.1 A].
    let two = stack(&sys, 2).unwrap();
    let left = DMatrix::from(two.d_stack.columns(0, 2));
    let right = DMatrix::from(two.d_stack.columns(2, 2));
    assert!((left - sys.d()).abs().max() < 1e-15);
    assert!((right - sys.a() * 0.1).abs().max() < 1e-15);

    assert!(stack(&sys, 0).is_err());
}

#[test]
fn stacked_formula_matches_step_simulation() {
    // Regression guard for the stacking order: the affine formula
    // A^T x0 + B_stack u_stacked + D_stack w_stacked must reproduce the
    // step-by-step rollout for random systems and signals.
    let mut r = rng(101);
    for _ in 0..50 {
        let n = r.random_range(1..4);
        let m = r.random_range(1..3);
        let d = r.random_range(1..3);
        let horizon = r.random_range(1..6);
        let sys = LTISystem::new(
            DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0)),
            DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0)),
            Some(DMatrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0))),
        )
        .unwrap();
        let x0 = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let us = random_points(&mut r, horizon, m, 1.0);
        let ws = random_points(&mut r, horizon, d, 1.0);
        let direct = sys.simulate(&x0, &us, &ws);
        let ops = stack(&sys, horizon).unwrap();
        let stacked = &ops.a_pow * &x0
            + &ops.b_stack * StackedOperators::stack_time_series(&us)
            + &ops.d_stack * StackedOperators::stack_time_series(&ws);
        assert!((direct - stacked).abs().max() < 1e-12);
    }
}

#[test]
fn unstack_inverts_stack() {
    let mut r = rng(102);
    let series = random_points(&mut r, 4, 3, 2.0);
    let stacked = StackedOperators::stack_time_series(&series);
    let back = StackedOperators::unstack_time_series(&stacked, 3);
    assert_eq!(back, series);
}

#[test]
fn propagate_initial_identity_is_noop() {
    let mut r = rng(103);
    let sys = LTISystem::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), None).unwrap();
    let s0 = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 3, 2, 1.0)).unwrap(),
        0.3,
    );
    let us = vec![DVector::zeros(2); 4];
    let out = propagate_initial(&sys, &s0, &us, 4).unwrap();
    assert!(out.is_exact());
    assert_eq!(out.radius(), s0.radius());
    for (x, y) in out.center().atoms().iter().zip(s0.center().atoms()) {
        assert!((x - y).abs().max() < 1e-15);
    }
}

#[test]
fn propagate_initial_scalar_doubling() {
    // A = 2 (scalar): composed cost ||. / 2||^2, radius-equivalent 4 eps.
    let sys = LTISystem::new(dmatrix![2.0], dmatrix![1.0], None).unwrap();
    let s0 = ball(
        EmpiricalDistribution::from_scalars(&[0.0], None).unwrap(),
        0.5,
    );
    let out = propagate_initial(&sys, &s0, &[dvector![0.0]], 1).unwrap();
    assert!(out.is_exact());
    // A point at distance d from the pushed center is accepted iff
    // (d/2)^2 <= eps, i.e. d^2 <= 4 eps.
    let inside = EmpiricalDistribution::dirac(dvector![(4.0 * 0.5f64 - 1e-6).sqrt()]);
    let outside = EmpiricalDistribution::dirac(dvector![(4.0 * 0.5f64 + 1e-3).sqrt()]);
    assert!(out.contains(&inside, 0.0).unwrap());
    assert!(!out.contains(&outside, 1e-9).unwrap());
}

#[test]
fn propagate_initial_members_follow() {
    let mut r = rng(104);
    let sys = bench_system();
    let s0 = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 3, 2, 1.0)).unwrap(),
        0.2,
    );
    let us = random_points(&mut r, 3, 2, 0.5);
    let out = propagate_initial(&sys, &s0, &us, 3).unwrap();
    let ops = stack(&sys, 3).unwrap();
    let shift = &ops.b_stack * StackedOperators::stack_time_series(&us);
    for _ in 0..30 {
        let (member, _) = s0.sample_member(&mut r, 0.9).unwrap();
        let image = member.pushforward(|x| &ops.a_pow * x + &shift).unwrap();
        assert!(out.contains(&image, 1e-8).unwrap());
    }
}

#[test]
fn propagate_additive_zero_radius_matches_simulation() {
    let mut r = rng(105);
    let sys = bench_system();
    let horizon = 6;
    let x0 = dvector![0.4, -0.2];
    let us = random_points(&mut r, horizon, 2, 0.5);
    let ws = random_points(&mut r, horizon, 2, 0.8);
    let noise_center =
        EmpiricalDistribution::new(vec![StackedOperators::stack_time_series(&ws)], vec![1.0])
            .unwrap();
    let out = propagate_additive(&sys, &x0, &us, &ball(noise_center, 0.0), horizon).unwrap();
    assert_eq!(out.center().support_size(), 1);
    let simulated = sys.simulate(&x0, &us, &ws);
    assert!((&out.center().atoms()[0] - simulated).abs().max() < 1e-12);
    assert_eq!(out.radius(), 0.0);
}

#[test]
fn propagate_additive_center_on_controlled_samples() {
    // Five noise trajectories at horizon 10: the center sits on the five
    // controlled terminal states.
    let mut r = rng(106);
    let sys = bench_system();
    let horizon = 10;
    let x0 = DVector::zeros(2);
    let us = random_points(&mut r, horizon, 2, 0.3);
    let trajectories: Vec<Vec<DVector<f64>>> = (0..5)
        .map(|_| random_points(&mut r, horizon, 2, 1.0))
        .collect();
    let stacked: Vec<DVector<f64>> = trajectories
        .iter()
        .map(|t| StackedOperators::stack_time_series(t))
        .collect();
    let noise = ball(EmpiricalDistribution::uniform(stacked).unwrap(), 0.05);
    let out = propagate_additive(&sys, &x0, &us, &noise, horizon).unwrap();
    assert!(out.is_exact());
    assert_eq!(out.center().support_size(), 5);
    for (atom, traj) in out.center().atoms().iter().zip(&trajectories) {
        let simulated = sys.simulate(&x0, &us, traj);
        assert!((atom - simulated).abs().max() < 1e-12);
    }
    // Composed cost is a quadratic form in the state dimension.
    assert!(out.cost().as_quadratic_matrix(2).is_some());
}

#[test]
fn propagate_additive_d_identity_keeps_cost() {
    let sys = LTISystem::new(dmatrix![0.5], dmatrix![1.0], None).unwrap();
    let noise = ball(
        EmpiricalDistribution::from_scalars(&[0.1, -0.2], None).unwrap(),
        0.1,
    );
    let out = propagate_additive(&sys, &dvector![1.0], &[dvector![0.3]], &noise, 1).unwrap();
    let w = out.cost().as_quadratic_matrix(1).unwrap();
    assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
    // Center: A x0 + B u0 + w_i = 0.5 + 0.3 + {0.1, -0.2}.
    let mut atoms: Vec<f64> = out.center().atoms().iter().map(|a| a[0]).collect();
    atoms.sort_by(f64::total_cmp);
    assert!((atoms[0] - 0.6).abs() < 1e-12 && (atoms[1] - 0.9).abs() < 1e-12);
}

#[test]
fn multiplicative_deterministic_reduces_to_rollout() {
    let mut r = rng(107);
    let sys = bench_system();
    let horizon = 4;
    let x0 = dvector![0.3, -0.1];
    let us = random_points(&mut r, horizon, 2, 0.5);
    let ones = EmpiricalDistribution::dirac(dvector![1.0, 1.0]);
    let s1 = ball(ones.clone(), 0.0);
    let s2 = ball(ones, 0.0);
    let out = propagate_multiplicative(&sys, &x0, &us, &s1, &s2, horizon).unwrap();
    assert_eq!(out.radius(), 0.0);
    let expected = sys.simulate(&x0, &us, &vec![DVector::zeros(2); horizon]);
    // Support collapses to the rollout (atoms may coincide).
    for atom in out.center().coalesce(1e-9).atoms() {
        assert!((atom - &expected).abs().max() < 1e-10);
    }
}

#[test]
fn multiplicative_single_step_radius() {
    // From x0 = 0: rho_1 = eps2 * ||B u0||^2.
    let sys = bench_system();
    let x0 = DVector::zeros(2);
    let u0 = dvector![0.7, -0.4];
    let ones = EmpiricalDistribution::dirac(dvector![1.0, 1.0]);
    let s1 = ball(ones.clone(), 0.3);
    let s2 = ball(ones, 0.2);
    let out = propagate_multiplicative(&sys, &x0, std::slice::from_ref(&u0), &s1, &s2, 1).unwrap();
    let bu = sys.b() * &u0;
    assert!((out.radius() - 0.2 * bu.norm_squared()).abs() < 1e-12);
    assert!(!out.is_exact());
}

#[test]
fn multiplicative_members_stay_inside() {
    let mut r = rng(108);
    let sys = bench_system();
    let horizon = 3;
    let x0 = dvector![0.5, 0.5];
    let us = random_points(&mut r, horizon, 2, 0.4);
    let center1 =
        EmpiricalDistribution::uniform(vec![dvector![0.9, 1.1], dvector![1.05, 0.95]]).unwrap();
    let center2 =
        EmpiricalDistribution::uniform(vec![dvector![1.0, 0.9], dvector![1.1, 1.0]]).unwrap();
    let s1 = ball(center1, 0.02);
    let s2 = ball(center2, 0.01);
    let out = propagate_multiplicative(&sys, &x0, &us, &s1, &s2, horizon).unwrap();
    for _ in 0..25 {
        let (q1, _) = s1.sample_member(&mut r, 0.9).unwrap();
        let (q2, _) = s2.sample_member(&mut r, 0.9).unwrap();
        // Simulate the terminal law exactly under the member noise laws.
        let mut law = EmpiricalDistribution::dirac(x0.clone());
        for u in &us {
            let pushed = law.pushforward_linear(sys.a()).unwrap();
            let state = q1.hadamard(&pushed).unwrap();
            let inp = q2
                .hadamard(&EmpiricalDistribution::dirac(sys.b() * u))
                .unwrap();
            law = state.convolve(&inp).unwrap();
        }
        assert!(out.contains(&law, 1e-7).unwrap());
    }
}

#[test]
fn combined_uncertainty_formula_and_membership() {
    let mut r = rng(109);
    // Contractive system keeps the superposition radius a valid superset.
    let sys = LTISystem::new(
        dmatrix![0.4, 0.1; -0.1, 0.3],
        DMatrix::identity(2, 2),
        Some(DMatrix::identity(2, 2) * 0.5),
    )
    .unwrap();
    let horizon = 3;
    let us = random_points(&mut r, horizon, 2, 0.4);
    let s0 = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 2, 2, 0.5)).unwrap(),
        0.1,
    );
    let noise = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 2, 6, 0.5)).unwrap(),
        0.05,
    );
    let ops = stack(&sys, horizon).unwrap();
    let out = propagate_combined(&sys, &s0, &noise, &us, horizon).unwrap();
    assert!(!out.is_exact());
    let expected_radius = (s0.radius().sqrt() / linalg::sigma_max(&ops.a_pow)
        + noise.radius().sqrt() / linalg::sigma_max(&ops.d_stack))
    .powi(2);
    assert!((out.radius() - expected_radius).abs() < 1e-14);

    // eps2 = 0 collapses to eps1 / sigma_max(A^T)^2.
    let known_noise = ball(noise.center().clone(), 0.0);
    let out2 = propagate_combined(&sys, &s0, &known_noise, &us, horizon).unwrap();
    assert!((out2.radius() - s0.radius() / linalg::sigma_max(&ops.a_pow).powi(2)).abs() < 1e-14);

    // Monte-Carlo membership of simulated member pairs.
    for _ in 0..20 {
        let (q0, _) = s0.sample_member(&mut r, 0.9).unwrap();
        let (qw, _) = noise.sample_member(&mut r, 0.9).unwrap();
        let shift = &ops.b_stack * StackedOperators::stack_time_series(&us);
        let terminal = q0
            .pushforward_linear(&ops.a_pow)
            .unwrap()
            .translate(&shift)
            .unwrap()
            .convolve(&qw.pushforward_linear(&ops.d_stack).unwrap())
            .unwrap();
        assert!(out.contains(&terminal, 1e-8).unwrap());
    }
}

#[test]
fn nonlinear_translation_and_cube() {
    let mut r = rng(110);
    let s0 = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 3, 2, 1.0)).unwrap(),
        0.15,
    );
    let ident: PointMap = Arc::new(|x: &DVector<f64>| x.clone());
    let same = propagate_nonlinear(&ident, &ident, &s0, 1).unwrap();
    assert_eq!(same.radius(), s0.radius());
    assert_eq!(same.center().atoms(), s0.center().atoms());

    let b = dvector![0.5, -1.0];
    let fwd: PointMap = {
        let b = b.clone();
        Arc::new(move |x: &DVector<f64>| x + &b)
    };
    let bwd: PointMap = {
        let b = b.clone();
        Arc::new(move |x: &DVector<f64>| x - &b)
    };
    let moved = propagate_nonlinear(&fwd, &bwd, &s0, 3).unwrap();
    assert!(!moved.is_exact());
    assert_eq!(moved.radius(), s0.radius());
    for (x, y) in moved.center().atoms().iter().zip(s0.center().atoms()) {
        assert!((x - (y + &b * 3.0)).abs().max() < 1e-12);
    }

    // Injective cube on the line: members map into the propagated set.
    let line = ball(
        EmpiricalDistribution::from_scalars(&[0.2, -0.8, 1.3], None).unwrap(),
        0.05,
    );
    let cube: PointMap = Arc::new(|x: &DVector<f64>| x.map(|v| v * v * v));
    let cbrt: PointMap = Arc::new(|x: &DVector<f64>| x.map(f64::cbrt));
    let pushed = propagate_nonlinear(&cube, &cbrt, &line, 1).unwrap();
    for _ in 0..20 {
        let (member, _) = line.sample_member(&mut r, 0.9).unwrap();
        let image = member.pushforward(|x| cube(x)).unwrap();
        assert!(pushed.contains(&image, 1e-8).unwrap());
    }
}

#[test]
fn consensus_doubly_stochastic() {
    let mut r = rng(111);
    let a = dmatrix![0.5, 0.5; 0.5, 0.5];
    let atoms = random_points(&mut r, 3, 2, 1.0);
    let s0 = ball(EmpiricalDistribution::uniform(atoms.clone()).unwrap(), 0.4);
    let out = consensus_limit(&a, &s0).unwrap();
    assert!(out.doubly_stochastic);
    assert_eq!(out.set.radius(), 0.4 / 2.0);
    assert!(out.set.is_exact());
    // Center atoms are the coordinate means.
    for (scalar, point) in out.set.center().atoms().iter().zip(&atoms) {
        assert!((scalar[0] - point.mean()).abs() < 1e-12);
    }
    // Lift reconstructs the constant vector.
    assert_eq!(out.lift(1.5), dvector![1.5, 1.5]);
}

#[test]
fn consensus_trivial_single_node() {
    let s0 = ball(
        EmpiricalDistribution::from_scalars(&[2.0, 3.0], None).unwrap(),
        0.7,
    );
    let out = consensus_limit(&dmatrix![1.0], &s0).unwrap();
    assert_eq!(out.set.radius(), 0.7);
    assert_eq!(out.set.center().atoms()[0][0], 2.0);
}

#[test]
fn consensus_row_stochastic_power_iteration() {
    let mut r = rng(112);
    // Random primitive row-stochastic matrix.
    let n = 4;
    let mut a = DMatrix::from_fn(n, n, |_, _| r.random_range(0.05..1.0));
    for i in 0..n {
        let s: f64 = a.row(i).sum();
        for j in 0..n {
            a[(i, j)] /= s;
        }
    }
    let s0 = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 3, n, 1.0)).unwrap(),
        0.3,
    );
    let out = consensus_limit(&a, &s0).unwrap();
    assert!((out.set.radius() / s0.radius() - out.weights.norm_squared()).abs() < 1e-10);

    // A^200 pushes every atom to the consensus vector (w^T x) * ones.
    let a200 = linalg::matrix_power(&a, 200).unwrap();
    for atom in s0.center().atoms() {
        let limit = &a200 * atom;
        let expected = out.lift(out.weights.dot(atom));
        assert!((limit - expected).abs().max() < 1e-8);
    }
}

#[test]
fn consensus_rejects_bad_spectra() {
    let s0 = ball(
        EmpiricalDistribution::uniform(vec![dvector![1.0, 2.0], dvector![0.0, 1.0]]).unwrap(),
        0.1,
    );
    // Permutation matrix: eigenvalue -1 on the unit circle.
    assert!(matches!(
        consensus_limit(&dmatrix![0.0, 1.0; 1.0, 0.0], &s0),
        Err(Error::SpectralPrecondition(_))
    ));
    // Identity: eigenvalue 1 not simple.
    assert!(matches!(
        consensus_limit(&DMatrix::identity(2, 2), &s0),
        Err(Error::SpectralPrecondition(_))
    ));
    // Not row-stochastic.
    assert!(matches!(
        consensus_limit(&dmatrix![0.3, 0.3; 0.5, 0.5], &s0),
        Err(Error::SpectralPrecondition(_))
    ));
}

#[test]
fn combined_zero_radii_is_singleton_rollout_hull() {
    let mut r = rng(115);
    let sys = bench_system();
    let horizon = 3;
    let us = random_points(&mut r, horizon, 2, 0.4);
    let x0 = dvector![0.3, -0.2];
    let s0 = ball(EmpiricalDistribution::dirac(x0.clone()), 0.0);
    let w_traj = random_points(&mut r, horizon, 2, 0.6);
    let noise = ball(
        EmpiricalDistribution::new(
            vec![StackedOperators::stack_time_series(&w_traj)],
            vec![1.0],
        )
        .unwrap(),
        0.0,
    );
    let out = propagate_combined(&sys, &s0, &noise, &us, horizon).unwrap();
    assert_eq!(out.radius(), 0.0);
    assert_eq!(out.center().support_size(), 1);
    let simulated = sys.simulate(&x0, &us, &w_traj);
    assert!((&out.center().atoms()[0] - simulated).abs().max() < 1e-12);
}

#[test]
fn ols_empirical_covariance_matches_normal_equations() {
    // Zero-mean i.i.d. noise coordinates with variance sigma^2: the error
    // atoms' empirical covariance approaches sigma^2 (A^T A)^{-1}.
    let mut r = rng(116);
    let a = dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0];
    let n_samples = 10_000;
    let half_width = 0.9f64;
    let sigma_sq = half_width * half_width / 3.0;
    let atoms: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| DVector::from_fn(3, |_, _| r.random_range(-half_width..half_width)))
        .collect();
    let noise = ball(EmpiricalDistribution::uniform(atoms).unwrap(), 0.1);
    let out = ols_error_set(&a, &noise).unwrap();

    let mean = out.center().mean();
    let mut cov = DMatrix::zeros(2, 2);
    for (atom, w) in out.center().atoms().iter().zip(out.center().weights()) {
        let d = atom - &mean;
        cov += (&d * d.transpose()) * *w;
    }
    let expected = (a.transpose() * &a).try_inverse().unwrap() * sigma_sq;
    let rel = (&cov - &expected).abs().max() / expected.abs().max();
    assert!(rel < 0.1, "relative covariance deviation {rel}");
}

#[test]
fn ols_identity_and_averaging() {
    let mut r = rng(113);
    let noise = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 4, 2, 0.5)).unwrap(),
        0.2,
    );
    let same = ols_error_set(&DMatrix::identity(2, 2), &noise).unwrap();
    assert!(same.is_exact());
    assert_eq!(same.radius(), noise.radius());
    assert_eq!(same.center().atoms(), noise.center().atoms());

    // A = [1; 1]: the estimator averages the two measurements and the cost
    // becomes 2 d^2.
    let a = dmatrix![1.0; 1.0];
    let out = ols_error_set(&a, &noise).unwrap();
    assert!(out.is_exact());
    let w = out.cost().as_quadratic_matrix(1).unwrap();
    assert!((w[(0, 0)] - 2.0).abs() < 1e-12);
    for (err, z) in out.center().atoms().iter().zip(noise.center().atoms()) {
        assert!((err[0] - 0.5 * (z[0] + z[1])).abs() < 1e-12);
    }
}

#[test]
fn ols_rank_deficiency_rejected() {
    let mut r = rng(114);
    let noise = ball(
        EmpiricalDistribution::uniform(random_points(&mut r, 2, 3, 0.5)).unwrap(),
        0.1,
    );
    let a = dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0];
    assert!(matches!(
        ols_error_set(&a, &noise),
        Err(Error::RankDeficient {
            rank: 1,
            required: 2
        })
    ));
}

#[test]
fn ols_iid_product_radius() {
    let s_1d = ball(
        EmpiricalDistribution::from_scalars(&[0.1, -0.1], None).unwrap(),
        0.05,
    );
    let a = dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0];
    let out = ols_error_set_iid(&a, &s_1d).unwrap();
    // Product over m = 3 coordinates: radius 3 * eps.
    assert!((out.radius() - 0.15).abs() < 1e-15);
    assert_eq!(out.center().support_size(), 8);
    let w = out.cost().as_quadratic_matrix(2).unwrap();
    assert!((w - a.transpose() * &a).abs().max() < 1e-10);
}
