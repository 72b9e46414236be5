use gaintuner_core::balancer::ControlGains;
use gaintuner_core::linalg::{eigenvalues, rank, RANK_RCOND};
use gaintuner_core::linearizer::{
    analytic_a, c_matrices, numeric_a, numeric_sensitivity, ClosedLoop, GainEntry,
};
use gaintuner_core::models::{biped14, biped14_equilibrium, chain7, chain7_equilibrium};
use nalgebra::{DMatrix, Matrix6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[test]
fn c_matrix_ranks_on_chain7() {
    let model = chain7();
    let cm = c_matrices(&model, &chain7_equilibrium().state()).unwrap();
    assert!(rank(&(&cm.c1 * &cm.c2), RANK_RCOND) <= 6);
    assert!(rank(&(&cm.c3 * &cm.c4), RANK_RCOND) <= model.n_joints() - 6);
    assert!((&cm.lambda * &cm.m_j * &cm.c3).norm() <= 1e-9);
    // One contact: the two terms split the identity.
    let sum = &cm.c1 * &cm.c2 + &cm.c3 * &cm.c4;
    assert!((sum - DMatrix::identity(7, 7)).norm() < 1e-9);
}

#[test]
fn c_matrix_dimensions_on_biped() {
    let cm = c_matrices(&biped14(), &biped14_equilibrium().state()).unwrap();
    assert_eq!(cm.c1.shape(), (14, 6));
    assert_eq!(cm.c2.shape(), (6, 14));
    assert_eq!(cm.c3.shape(), (14, 14));
    assert_eq!(cm.c4.shape(), (14, 14));
}

#[test]
fn analytic_special_cases() {
    let model = chain7();
    let cm = c_matrices(&model, &chain7_equilibrium().state()).unwrap();
    let zero = analytic_a(&cm, &ControlGains::zeros(7));
    assert_eq!(zero.q1, DMatrix::zeros(7, 7));
    assert_eq!(zero.q2, DMatrix::zeros(7, 7));
    assert_eq!(&zero.a * &zero.a, DMatrix::zeros(14, 14));
    let mut g = ControlGains::zeros(7);
    g.momentum.ki = Matrix6::identity();
    let l = analytic_a(&cm, &g);
    assert!((l.q1 - &cm.c1 * &cm.c2).norm() < 1e-14);
}

#[test]
fn numeric_zero_gains_velocity_block_vanishes() {
    let model = chain7();
    let a = numeric_a(&model, &chain7_equilibrium().state(), &ControlGains::zeros(7), None).unwrap();
    assert!(a.view((7, 7), (7, 7)).norm() <= 1e-6);
    assert!(a.view((7, 0), (7, 7)).norm() <= 1e-6);
}

#[test]
fn numeric_nominal_is_stable_and_matches_analytic() {
    let model = chain7();
    let eq = chain7_equilibrium().state();
    let gains = ControlGains::nominal(7, 4.0);
    let cl = ClosedLoop::new(&model, &eq, &gains).unwrap();
    let eps = cl.default_step();
    let a = cl.numeric_a(eps).unwrap();
    assert!(eigenvalues(&a).iter().all(|(re, _)| *re < 0.0));
    let an = analytic_a(&c_matrices(&model, &eq).unwrap(), &gains).a;
    println!("numeric vs analytic A: {:.3e}", rel(&a, &an));
    assert!(rel(&a, &an) < 1e-6);

    // Central differences: halving the step changes the result at O(ε²).
    let a2 = cl.numeric_a(eps / 2.0).unwrap();
    assert!(rel(&a2, &a) < 1e-7);
}

#[test]
fn gain_sensitivity_matches_kronecker_coefficients() {
    let model = chain7();
    let eq = chain7_equilibrium().state();
    let gains = ControlGains::nominal(7, 4.0);
    let cl = ClosedLoop::new(&model, &eq, &gains).unwrap();
    let cm = c_matrices(&model, &eq).unwrap();
    let eps = cl.default_step();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for k in 0..12 {
        let entry = match k % 4 {
            0 => GainEntry::Ki(rng.random_range(0..6), rng.random_range(0..6)),
            1 => GainEntry::Kp(rng.random_range(0..6), rng.random_range(0..6)),
            2 => GainEntry::Kpj(rng.random_range(0..7), rng.random_range(0..7)),
            _ => GainEntry::Kdj(rng.random_range(0..7), rng.random_range(0..7)),
        };
        let num = numeric_sensitivity(&cl, entry, 1.0, eps).unwrap();
        let ana = entry.analytic_sensitivity(&cm);
        // Some joint-gain entries are structurally invisible (C3 E C4 = 0);
        // those only need to vanish numerically too.
        let err = (&num - &ana).norm();
        assert!(err <= 2e-4 * ana.norm() + 1e-9, "{entry:?}: {err:e} vs {:e}", ana.norm());
    }
}

#[test]
fn biped_embedding_needs_closed_loop_postures() {
    let model = biped14();
    let eq = biped14_equilibrium().state();
    let cl = ClosedLoop::new(&model, &eq, &ControlGains::nominal(14, 4.0)).unwrap();
    assert!(cl.check_equilibrium().unwrap() <= 1e-6);
    let mut q = eq.q.clone();
    q[3] += 0.01; // left hip roll alone opens the kinematic loop
    assert!(cl.embed(&q, &eq.qdot).is_err());
}
