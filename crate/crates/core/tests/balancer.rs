mod common;

use common::{random_state, random_vector};
use gaintuner_core::balancer::{
    control_torques, evaluate, integral_update, momentum_reference, projector_residuals,
    redundancy_solve, torque_maps, verify_lemma1, wrench_distribution, ControlGains,
    FrictionParams, MomentumGains, MomentumTask, RedundancyMode, RedundancyProjector,
};
use gaintuner_core::dynamics::{center_of_mass, centroidal_transform, CentroidalTerms};
use gaintuner_core::linalg::{pinv, PinvOptions};
use gaintuner_core::models::{biped14, biped14_equilibrium, chain7, chain7_equilibrium};
use gaintuner_core::multibody::{RobotModel, RobotState};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPTS: PinvOptions = PinvOptions {
    rcond: gaintuner_core::linalg::PINV_RCOND,
    damping: 0.0,
};

fn setup(model: &RobotModel, eq_state: &RobotState) -> (MomentumTask, ControlGains) {
    let task = MomentumTask::at_reference(model, eq_state).unwrap();
    (task, ControlGains::nominal(model.n_joints(), 4.0))
}

/// Joint-space motion near the equilibrium with the base at rest: with the
/// root carrying the contact this keeps chain7's contact velocity zero.
fn chain7_moving(rng: &mut ChaCha8Rng) -> RobotState {
    let mut s = chain7_equilibrium().state();
    s.q += random_vector(7, 0.2, rng);
    s.qdot = random_vector(7, 1.0, rng);
    s
}

fn v6(v: &Vector6<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

proptest! {
    #[test]
    fn momentum_reference_matches_formula(
        h in prop::array::uniform6(-5.0f64..5.0),
        hd in prop::array::uniform6(-5.0f64..5.0),
        hdd in prop::array::uniform6(-5.0f64..5.0),
        i in prop::array::uniform6(-5.0f64..5.0),
        kp in prop::collection::vec(-3.0f64..3.0, 36),
        ki in prop::collection::vec(-3.0f64..3.0, 36),
    ) {
        let task = MomentumTask {
            h_d: Vector6::from(hd),
            h_d_dot: Vector6::from(hdd),
            integral: Vector6::from(i),
            q_d: DVector::zeros(0),
            jg_omega_ref: DMatrix::zeros(3, 0),
        };
        let g = MomentumGains { kp: Matrix6::from_column_slice(&kp), ki: Matrix6::from_column_slice(&ki) };
        let out = momentum_reference(&Vector6::from(h), &task, &g);
        for r in 0..6 {
            let mut expect = hdd[r];
            for c in 0..6 {
                expect -= kp[r + 6 * c] * (h[c] - hd[c]) + ki[r + 6 * c] * i[c];
            }
            prop_assert!((out[r] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn integral_rate_linear_block_is_com_momentum() {
    let model = chain7();
    let (task, _) = setup(&model, &chain7_equilibrium().state());
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let eps = 1e-6;
    for _ in 0..10 {
        let s = chain7_moving(&mut rng);
        let c = centroidal_transform(&model, &s).unwrap();
        let rate = integral_update(&c, &task).unwrap();
        let nu = s.nu();
        let cp = center_of_mass(&model, &s.displaced(&nu, eps)).unwrap();
        let cm = center_of_mass(&model, &s.displaced(&nu, -eps)).unwrap();
        let p = (cp - cm) / (2.0 * eps) * model.total_mass();
        assert!((rate.fixed_rows::<3>(0) - p).norm() < 1e-6 * (1.0 + p.norm()));
        // Also equal to the momentum itself on the constraint manifold.
        assert!((c.momentum.fixed_rows::<3>(0) - p).norm() < 1e-6 * (1.0 + p.norm()));
    }
    let mut rest = chain7_moving(&mut rng);
    rest.qdot.fill(0.0);
    let c = centroidal_transform(&model, &rest).unwrap();
    assert_eq!(integral_update(&c, &task).unwrap(), Vector6::zeros());
}

#[test]
fn integral_rate_at_reference_uses_one_jacobian() {
    let model = chain7();
    let eq = chain7_equilibrium().state();
    let (task, _) = setup(&model, &eq);
    let mut s = eq.clone();
    s.qdot = random_vector(7, 1.0, &mut ChaCha8Rng::seed_from_u64(21));
    let c = centroidal_transform(&model, &s).unwrap();
    let rate = integral_update(&c, &task).unwrap();
    let jg = -(DMatrix::from_fn(6, 6, |r, k| c.m_b[(r, k)]) * pinv(&c.j_b()) * c.j_j());
    let expect = jg * &s.qdot;
    assert!((v6(&rate) - expect).norm() < 1e-10 * (1.0 + rate.norm()));
}

#[test]
fn single_contact_has_no_redundancy() {
    let model = chain7();
    let c = centroidal_transform(&model, &chain7_equilibrium().state()).unwrap();
    let ws = wrench_distribution(&c, &Vector6::zeros(), &DVector::from_element(6, 3.0), OPTS).unwrap();
    assert_eq!(ws.n_b, DMatrix::zeros(6, 6));
    assert_eq!(ws.f, ws.f1);
}

#[test]
fn wrenches_realize_momentum_rate_for_any_f0() {
    let model = biped14();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let s = random_state(&model, &mut rng);
        let c = centroidal_transform(&model, &s).unwrap();
        let hs = Vector6::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let f0 = random_vector(12, 100.0, &mut rng);
        let ws = wrench_distribution(&c, &hs, &f0, OPTS).unwrap();
        let jbt = c.j_b().transpose();
        assert!((&jbt * (&ws.f - &ws.f1)).norm() <= 1e-9 * (1.0 + f0.norm()));
        let realized = &jbt * &ws.f - v6(&c.weight());
        assert!((realized - v6(&hs)).norm() <= 1e-8 * (1.0 + ws.f.norm()));
        assert!((&ws.f - (&ws.f1 + &ws.n_b * &f0)).norm() == 0.0);
    }
}

#[test]
fn static_wrench_supports_the_weight() {
    let model = biped14();
    let c = centroidal_transform(&model, &biped14_equilibrium().state()).unwrap();
    let ws = wrench_distribution(&c, &Vector6::zeros(), &DVector::zeros(12), OPTS).unwrap();
    let fz = ws.f[2] + ws.f[8];
    let mg = model.total_mass() * model.gravity;
    assert!((fz - mg).abs() <= 1e-9 * mg);
}

#[test]
fn projector_identities_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (model, eq) in [(chain7(), chain7_equilibrium()), (biped14(), biped14_equilibrium())] {
        let (task, gains) = setup(&model, &eq.state());
        for _ in 0..20 {
            let s = random_state(&model, &mut rng);
            let c = centroidal_transform(&model, &s).unwrap();
            let r = projector_residuals(&c, &task, &gains.postural).unwrap();
            assert!(r.iter().all(|x| *x <= 1e-9), "{r:?}");
        }
    }
}

fn applied_constraint_acceleration(c: &CentroidalTerms, tau: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
    let n = c.n();
    let mut rhs = c.j.transpose() * f - &c.h;
    rhs.rows_mut(6, n).axpy(1.0, tau, 1.0);
    let nu_dot = c.m.clone().cholesky().unwrap().solve(&rhs);
    &c.j * nu_dot + &c.jdot_nu
}

#[test]
fn statics_torques_keep_contacts_fixed() {
    for (model, eq) in [(chain7(), chain7_equilibrium()), (biped14(), biped14_equilibrium())] {
        let s = eq.state();
        let (task, gains) = setup(&model, &s);
        let c = centroidal_transform(&model, &s).unwrap();
        let maps = torque_maps(&c, &task, &gains.postural, OPTS).unwrap();
        assert_eq!(maps.u0, DVector::zeros(model.n_joints()));
        let hs = momentum_reference(&c.momentum, &task, &gains.momentum);
        let ws = wrench_distribution(&c, &hs, &DVector::zeros(6 * model.n_contacts()), OPTS).unwrap();
        let tau = control_torques(&c, &ws.f, &task, &gains.postural, OPTS).unwrap();
        let acc = applied_constraint_acceleration(&c, &tau, &ws.f);
        assert!(acc.norm() <= 1e-7, "{}", acc.norm());
    }
}

#[test]
fn torque_law_matches_reduced_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for (model, eq) in [(chain7(), chain7_equilibrium()), (biped14(), biped14_equilibrium())] {
        let (task, gains) = setup(&model, &eq.state());
        for _ in 0..10 {
            let s = random_state(&model, &mut rng);
            let c = centroidal_transform(&model, &s).unwrap();
            let f = random_vector(6 * model.n_contacts(), 100.0, &mut rng);
            let maps = torque_maps(&c, &task, &gains.postural, OPTS).unwrap();
            let tau = maps.torque(&c, &f);
            let mbi = DMatrix::from_fn(6, 6, |r, k| c.m_b_inv()[(r, k)]);
            let jb = c.j_b();
            let reduced = c.h_j() - c.j_j().transpose() * &f
                + &maps.lambda_pinv * (&jb * (mbi * (c.h_b() - jb.transpose() * &f)) - &c.jdot_nu)
                + &maps.n_lambda * &maps.u0;
            assert!((&tau - &reduced).norm() <= 1e-9 * (1.0 + tau.norm()));
        }
    }
}

#[test]
fn single_contact_redundancy_is_trivial() {
    let model = chain7();
    let s = chain7_equilibrium().state();
    let (task, gains) = setup(&model, &s);
    let c = centroidal_transform(&model, &s).unwrap();
    let fc = FrictionParams::new(0.7, 5.0, [0.1, 0.05], 1, 8);
    let hs = Vector6::zeros();
    let r = redundancy_solve(&c, &hs, &task, &gains.postural, &fc, OPTS).unwrap();
    assert_eq!(r.wrench.f0, DVector::zeros(6));
    assert_eq!(r.tau, r.tau_zero);
}

fn biped_case(seed: u64) -> (CentroidalTerms, MomentumTask, ControlGains, Vector6<f64>) {
    let model = biped14();
    let eq = biped14_equilibrium().state();
    let (task, gains) = setup(&model, &eq);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = eq.clone();
    s.q += random_vector(14, 0.05, &mut rng);
    s.qdot = random_vector(14, 0.2, &mut rng);
    let c = centroidal_transform(&model, &s).unwrap();
    let hs = momentum_reference(&c.momentum, &task, &gains.momentum);
    (c, task, gains, hs)
}

#[test]
fn inactive_constraints_give_normal_equation_solution() {
    let (c, task, gains, hs) = biped_case(25);
    let fc = FrictionParams::new(100.0, 0.0, [10.0, 10.0], 2, 8);
    let r = redundancy_solve(&c, &hs, &task, &gains.postural, &fc, OPTS).unwrap();
    assert!(r.active.is_empty());
    let t = &r.t;
    let expect = -(pinv(&(t.transpose() * t)) * t.transpose() * &r.tau_zero);
    assert!((&r.wrench.f0 - &expect).norm() <= 1e-8 * (1.0 + expect.norm()));
    // Stationarity: Tᵀ(τ_a + T f0) = 0.
    let kkt = t.transpose() * (&r.tau_zero + t * &r.wrench.f0);
    assert!(kkt.norm() <= 1e-8 * (1.0 + r.tau_zero.norm() * t.norm()));
    assert!(r.tau.norm() <= r.tau_zero.norm());
}

#[test]
fn active_constraints_are_respected_and_optimal_on_a_slice() {
    let (c, task, gains, hs) = biped_case(26);
    let mg = c.total_mass * c.gravity;
    // Find the normal-force floor that the unconstrained optimum violates
    // while f0 = 0 (equal split) still satisfies.
    let loose = FrictionParams::new(100.0, 0.0, [10.0, 10.0], 2, 8);
    let free = redundancy_solve(&c, &hs, &task, &gains.postural, &loose, OPTS).unwrap();
    let fz = |f: &DVector<f64>, k: usize| {
        let r = c.contact_poses[k].rotation.transpose();
        (r * nalgebra::Vector3::new(f[6 * k], f[6 * k + 1], f[6 * k + 2])).z
    };
    let free_min = fz(&free.wrench.f, 0).min(fz(&free.wrench.f, 1));
    let zero_min = fz(&free.wrench.f1, 0).min(fz(&free.wrench.f1, 1));
    assert!(free_min < zero_min, "unconstrained optimum should unload a foot");
    let floor = 0.5 * (free_min + zero_min);
    let fc = FrictionParams::new(100.0, floor, [10.0, 10.0], 2, 8);
    let r = redundancy_solve(&c, &hs, &task, &gains.postural, &fc, OPTS).unwrap();
    assert!(!r.active.is_empty());
    let viol = (&r.c * &r.wrench.f0 - &r.b).max();
    assert!(viol <= 1e-9 * mg);
    assert!(r.tau.norm_squared() <= r.tau_zero.norm_squared());

    // Grid search on the plane spanned by the optimum direction and another
    // null-space direction: no feasible grid point beats the QP solution.
    let d1 = r.wrench.f0.normalize();
    let mut d2 = &r.wrench.n_b * DVector::from_fn(12, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0);
    d2 -= &d1 * d1.dot(&d2);
    let d2 = d2.normalize();
    let span = 2.0 * r.wrench.f0.norm().max(1.0);
    let best = r.tau.norm_squared();
    let steps = 200;
    for a in 0..=steps {
        for b in 0..=steps {
            let x = span * (2.0 * a as f64 / steps as f64 - 1.0);
            let y = span * (2.0 * b as f64 / steps as f64 - 1.0);
            let f0 = &d1 * x + &d2 * y;
            if (&r.c * &f0 - &r.b).max() > 0.0 {
                continue;
            }
            let tau = &r.tau_zero + &r.t * &f0;
            assert!(tau.norm_squared() >= best * (1.0 - 1e-9));
        }
    }
}

#[test]
fn evaluate_modes_agree_on_momentum() {
    let (c, task, gains, _) = biped_case(27);
    let fc = FrictionParams::new(0.7, 1.0, [0.1, 0.05], 2, 8);
    let a = evaluate(&c, &task, &gains, &RedundancyMode::Zero, OPTS).unwrap();
    let b = evaluate(&c, &task, &gains, &RedundancyMode::Optimize(fc), OPTS).unwrap();
    let jbt = c.j_b().transpose();
    assert!((&jbt * (&a.wrench.f - &b.wrench.f)).norm() <= 1e-8 * (1.0 + a.wrench.f.norm()));
}

#[test]
fn lemma1_single_contact_is_exact() {
    let model = chain7();
    let s = chain7_moving(&mut ChaCha8Rng::seed_from_u64(28));
    let (task, gains) = setup(&model, &chain7_equilibrium().state());
    let c = centroidal_transform(&model, &s).unwrap();
    let r = verify_lemma1(&c, &task, &gains, 20, 1, RedundancyProjector::NullSpace).unwrap();
    assert_eq!(r.deviation(), 0.0);
}

#[test]
fn lemma1_on_biped_and_negative_control() {
    let model = biped14();
    let (task, gains) = setup(&model, &biped14_equilibrium().state());
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for k in 0..10 {
        let s = random_state(&model, &mut rng);
        let c = centroidal_transform(&model, &s).unwrap();
        let r = verify_lemma1(&c, &task, &gains, 20, k, RedundancyProjector::NullSpace).unwrap();
        assert!(r.relative_deviation() <= 1e-8, "{}", r.relative_deviation());
        let bad = verify_lemma1(&c, &task, &gains, 20, k, RedundancyProjector::Identity).unwrap();
        assert!(bad.relative_deviation() > 1e-3);
    }
}
