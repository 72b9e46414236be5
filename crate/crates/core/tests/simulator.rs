mod common;

use gaintuner_core::balancer::{evaluate, ControlGains, RedundancyMode};
use gaintuner_core::dynamics::centroidal_transform;
use gaintuner_core::gainfit::{fit_gains, FitOptions};
use gaintuner_core::linalg::PinvOptions;
use gaintuner_core::linearizer::ClosedLoop;
use gaintuner_core::models::{biped14, biped14_equilibrium, chain7, chain7_desired, chain7_equilibrium};
use gaintuner_core::simulator::{
    closed_loop_derivative, integrate, linear_response, settling_time, step_response, ConstraintMode, Control,
    SimConfig, SimState, Trajectory,
};
use nalgebra::{DMatrix, DVector, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn chain7_loop() -> ClosedLoop {
    ClosedLoop::new(&chain7(), &chain7_equilibrium().state(), &ControlGains::nominal(7, 4.0)).unwrap()
}

/// Equilibrium with joint 2 displaced and a consistent integral state.
fn displaced_start(cl: &ClosedLoop, dq: f64) -> SimState {
    let mut q = cl.reference.q.clone();
    q[2] += dq;
    q[5] -= 0.5 * dq;
    let s = cl.embed(&q, &DVector::zeros(q.len())).unwrap();
    SimState::from_robot(&s, cl.integral_state(&s).unwrap())
}

#[test]
fn equilibrium_is_stationary_and_forces_match_controller() {
    let model = chain7();
    let cl = chain7_loop();
    let s = SimState::from_robot(&cl.reference, Vector6::zeros());
    let e = closed_loop_derivative(&model, &s, Control::Balancer(&cl), &SimConfig::default()).unwrap();
    let n = 7;
    assert!(e.derivative.rows(7, n).norm() <= 1e-6);
    assert!(e.derivative.rows(13 + n, n).norm() <= 1e-6);
    let c = centroidal_transform(&model, &cl.reference).unwrap();
    let out = evaluate(&c, &cl.task, &cl.gains, &cl.mode, PinvOptions::default()).unwrap();
    assert!((&e.fc - &out.wrench.f).norm() <= 0.01 * out.wrench.f.norm());
}

#[test]
fn free_fall_momentum_law() {
    let model = chain7();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rs = common::random_state(&model, &mut rng);
    let init = SimState::from_robot(&rs, Vector6::zeros());
    let cfg = SimConfig { dt: 1e-3, duration: 0.1, record_stride: 10, ..SimConfig::default() };
    let traj = integrate(&model, &init, Control::Passive, &cfg).unwrap();
    let mg = model.total_mass() * model.gravity;
    let h0 = traj.samples[0].momentum;
    for s in &traj.samples {
        let mut want = h0;
        want[2] -= mg * s.t;
        assert!((s.momentum.fixed_rows::<3>(0) - want.fixed_rows::<3>(0)).norm() <= 1e-6);
        assert!((s.momentum.fixed_rows::<3>(3) - h0.fixed_rows::<3>(3)).norm() <= 1e-6);
    }
}

#[test]
fn rk4_is_fourth_order() {
    let model = chain7();
    let cl = chain7_loop();
    let init = displaced_start(&cl, 0.1);
    let run = |dt: f64| {
        let cfg = SimConfig { dt, duration: 1.0, record_stride: 1000, ..SimConfig::default() };
        integrate(&model, &init, Control::Balancer(&cl), &cfg).unwrap().final_state.to_vector()
    };
    let (a, b, c) = (run(1e-2), run(5e-3), run(2.5e-3));
    let ratio = (&a - &b).norm() / (&b - &c).norm();
    assert!((12.0..=20.0).contains(&ratio), "{ratio}");
}

#[test]
fn constraint_drift_stays_small_and_momentum_error_decays() {
    let model = chain7();
    let cl = chain7_loop();
    let init = displaced_start(&cl, 0.1);
    let cfg = SimConfig { dt: 2e-3, duration: 5.0, record_stride: 5, ..SimConfig::default() };
    let traj = integrate(&model, &init, Control::Balancer(&cl), &cfg).unwrap();
    assert!(traj.samples.iter().all(|s| s.constraint_norm <= 1e-6));
    let err: Vec<f64> = traj.samples.iter().map(|s| s.momentum_error.norm()).collect();
    let peak = err.iter().enumerate().fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc }).0;
    assert!(err[peak..].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6) + 1e-12));
    assert!(err.last().unwrap() < &(1e-2 * err[peak]));
}

#[test]
fn quaternion_stays_unit() {
    let model = chain7();
    let cl = chain7_loop();
    let cfg = SimConfig { dt: 5e-3, duration: 0.5, ..SimConfig::default() };
    let traj = integrate(&model, &displaced_start(&cl, 0.2), Control::Balancer(&cl), &cfg).unwrap();
    assert!((traj.final_state.quat.norm() - 1.0).abs() <= 1e-9);
}

#[test]
fn redundancy_does_not_change_the_motion() {
    let model = biped14();
    let eq = biped14_equilibrium().state();
    let gains = ControlGains::nominal(14, 4.0);
    let cl = ClosedLoop::new(&model, &eq, &gains).unwrap();
    let mut q = cl.reference.q.clone();
    q[0] += 0.05;
    q[1] -= 0.05;
    let s0 = cl.embed(&q, &DVector::zeros(14)).unwrap();
    let init = SimState::from_robot(&s0, cl.integral_state(&s0).unwrap());
    let cfg = SimConfig { dt: 2e-3, duration: 0.3, record_stride: 5, ..SimConfig::default() };
    let base = integrate(&model, &init, Control::Balancer(&cl), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mg = model.total_mass() * model.gravity;
    for _ in 0..3 {
        let f0 = DVector::from_fn(12, |_, _| rng.random_range(-mg..mg));
        let other = cl.clone().with_mode(RedundancyMode::Fixed(f0));
        let traj = integrate(&model, &init, Control::Balancer(&other), &cfg).unwrap();
        for (a, b) in base.samples.iter().zip(&traj.samples) {
            assert!((&a.q - &b.q).amax() <= 1e-6);
            assert!((&a.qdot - &b.qdot).amax() <= 1e-6);
        }
    }
}

#[test]
fn soft_contacts_hold_the_robot() {
    let model = chain7();
    let cl = chain7_loop();
    let cfg = SimConfig {
        dt: 2e-4,
        duration: 0.3,
        constraint_mode: ConstraintMode::Soft { stiffness: 1e6, damping: 2e3 },
        ..SimConfig::default()
    };
    let traj = integrate(&model, &displaced_start(&cl, 0.05), Control::Balancer(&cl), &cfg).unwrap();
    let worst = traj.samples.iter().map(|s| s.constraint_norm).fold(0.0, f64::max);
    assert!(worst < 1e-2);
}

#[test]
fn linear_response_closed_form() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]);
    let x0 = DVector::from_row_slice(&[1.0, 0.0]);
    for (t, x) in linear_response(&a, &x0, 0.01, 5.0) {
        assert!((x[0] - (1.0 + t) * (-t).exp()).abs() <= 1e-9);
    }
    let drift = linear_response(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), &DVector::from_row_slice(&[0.0, 1.0]), 0.5, 2.0);
    assert!((drift.last().unwrap().1[0] - 2.0).abs() < 1e-12);
}

#[test]
fn settling_time_conventions() {
    assert_eq!(settling_time(&[(0.0, 0.0), (1.0, 0.0)], 0.1), 0.0);
    let s = [(0.0, 1.0), (0.5, 0.2), (1.0, 0.05), (1.5, 0.01)];
    assert_eq!(settling_time(&s, 0.1), 1.0);
}

#[test]
fn step_response_follows_the_linearization() {
    let model = chain7();
    let eq = chain7_equilibrium().state();
    let fit = fit_gains(&model, &eq, &chain7_desired(), &FitOptions::default()).unwrap();
    let cfg = SimConfig { dt: 2e-3, duration: 3.0, record_stride: 1, ..SimConfig::default() };
    let r = step_response(&model, &eq, &fit.gains, 3, 0.05, &cfg).unwrap();
    assert!(r.metrics.linear_gap <= 0.1, "{}", r.metrics.linear_gap);
    assert!((r.metrics.t_s_predicted - 0.75).abs() < 1e-3);
    let flat = step_response(&model, &eq, &fit.gains, 3, 0.0, &cfg).unwrap();
    assert_eq!(flat.metrics.t_s_measured, 0.0);
    assert!(flat.trajectory.samples.iter().all(|s| (&s.q - &eq.q).amax() < 1e-9));
}

#[test]
fn csv_layout() {
    let model = chain7();
    let cl = chain7_loop();
    let cfg = SimConfig { dt: 1e-2, duration: 0.05, record_stride: 1, ..SimConfig::default() };
    let traj = integrate(&model, &displaced_start(&cl, 0.01), Control::Balancer(&cl), &cfg).unwrap();
    let csv = traj.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, Trajectory::header(7, 1));
    assert_eq!(header.split(',').count(), 1 + 7 + 7 + 6 + 6 + 7 + 6 + 2);
    assert!(header.starts_with("t,q_j0,") && header.ends_with(",cnorm,jnunorm"));
    assert_eq!(lines.count(), 6);
    assert!(traj.gnuplot_script("run.csv").contains("'run.csv' using 1:2"));
}
