//! Fixed-step closed-loop simulation with held contacts, and step-response
//! analysis against the linearized joint dynamics.
//!
//! State `χ = (p_B, Q, q_j, ṗ_B, ω_B, q̇_j, I_H̃)`, with `Q` a scalar-first
//! Hamilton unit quaternion and `ω_B` expressed in the world frame.

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;

use crate::balancer::{evaluate, ControlGains};
use crate::dynamics::{centroidal_with, constrained_forward_dynamics};
use crate::error::{Error, Result};
use crate::io::{csv_row, fmt_f64};
use crate::linalg::{eigenvalues, expm, PinvOptions};
use crate::linearizer::{analytic_a, c_matrices, contact_error_with, ClosedLoop};
use crate::multibody::{Kinematics, Pose, RobotModel, RobotState};

/// Any state entry beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Half width of the settling band, as a fraction of the step.
pub const SETTLING_BAND: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub p_b: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub quat: Quaternion<f64>,
    pub q: DVector<f64>,
    pub pdot_b: Vector3<f64>,
    pub omega_b: Vector3<f64>,
    pub qdot: DVector<f64>,
    pub integral: Vector6<f64>,
}

impl SimState {
    pub fn from_robot(state: &RobotState, integral: Vector6<f64>) -> Self {
        let v = state.base_velocity;
        Self {
            p_b: state.base_pose.position,
            quat: state.base_quaternion().into_inner(),
            q: state.q.clone(),
            pdot_b: Vector3::new(v[0], v[1], v[2]),
            omega_b: Vector3::new(v[3], v[4], v[5]),
            qdot: state.qdot.clone(),
            integral,
        }
    }

    pub fn robot_state(&self) -> RobotState {
        let rot = UnitQuaternion::from_quaternion(self.quat).to_rotation_matrix();
        let v = &self.pdot_b;
        let w = &self.omega_b;
        RobotState {
            base_pose: Pose::new(rot.into_inner(), self.p_b),
            q: self.q.clone(),
            base_velocity: Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z),
            qdot: self.qdot.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// Flat layout `(p, Q, q, ṗ, ω, q̇, I)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut x = DVector::zeros(2 * n + 19);
        x.fixed_rows_mut::<3>(0).copy_from(&self.p_b);
        x.fixed_rows_mut::<4>(3).copy_from(&Vector4Wxyz::from(self.quat).0);
        x.rows_mut(7, n).copy_from(&self.q);
        x.fixed_rows_mut::<3>(7 + n).copy_from(&self.pdot_b);
        x.fixed_rows_mut::<3>(10 + n).copy_from(&self.omega_b);
        x.rows_mut(13 + n, n).copy_from(&self.qdot);
        x.fixed_rows_mut::<6>(13 + 2 * n).copy_from(&self.integral);
        x
    }

    pub fn from_vector(x: &DVector<f64>, n: usize) -> Self {
        Self {
            p_b: x.fixed_rows::<3>(0).into_owned(),
            quat: Quaternion::new(x[3], x[4], x[5], x[6]),
            q: x.rows(7, n).into_owned(),
            pdot_b: x.fixed_rows::<3>(7 + n).into_owned(),
            omega_b: x.fixed_rows::<3>(10 + n).into_owned(),
            qdot: x.rows(13 + n, n).into_owned(),
            integral: x.fixed_rows::<6>(13 + 2 * n).into_owned(),
        }
    }

    fn normalize(&mut self) {
        let norm = self.quat.norm();
        self.quat /= norm;
    }
}

struct Vector4Wxyz(nalgebra::Vector4<f64>);

impl From<Quaternion<f64>> for Vector4Wxyz {
    fn from(q: Quaternion<f64>) -> Self {
        Self(nalgebra::Vector4::new(q.w, q.i, q.j, q.k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintMode {
    /// Rigid contacts from the constrained dynamics with Baumgarte terms.
    Kkt,
    /// Penalty contacts acting through the contact-space inertia
    /// `Λ_c = (J M⁻¹ Jᵀ)⁻¹`: `f = −Λ_c (k c + d J ν)`, with `k` in 1/s²
    /// and `d` in 1/s.
    Soft { stiffness: f64, damping: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    /// Baumgarte gains `(k_pos, k_vel)`.
    pub k_pos: f64,
    pub k_vel: f64,
    pub constraint_mode: ConstraintMode,
    pub record_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 1.0,
            k_pos: 100.0,
            k_vel: 20.0,
            constraint_mode: ConstraintMode::Kkt,
            record_stride: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return Err(Error::Invalid("time step must be positive and duration nonnegative".into()));
        }
        if !(self.k_pos >= 0.0) || !(self.k_vel >= 0.0) {
            return Err(Error::Invalid("Baumgarte gains must be nonnegative".into()));
        }
        if let ConstraintMode::Soft { stiffness, damping } = self.constraint_mode {
            if !(stiffness > 0.0) || !(damping >= 0.0) {
                return Err(Error::Invalid("penalty contact gains must be positive".into()));
            }
        }
        if self.record_stride == 0 {
            return Err(Error::Invalid("record stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Source of joint torques.
#[derive(Clone, Copy, Debug)]
pub enum Control<'a> {
    /// The momentum-based balancing controller.
    Balancer(&'a ClosedLoop),
    /// Zero torques and no contacts held (free flight of the model's
    /// contact-free version).
    Passive,
}

/// Quantities evaluated along with the derivative.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub derivative: DVector<f64>,
    pub momentum: Vector6<f64>,
    pub momentum_error: Vector6<f64>,
    pub tau: DVector<f64>,
    /// Contact wrenches acting on the robot, stacked.
    pub fc: DVector<f64>,
    pub constraint_norm: f64,
    pub jnu_norm: f64,
}

pub fn closed_loop_derivative(
    model: &RobotModel,
    state: &SimState,
    control: Control,
    cfg: &SimConfig,
) -> Result<Evaluation> {
    let n = model.n_joints();
    let rs = state.robot_state();
    let kin = Kinematics::new(model, &rs)?;
    let c = centroidal_with(model, &rs, &kin)?;
    let nu = rs.nu();
    let (tau, integral_rate, h_d, refs) = match control {
        Control::Balancer(cl) => {
            let task = cl.task.clone().with_integral(state.integral);
            let out = evaluate(&c, &task, &cl.gains, &cl.mode, PinvOptions::default())?;
            (out.tau, out.integral_rate, task.h_d, Some(cl.contact_references()))
        }
        Control::Passive => (DVector::zeros(n), Vector6::zeros(), Vector6::zeros(), None),
    };
    let d = &c.original;
    let (j, cerr, jdot_nu) = match refs {
        Some(refs) => (
            c.original_j.clone(),
            contact_error_with(model, &kin, refs),
            kin.contact_bias(model),
        ),
        None => (DMatrix::zeros(0, model.dof()), DVector::zeros(0), DVector::zeros(0)),
    };
    let jnu = &j * &nu;
    let (nu_dot, fc) = match cfg.constraint_mode {
        ConstraintMode::Kkt => {
            let stab = &jnu * cfg.k_vel + &cerr * cfg.k_pos;
            let sol = constrained_forward_dynamics(&d.m, &d.h, &j, &jdot_nu, &tau, Some(&stab))?;
            (sol.nu_dot, sol.f)
        }
        ConstraintMode::Soft { stiffness, damping } => {
            let chol =
                d.m.clone().cholesky().ok_or(Error::Invalid("mass matrix is not positive definite".into()))?;
            let jminv_jt = &j * chol.solve(&j.transpose());
            let lambda_c = jminv_jt.cholesky().ok_or(Error::SingularKkt)?;
            let f = -lambda_c.solve(&(&cerr * stiffness + &jnu * damping));
            let mut rhs = j.transpose() * &f - &d.h;
            rhs.rows_mut(6, n).axpy(1.0, &tau, 1.0);
            let nu_dot = chol.solve(&rhs);
            (nu_dot, f)
        }
    };
    let w = state.omega_b;
    let qd = Quaternion::new(0.0, w.x, w.y, w.z) * state.quat * 0.5;
    let mut dx = DVector::zeros(2 * n + 19);
    dx.fixed_rows_mut::<3>(0).copy_from(&state.pdot_b);
    dx.fixed_rows_mut::<4>(3).copy_from(&Vector4Wxyz::from(qd).0);
    dx.rows_mut(7, n).copy_from(&state.qdot);
    dx.rows_mut(7 + n, n + 6).copy_from(&nu_dot);
    dx.fixed_rows_mut::<6>(13 + 2 * n).copy_from(&integral_rate);
    Ok(Evaluation {
        derivative: dx,
        momentum: c.momentum,
        momentum_error: c.momentum - h_d,
        tau,
        fc,
        constraint_norm: cerr.norm(),
        jnu_norm: jnu.norm(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub momentum: Vector6<f64>,
    pub momentum_error: Vector6<f64>,
    pub tau: DVector<f64>,
    pub fc: DVector<f64>,
    pub constraint_norm: f64,
    pub jnu_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n: usize,
    pub n_contacts: usize,
    pub samples: Vec<Sample>,
    pub final_state: SimState,
}

impl Trajectory {
    pub fn header(n: usize, nc: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..n).map(|i| format!("q_j{i}")));
        cols.extend((0..n).map(|i| format!("dq_j{i}")));
        cols.extend((0..6).map(|i| format!("H{i}")));
        cols.extend((0..6).map(|i| format!("Htilde{i}")));
        cols.extend((0..n).map(|i| format!("tau{i}")));
        cols.extend((0..6 * nc).map(|i| format!("fc{i}")));
        cols.push("cnorm".into());
        cols.push("jnunorm".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.n, self.n_contacts);
        out.push('\n');
        for s in &self.samples {
            let row = std::iter::once(s.t)
                .chain(s.q.iter().copied())
                .chain(s.qdot.iter().copied())
                .chain(s.momentum.iter().copied())
                .chain(s.momentum_error.iter().copied())
                .chain(s.tau.iter().copied())
                .chain(s.fc.iter().copied())
                .chain([s.constraint_norm, s.jnu_norm]);
            out.push_str(&csv_row(row));
            out.push('\n');
        }
        out
    }

    /// Gnuplot script plotting joint angles and momentum from `csv_name`.
    pub fn gnuplot_script(&self, csv_name: &str) -> String {
        let n = self.n;
        let mut s = String::new();
        s.push_str("set datafile separator ','\nset key autotitle columnhead\nset xlabel 't [s]'\n");
        s.push_str("set multiplot layout 2,1\nset ylabel 'q_j [rad]'\n");
        let joints: Vec<String> = (0..n).map(|i| format!("'{csv_name}' using 1:{} with lines", i + 2)).collect();
        s.push_str(&format!("plot {}\n", joints.join(", ")));
        s.push_str("set ylabel 'H'\n");
        let h: Vec<String> = (0..6)
            .map(|i| format!("'{csv_name}' using 1:{} with lines", 2 * n + 2 + i))
            .collect();
        s.push_str(&format!("plot {}\nunset multiplot\n", h.join(", ")));
        s
    }

    pub fn joint(&self, i: usize) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.t, s.q[i])).collect()
    }
}

/// Fixed-step RK4; the quaternion is renormalized after every step.
pub fn integrate(model: &RobotModel, init: &SimState, control: Control, cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let n = model.n_joints();
    if init.n() != n || init.qdot.len() != n {
        return Err(Error::DimensionMismatch {
            what: "simulation state joints",
            expected: n,
            got: init.n(),
        });
    }
    let passive_model;
    let model = match control {
        Control::Passive => {
            passive_model = model.with_contacts(&[]);
            &passive_model
        }
        Control::Balancer(_) => model,
    };
    let mut state = init.clone();
    state.normalize();
    let steps = cfg.steps();
    let mut samples = Vec::with_capacity(steps / cfg.record_stride + 2);
    let dt = cfg.dt;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let x = state.to_vector();
        if let Some(i) = x.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Diverged {
                t,
                detail: format!("state entry {i} is {}", x[i]),
            });
        }
        let e1 = closed_loop_derivative(model, &state, control, cfg)?;
        if k % cfg.record_stride == 0 || k == steps {
            samples.push(Sample {
                t,
                q: state.q.clone(),
                qdot: state.qdot.clone(),
                momentum: e1.momentum,
                momentum_error: e1.momentum_error,
                tau: e1.tau.clone(),
                fc: e1.fc.clone(),
                constraint_norm: e1.constraint_norm,
                jnu_norm: e1.jnu_norm,
            });
        }
        if k == steps {
            break;
        }
        let at = |dx: &DVector<f64>, h: f64| SimState::from_vector(&(&x + dx * h), n);
        let k1 = e1.derivative;
        let k2 = closed_loop_derivative(model, &at(&k1, 0.5 * dt), control, cfg)?.derivative;
        let k3 = closed_loop_derivative(model, &at(&k2, 0.5 * dt), control, cfg)?.derivative;
        let k4 = closed_loop_derivative(model, &at(&k3, dt), control, cfg)?.derivative;
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        state = SimState::from_vector(&next, n);
        state.normalize();
    }
    Ok(Trajectory {
        n,
        n_contacts: model.n_contacts(),
        samples,
        final_state: state,
    })
}

/// Runs independent simulations concurrently.
pub fn integrate_batch(
    model: &RobotModel,
    runs: &[(SimState, &ClosedLoop)],
    cfg: &SimConfig,
) -> Vec<Result<Trajectory>> {
    runs.par_iter()
        .map(|(init, cl)| integrate(model, init, Control::Balancer(cl), cfg))
        .collect()
}

/// Exact samples of `ẋ = A x` on a uniform grid.
pub fn linear_response(a: &DMatrix<f64>, x0: &DVector<f64>, dt: f64, duration: f64) -> Vec<(f64, DVector<f64>)> {
    let phi = expm(&(a * dt));
    let steps = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push((0.0, x.clone()));
    for k in 1..=steps {
        x = &phi * &x;
        out.push((k as f64 * dt, x.clone()));
    }
    out
}

/// Last time the signal `e(t)` is outside `[−band, band]`, or zero when it
/// never is.
pub fn settling_time(series: &[(f64, f64)], band: f64) -> f64 {
    let mut last_out = None;
    for (k, &(_, e)) in series.iter().enumerate() {
        if e.abs() > band {
            last_out = Some(k);
        }
    }
    match last_out {
        None => 0.0,
        Some(k) if k + 1 < series.len() => series[k + 1].0,
        Some(k) => series[k].0,
    }
}

#[derive(Clone, Debug)]
pub struct StepResponseMetrics {
    pub t_s_measured: f64,
    /// Settling time of the exact linear response.
    pub t_s_linear: f64,
    /// `−3/Re(λ_dom)`.
    pub t_s_predicted: f64,
    pub overshoot: f64,
    pub lambda_dom: (f64, f64),
    /// Sup-norm gap between the nonlinear and linear responses of the
    /// stepped joint, relative to the amplitude.
    pub linear_gap: f64,
}

#[derive(Clone, Debug)]
pub struct StepResponse {
    pub metrics: StepResponseMetrics,
    pub trajectory: Trajectory,
    pub linear: Vec<(f64, DVector<f64>)>,
    /// Postural reference after the step.
    pub target: DVector<f64>,
}

/// Steps entry `joint` of the postural reference by `amplitude` and
/// simulates from the equilibrium at rest.
///
/// The closed loop is set up around the new reference; the integral state
/// starts at the value its embedding takes at the old posture, which makes
/// the response that of the linearization with `x(0) = (−amplitude e_i, 0)`.
pub fn step_response(
    model: &RobotModel,
    equilibrium: &RobotState,
    gains: &ControlGains,
    joint: usize,
    amplitude: f64,
    cfg: &SimConfig,
) -> Result<StepResponse> {
    let n = model.n_joints();
    if joint >= n {
        return Err(Error::Invalid(format!("joint {joint} out of range (n = {n})")));
    }
    let start = ClosedLoop::new(model, equilibrium, gains)?;
    let mut target = start.reference.q.clone();
    target[joint] += amplitude;
    let new_ref = start.embed(&target, &DVector::zeros(n))?;
    let cl = ClosedLoop::new(model, &new_ref, gains)?.with_mode(start.mode.clone());
    let lin = analytic_a(&c_matrices(model, &new_ref)?, gains);
    let eig = eigenvalues(&lin.a);
    let lambda_dom = eig[0];
    if lambda_dom.0 >= 0.0 {
        return Err(Error::Unstable { abscissa: lambda_dom.0 });
    }
    let t_s_predicted = -3.0 / lambda_dom.0;

    let init_state = start.reference.clone();
    let integral = cl.integral_state(&init_state)?;
    let init = SimState::from_robot(&init_state, integral);
    let traj = integrate(model, &init, Control::Balancer(&cl), cfg)?;

    let mut x0 = DVector::zeros(2 * n);
    x0.rows_mut(0, n).copy_from(&(&init_state.q - &target));
    let linear = linear_response(&lin.a, &x0, cfg.dt * cfg.record_stride as f64, cfg.duration);

    let band = SETTLING_BAND * amplitude.abs();
    let err: Vec<(f64, f64)> = traj.samples.iter().map(|s| (s.t, s.q[joint] - target[joint])).collect();
    let lin_err: Vec<(f64, f64)> = linear.iter().map(|(t, x)| (*t, x[joint])).collect();
    let (t_s_measured, t_s_linear, overshoot, linear_gap) = if amplitude == 0.0 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let sign = amplitude.signum();
        let overshoot = err.iter().map(|(_, e)| sign * e / amplitude.abs()).fold(0.0, f64::max);
        let gap = err
            .iter()
            .zip(&lin_err)
            .map(|((_, a), (_, b))| (a - b).abs())
            .fold(0.0, f64::max)
            / amplitude.abs();
        (settling_time(&err, band), settling_time(&lin_err, band), overshoot, gap)
    };
    Ok(StepResponse {
        metrics: StepResponseMetrics {
            t_s_measured,
            t_s_linear,
            t_s_predicted,
            overshoot,
            lambda_dom,
            linear_gap,
        },
        trajectory: traj,
        linear,
        target,
    })
}

impl StepResponseMetrics {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "t_s_measured": self.t_s_measured,
            "t_s_linear": self.t_s_linear,
            "t_s_predicted": self.t_s_predicted,
            "overshoot": self.overshoot,
            "lambda_dom": [self.lambda_dom.0, self.lambda_dom.1],
            "linear_gap": self.linear_gap,
        })
    }
}

/// Linear response as CSV `t,x0..x{2n}`.
pub fn linear_csv(linear: &[(f64, DVector<f64>)]) -> String {
    let dim = linear.first().map_or(0, |(_, x)| x.len());
    let mut out = String::from("t");
    for i in 0..dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (t, x) in linear {
        out.push_str(&fmt_f64(*t));
        for v in x.iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}
