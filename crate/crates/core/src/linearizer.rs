//! Linearized closed-loop joint dynamics `ẍ = A x` around an equilibrium,
//! analytically through the C-matrices and numerically by finite
//! differences of the full nonlinear closed loop.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rayon::prelude::*;

use crate::balancer::{evaluate, ControlGains, MomentumTask, RedundancyMode};
use crate::dynamics::{center_of_mass, centroidal_transform, constrained_forward_dynamics};
use crate::error::{Error, Result};
use crate::linalg::{pinv, pinv_with, PinvOptions};
use crate::multibody::{FrameId, Kinematics, Pose, RobotModel, RobotState};

/// `C1 = M_j⁻¹Λ†J_b M_b⁻¹`, `C2 = M_b J_b†J_j`, `C3 = M_j⁻¹N_Λ`, `C4 = N_Λ M_j`.
#[derive(Clone, Debug)]
pub struct CMatrices {
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub c3: DMatrix<f64>,
    pub c4: DMatrix<f64>,
    /// `N_Λ` and `Λ` at the reference, kept for diagnostics.
    pub n_lambda: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub m_j: DMatrix<f64>,
}

impl CMatrices {
    pub fn n(&self) -> usize {
        self.c3.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct LinearizedJointDynamics {
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

/// `A = [[0, I], [−Q1, −Q2]]`.
pub fn assemble_a(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q1.nrows();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (n, n)).copy_from(&(-q1));
    a.view_mut((n, n), (n, n)).copy_from(&(-q2));
    a
}

/// C-matrices at the reference posture (velocities ignored).
pub fn c_matrices(model: &RobotModel, reference: &RobotState) -> Result<CMatrices> {
    let n = model.n_joints();
    let rest = reference.with_nu(&DVector::zeros(model.dof()));
    let c = centroidal_transform(model, &rest)?;
    let jb = c.j_b();
    let rank = crate::linalg::rank(&jb, crate::linalg::RANK_RCOND);
    if rank < 6 {
        return Err(Error::RankDeficient {
            what: "J_b",
            rank,
            needed: 6,
        });
    }
    let m_b = DMatrix::from_fn(6, 6, |r, k| c.m_b[(r, k)]);
    let m_b_inv = DMatrix::from_fn(6, 6, |r, k| c.m_b_inv()[(r, k)]);
    let m_j_inv = c
        .m_j
        .clone()
        .cholesky()
        .ok_or(Error::Invalid("joint mass block is not positive definite".into()))?
        .inverse();
    let lambda = c.j_j() * &m_j_inv;
    let lambda_pinv = pinv_with(&lambda, PinvOptions::default());
    let n_lambda = DMatrix::identity(n, n) - &lambda_pinv * &lambda;
    Ok(CMatrices {
        c1: &m_j_inv * &lambda_pinv * &jb * m_b_inv,
        c2: m_b * pinv(&jb) * c.j_j(),
        c3: &m_j_inv * &n_lambda,
        c4: &n_lambda * &c.m_j,
        n_lambda,
        lambda,
        m_j: c.m_j.clone(),
    })
}

/// `Q1 = C1 K_i C2 + C3 K_p^j C4`, `Q2 = C1 K_p C2 + C3 K_d^j C4`.
pub fn analytic_a(cm: &CMatrices, gains: &ControlGains) -> LinearizedJointDynamics {
    let ki = DMatrix::from_fn(6, 6, |r, k| gains.momentum.ki[(r, k)]);
    let kp = DMatrix::from_fn(6, 6, |r, k| gains.momentum.kp[(r, k)]);
    let q1 = &cm.c1 * ki * &cm.c2 + &cm.c3 * &gains.postural.kpj * &cm.c4;
    let q2 = &cm.c1 * kp * &cm.c2 + &cm.c3 * &gains.postural.kdj * &cm.c4;
    let a = assemble_a(&q1, &q2);
    LinearizedJointDynamics { q1, q2, a }
}

/// Tolerances of the base-state reconstruction.
pub const EMBED_TOL: f64 = 1e-12;
pub const EMBED_MAX_ITERS: usize = 50;
pub const EMBED_FAIL: f64 = 1e-9;
/// Closed-loop joint acceleration allowed at the linearization point.
pub const EQUILIBRIUM_TOL: f64 = 1e-6;

/// The nonlinear closed loop `q̈_j = f(q_j, q̇_j)` with contacts held at
/// their reference poses.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub model: RobotModel,
    pub reference: RobotState,
    pub task: MomentumTask,
    pub gains: ControlGains,
    pub mode: RedundancyMode,
    contact_refs: Vec<Pose>,
    com_ref: Vector3<f64>,
}

impl ClosedLoop {
    /// Closed loop around `reference` (taken at rest); its joint angles are
    /// the postural reference.
    pub fn new(model: &RobotModel, reference: &RobotState, gains: &ControlGains) -> Result<Self> {
        let reference = reference.with_nu(&DVector::zeros(model.dof()));
        let task = MomentumTask::at_reference(model, &reference)?;
        let kin = Kinematics::new(model, &reference)?;
        let contact_refs = (0..model.n_contacts())
            .map(|k| kin.frame_pose(model, FrameId::Contact(k)))
            .collect();
        let com_ref = center_of_mass(model, &reference)?;
        Ok(Self {
            model: model.clone(),
            reference,
            task,
            gains: gains.clone(),
            mode: RedundancyMode::Zero,
            contact_refs,
            com_ref,
        })
    }

    pub fn with_gains(&self, gains: &ControlGains) -> Self {
        let mut s = self.clone();
        s.gains = gains.clone();
        s
    }

    pub fn with_mode(mut self, mode: RedundancyMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn com_reference(&self) -> Vector3<f64> {
        self.com_ref
    }

    pub fn contact_references(&self) -> &[Pose] {
        &self.contact_refs
    }

    /// Stacked contact pose errors relative to the references.
    pub fn contact_error(&self, state: &RobotState) -> Result<DVector<f64>> {
        let kin = Kinematics::new(&self.model, state)?;
        Ok(contact_error_with(&self.model, &kin, &self.contact_refs))
    }

    /// Reconstructs the base pose so that the contacts sit at their
    /// reference poses (Gauss-Newton), then the base velocity from
    /// `v_B = −J_b†J_j q̇_j`.
    pub fn embed(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<RobotState> {
        let n = self.model.n_joints();
        let mut state = RobotState::at_rest(self.reference.base_pose, q.clone());
        let mut residual = f64::INFINITY;
        for _ in 0..EMBED_MAX_ITERS {
            let kin = Kinematics::new(&self.model, &state)?;
            let err = contact_error_with(&self.model, &kin, &self.contact_refs);
            residual = err.amax();
            if residual < EMBED_TOL {
                break;
            }
            let jb = kin.contact_jacobian(&self.model).columns(0, 6).into_owned();
            let step = -(pinv(&jb) * err);
            let mut dir = DVector::zeros(n + 6);
            dir.rows_mut(0, 6).copy_from(&step);
            state = state.displaced(&dir, 1.0);
        }
        if residual > EMBED_FAIL {
            return Err(Error::Embedding { residual });
        }
        let kin = Kinematics::new(&self.model, &state)?;
        let j = kin.contact_jacobian(&self.model);
        let jb = j.columns(0, 6).into_owned();
        let vb = -(pinv(&jb) * (j.columns(6, n) * qdot));
        state.base_velocity = Vector6::from_column_slice(vb.as_slice());
        state.qdot = qdot.clone();
        Ok(state)
    }

    /// Integral state consistent with the joint configuration: the
    /// integral of `İ_H̃` from the reference along the constraint manifold.
    pub fn integral_state(&self, state: &RobotState) -> Result<Vector6<f64>> {
        let com = center_of_mass(&self.model, state)?;
        let lin = (com - self.com_ref) * self.model.total_mass();
        let ang = &self.task.jg_omega_ref * (&state.q - &self.task.q_d);
        Ok(Vector6::new(lin.x, lin.y, lin.z, ang[0], ang[1], ang[2]))
    }

    /// Closed-loop joint accelerations at an embedded state.
    pub fn joint_acceleration(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DVector<f64>> {
        let state = self.embed(q, qdot)?;
        let integral = self.integral_state(&state)?;
        let task = self.task.clone().with_integral(integral);
        let c = centroidal_transform(&self.model, &state)?;
        let out = evaluate(&c, &task, &self.gains, &self.mode, PinvOptions::default())?;
        let sol = constrained_forward_dynamics(&c.m, &c.h, &c.j, &c.jdot_nu, &out.tau, None)?;
        Ok(sol.nu_dot.rows(6, self.model.n_joints()).into_owned())
    }

    /// Checks that the reference is an equilibrium of the closed loop.
    pub fn check_equilibrium(&self) -> Result<f64> {
        let n = self.model.n_joints();
        let qdd = self.joint_acceleration(&self.reference.q, &DVector::zeros(n))?;
        let r = qdd.norm();
        if r > EQUILIBRIUM_TOL {
            return Err(Error::NotEquilibrium { residual: r });
        }
        Ok(r)
    }

    /// Default finite-difference step `1e-5 (1 + |q_d|∞)`.
    pub fn default_step(&self) -> f64 {
        1e-5 * (1.0 + self.reference.q.amax())
    }

    /// Central-difference Jacobian of `(q_j, q̇_j) ↦ (q̇_j, q̈_j)` at the reference.
    pub fn numeric_a(&self, eps: f64) -> Result<DMatrix<f64>> {
        self.check_equilibrium()?;
        let n = self.model.n_joints();
        let q0 = self.reference.q.clone();
        let columns: Vec<Result<DVector<f64>>> = (0..2 * n)
            .into_par_iter()
            .map(|k| {
                let mut qp = q0.clone();
                let mut qm = q0.clone();
                let mut vp = DVector::zeros(n);
                let mut vm = DVector::zeros(n);
                if k < n {
                    qp[k] += eps;
                    qm[k] -= eps;
                } else {
                    vp[k - n] += eps;
                    vm[k - n] -= eps;
                }
                let ap = self.joint_acceleration(&qp, &vp)?;
                let am = self.joint_acceleration(&qm, &vm)?;
                Ok((ap - am) / (2.0 * eps))
            })
            .collect();
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, n), (n, n)).fill_with_identity();
        for (k, col) in columns.into_iter().enumerate() {
            a.view_mut((n, k), (n, 1)).copy_from(&col?);
        }
        Ok(a)
    }
}

pub(crate) fn contact_error_with(model: &RobotModel, kin: &Kinematics, refs: &[Pose]) -> DVector<f64> {
    let nc = model.n_contacts();
    let mut e = DVector::zeros(6 * nc);
    for k in 0..nc {
        let p = kin.frame_pose(model, FrameId::Contact(k));
        e.fixed_rows_mut::<6>(6 * k).copy_from(&p.error_to(&refs[k]));
    }
    e
}

/// Numeric state matrix of the closed loop at `reference` with `gains`.
pub fn numeric_a(
    model: &RobotModel,
    reference: &RobotState,
    gains: &ControlGains,
    eps: Option<f64>,
) -> Result<DMatrix<f64>> {
    let cl = ClosedLoop::new(model, reference, gains)?;
    let eps = eps.unwrap_or_else(|| cl.default_step());
    cl.numeric_a(eps)
}

/// Which gain matrix a scalar perturbation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainEntry {
    Ki(usize, usize),
    Kp(usize, usize),
    Kpj(usize, usize),
    Kdj(usize, usize),
}

impl GainEntry {
    pub fn perturbed(&self, gains: &ControlGains, delta: f64) -> ControlGains {
        let mut g = gains.clone();
        match *self {
            GainEntry::Ki(r, c) => g.momentum.ki[(r, c)] += delta,
            GainEntry::Kp(r, c) => g.momentum.kp[(r, c)] += delta,
            GainEntry::Kpj(r, c) => g.postural.kpj[(r, c)] += delta,
            GainEntry::Kdj(r, c) => g.postural.kdj[(r, c)] += delta,
        }
        g
    }

    /// Analytic change of `A` per unit change of the entry: `−C1 E C2` or
    /// `−C3 E C4` in the position or velocity block.
    pub fn analytic_sensitivity(&self, cm: &CMatrices) -> DMatrix<f64> {
        let n = cm.n();
        let unit = |rows: usize, r: usize, c: usize| {
            let mut e = DMatrix::zeros(rows, rows);
            e[(r, c)] = 1.0;
            e
        };
        let (block, col0) = match *self {
            GainEntry::Ki(r, c) => (&cm.c1 * unit(6, r, c) * &cm.c2, 0),
            GainEntry::Kp(r, c) => (&cm.c1 * unit(6, r, c) * &cm.c2, n),
            GainEntry::Kpj(r, c) => (&cm.c3 * unit(n, r, c) * &cm.c4, 0),
            GainEntry::Kdj(r, c) => (&cm.c3 * unit(n, r, c) * &cm.c4, n),
        };
        let mut d = DMatrix::zeros(2 * n, 2 * n);
        d.view_mut((n, col0), (n, n)).copy_from(&(-block));
        d
    }
}

/// Numeric change of `A` per unit change of one gain entry, from two
/// numeric linearizations.
pub fn numeric_sensitivity(cl: &ClosedLoop, entry: GainEntry, delta: f64, eps: f64) -> Result<DMatrix<f64>> {
    let ap = cl.with_gains(&entry.perturbed(&cl.gains, delta)).numeric_a(eps)?;
    let am = cl.with_gains(&entry.perturbed(&cl.gains, -delta)).numeric_a(eps)?;
    Ok((ap - am) / (2.0 * delta))
}
