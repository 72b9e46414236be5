//! Momentum-based balancing controller: momentum reference, contact wrench
//! distribution, torque law with a postural task in the null space, and the
//! redundancy optimization over the wrench null space.

mod friction;
pub mod qp;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use friction::FrictionParams;

use crate::dynamics::{centroidal_transform, constrained_forward_dynamics, CentroidalTerms};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, null_projector, pinv_with, projector_basis, PinvOptions};
use crate::multibody::{RobotModel, RobotState};

/// Largest acceptable condition number of `J_b` and `Λ`.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumGains {
    pub kp: Matrix6<f64>,
    pub ki: Matrix6<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosturalGains {
    pub kpj: DMatrix<f64>,
    pub kdj: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlGains {
    pub momentum: MomentumGains,
    pub postural: PosturalGains,
}

fn check_spd(name: &str, a: &DMatrix<f64>) -> Result<()> {
    let scale = a.norm().max(1.0);
    if (a - a.transpose()).amax() > 1e-10 * scale {
        return Err(Error::Invalid(format!("{name} is not symmetric")));
    }
    if crate::linalg::min_sym_eigenvalue(a) <= 0.0 {
        return Err(Error::Invalid(format!("{name} is not positive definite")));
    }
    Ok(())
}

fn to_dyn6(m: &Matrix6<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |r, c| m[(r, c)])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsFile {
    #[serde(rename = "Kp")]
    kp: Vec<Vec<f64>>,
    #[serde(rename = "Ki")]
    ki: Vec<Vec<f64>>,
    #[serde(rename = "Kpj")]
    kpj: Vec<Vec<f64>>,
    #[serde(rename = "Kdj")]
    kdj: Vec<Vec<f64>>,
}

pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Invalid(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl ControlGains {
    /// `K_p = 2ω I`, `K_i = ω² I`, `K_p^j = ω² I`, `K_d^j = 2ω I`.
    pub fn nominal(n: usize, omega: f64) -> Self {
        Self {
            momentum: MomentumGains {
                kp: Matrix6::identity() * (2.0 * omega),
                ki: Matrix6::identity() * (omega * omega),
            },
            postural: PosturalGains {
                kpj: DMatrix::identity(n, n) * (omega * omega),
                kdj: DMatrix::identity(n, n) * (2.0 * omega),
            },
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            momentum: MomentumGains {
                kp: Matrix6::zeros(),
                ki: Matrix6::zeros(),
            },
            postural: PosturalGains {
                kpj: DMatrix::zeros(n, n),
                kdj: DMatrix::zeros(n, n),
            },
        }
    }

    pub fn n(&self) -> usize {
        self.postural.kpj.nrows()
    }

    /// Checks that all four matrices are symmetric positive definite.
    pub fn validate(&self) -> Result<()> {
        check_spd("Kp", &to_dyn6(&self.momentum.kp))?;
        check_spd("Ki", &to_dyn6(&self.momentum.ki))?;
        check_spd("Kpj", &self.postural.kpj)?;
        check_spd("Kdj", &self.postural.kdj)
    }

    /// Parses `{"Kp": [[..]], "Ki": [[..]], "Kpj": [[..]], "Kdj": [[..]]}` (row-major).
    pub fn from_json(text: &str) -> Result<Self> {
        let f: GainsFile = serde_json::from_str(text)?;
        let kp = matrix_from_rows("Kp", &f.kp)?;
        let ki = matrix_from_rows("Ki", &f.ki)?;
        let kpj = matrix_from_rows("Kpj", &f.kpj)?;
        let kdj = matrix_from_rows("Kdj", &f.kdj)?;
        for (name, m) in [("Kp", &kp), ("Ki", &ki)] {
            if m.shape() != (6, 6) {
                return Err(Error::Invalid(format!("{name} must be 6x6")));
            }
        }
        let n = kpj.nrows();
        if kpj.shape() != (n, n) || kdj.shape() != (n, n) {
            return Err(Error::Invalid("Kpj and Kdj must be square of equal size".into()));
        }
        Ok(Self {
            momentum: MomentumGains {
                kp: Matrix6::from_fn(|r, c| kp[(r, c)]),
                ki: Matrix6::from_fn(|r, c| ki[(r, c)]),
            },
            postural: PosturalGains { kpj, kdj },
        })
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "Kp": matrix_to_rows(&to_dyn6(&self.momentum.kp)),
            "Ki": matrix_to_rows(&to_dyn6(&self.momentum.ki)),
            "Kpj": matrix_to_rows(&self.postural.kpj),
            "Kdj": matrix_to_rows(&self.postural.kdj),
        })
    }
}

/// Momentum task: desired momentum and its rate, the integral of the
/// momentum error, the joint reference, and the angular momentum Jacobian
/// frozen at the reference posture.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumTask {
    pub h_d: Vector6<f64>,
    pub h_d_dot: Vector6<f64>,
    pub integral: Vector6<f64>,
    pub q_d: DVector<f64>,
    /// `J_G^ω` evaluated at the reference (3 × n).
    pub jg_omega_ref: DMatrix<f64>,
}

impl MomentumTask {
    /// Task holding the robot at `reference` (its joint angles become `q_d`),
    /// with zero momentum, zero integral state and `J_G^ω` taken there.
    pub fn at_reference(model: &RobotModel, reference: &RobotState) -> Result<Self> {
        let c = centroidal_transform(model, &reference.with_nu(&DVector::zeros(model.dof())))?;
        let jg = centroidal_momentum_jacobian(&c, PinvOptions::default())?;
        Ok(Self {
            h_d: Vector6::zeros(),
            h_d_dot: Vector6::zeros(),
            integral: Vector6::zeros(),
            q_d: reference.q.clone(),
            jg_omega_ref: jg.rows(3, 3).into_owned(),
        })
    }

    pub fn with_integral(mut self, integral: Vector6<f64>) -> Self {
        self.integral = integral;
        self
    }
}

fn check_condition(what: &'static str, a: &DMatrix<f64>) -> Result<()> {
    let cond = condition_number(a);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { what, cond });
    }
    Ok(())
}

/// `J̄_G = −M_b J_b† J_j`, the joint-to-momentum map on the constraint manifold.
pub fn centroidal_momentum_jacobian(c: &CentroidalTerms, opts: PinvOptions) -> Result<DMatrix<f64>> {
    let jb = c.j_b();
    if jb.nrows() < 6 {
        return Err(Error::RankDeficient {
            what: "J_b",
            rank: jb.nrows(),
            needed: 6,
        });
    }
    check_condition("J_b", &jb)?;
    let m_b = to_dyn6(&c.m_b);
    Ok(-(m_b * pinv_with(&jb, opts) * c.j_j()))
}

/// `Ḣ* = Ḣ_d − K_p (H − H_d) − K_i I_H̃`.
pub fn momentum_reference(h: &Vector6<f64>, task: &MomentumTask, gains: &MomentumGains) -> Vector6<f64> {
    task.h_d_dot - gains.kp * (h - task.h_d) - gains.ki * task.integral
}

/// `İ_H̃ = [J_G^L(q_j); J_G^ω(q_j^d)] q̇_j`.
pub fn integral_update(c: &CentroidalTerms, task: &MomentumTask) -> Result<Vector6<f64>> {
    let jg = centroidal_momentum_jacobian(c, PinvOptions::default())?;
    let qd = c.qdot();
    let lin = jg.rows(0, 3) * &qd;
    let ang = &task.jg_omega_ref * &qd;
    Ok(Vector6::new(lin[0], lin[1], lin[2], ang[0], ang[1], ang[2]))
}

/// Contact wrenches realizing a momentum rate, with their redundancy.
#[derive(Clone, Debug)]
pub struct WrenchSolution {
    pub f: DVector<f64>,
    pub f1: DVector<f64>,
    pub f0: DVector<f64>,
    /// Projector onto the null space of `J_bᵀ`.
    pub n_b: DMatrix<f64>,
}

/// `f = J_bᵀ†(Ḣ* + m g e₃) + N_b f0`.
pub fn wrench_distribution(
    c: &CentroidalTerms,
    hdot_star: &Vector6<f64>,
    f0: &DVector<f64>,
    opts: PinvOptions,
) -> Result<WrenchSolution> {
    let jbt = c.j_b().transpose();
    if f0.len() != jbt.ncols() {
        return Err(Error::DimensionMismatch {
            what: "wrench redundancy f0",
            expected: jbt.ncols(),
            got: f0.len(),
        });
    }
    let rank = crate::linalg::rank(&jbt, crate::linalg::RANK_RCOND);
    if rank < 6 {
        return Err(Error::RankDeficient {
            what: "J_b",
            rank,
            needed: 6,
        });
    }
    let target = DVector::from_column_slice((hdot_star + c.weight()).as_slice());
    let m = jbt.ncols();
    let (f1, n_b) = if m == 6 {
        // One contact: J_bᵀ is square and invertible, no redundancy.
        let f1 = jbt.clone().lu().solve(&target).ok_or(Error::RankDeficient {
            what: "J_b",
            rank,
            needed: 6,
        })?;
        (f1, DMatrix::zeros(6, 6))
    } else {
        let pinv = pinv_with(&jbt, opts);
        (&pinv * &target, DMatrix::identity(m, m) - &pinv * &jbt)
    };
    let f = &f1 + &n_b * f0;
    Ok(WrenchSolution {
        f,
        f1,
        f0: f0.clone(),
        n_b,
    })
}

/// Intermediate quantities of the torque law, reusable across `f`.
#[derive(Clone, Debug)]
pub struct TorqueMaps {
    /// `Λ = J_j M_j⁻¹`.
    pub lambda: DMatrix<f64>,
    pub lambda_pinv: DMatrix<f64>,
    /// `N_Λ = I − Λ†Λ`.
    pub n_lambda: DMatrix<f64>,
    pub m_j_inv: DMatrix<f64>,
    /// Postural feedback `u₀`.
    pub u0: DVector<f64>,
}

pub fn torque_maps(
    c: &CentroidalTerms,
    task: &MomentumTask,
    pgains: &PosturalGains,
    opts: PinvOptions,
) -> Result<TorqueMaps> {
    let n = c.n();
    let m_j_inv = c
        .m_j
        .clone()
        .cholesky()
        .ok_or(Error::Invalid("joint mass block is not positive definite".into()))?
        .inverse();
    let lambda = c.j_j() * &m_j_inv;
    check_condition("Λ", &lambda)?;
    let lambda_pinv = pinv_with(&lambda, opts);
    let n_lambda = DMatrix::identity(n, n) - &lambda_pinv * &lambda;
    let nm = &n_lambda * &c.m_j;
    let u0 = -(&pgains.kpj * &nm * (&c.q - &task.q_d)) - &pgains.kdj * &nm * c.qdot();
    Ok(TorqueMaps {
        lambda,
        lambda_pinv,
        n_lambda,
        m_j_inv,
        u0,
    })
}

impl TorqueMaps {
    /// `τ = Λ†(J M⁻¹(h − Jᵀf) − J̇ν) + N_Λ(h_j − J_jᵀf + u₀)`.
    pub fn torque(&self, c: &CentroidalTerms, f: &DVector<f64>) -> DVector<f64> {
        let jb = c.j_b();
        let jj = c.j_j();
        let mbi = to_dyn6(&c.m_b_inv());
        let resid_b = c.h_b() - jb.transpose() * f;
        let resid_j = c.h_j() - jj.transpose() * f;
        let task_acc = &jb * (mbi * resid_b) + &self.lambda * &resid_j - &c.jdot_nu;
        &self.lambda_pinv * task_acc + &self.n_lambda * (resid_j + &self.u0)
    }

    /// `∂τ/∂f`.
    pub fn torque_sensitivity(&self, c: &CentroidalTerms) -> DMatrix<f64> {
        let jb = c.j_b();
        let jj = c.j_j();
        let mbi = to_dyn6(&c.m_b_inv());
        let coupling = &jb * mbi * jb.transpose() + &self.lambda * jj.transpose();
        -(&self.lambda_pinv * coupling) - &self.n_lambda * jj.transpose()
    }

    /// Right-hand side of `M_j q̈_j = Λ†(J_b M_b⁻¹(h_b − J_bᵀf) − J̇ν) + N_Λ u₀`,
    /// the joint dynamics once `τ` is applied and the contacts deliver `f`.
    pub fn joint_space_force(&self, c: &CentroidalTerms, f: &DVector<f64>) -> DVector<f64> {
        let jb = c.j_b();
        let mbi = to_dyn6(&c.m_b_inv());
        let resid_b = c.h_b() - jb.transpose() * f;
        &self.lambda_pinv * (&jb * (mbi * resid_b) - &c.jdot_nu) + &self.n_lambda * &self.u0
    }
}

/// Torques realizing contact wrenches `f` with the postural task in the
/// null space of `Λ = J_j M_j⁻¹`.
pub fn control_torques(
    c: &CentroidalTerms,
    f: &DVector<f64>,
    task: &MomentumTask,
    pgains: &PosturalGains,
    opts: PinvOptions,
) -> Result<DVector<f64>> {
    Ok(torque_maps(c, task, pgains, opts)?.torque(c, f))
}

#[derive(Clone, Debug)]
pub struct RedundancySolution {
    pub wrench: WrenchSolution,
    pub tau: DVector<f64>,
    /// Torques with `f0 = 0`.
    pub tau_zero: DVector<f64>,
    /// Active constraint rows at the optimum.
    pub active: Vec<usize>,
    /// Constraint matrix and bound on `f0` (`C f0 ≤ b`), empty for one contact.
    pub c: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Torque sensitivity restricted to the null space, `∂τ/∂f · N_b`.
    pub t: DMatrix<f64>,
}

/// Minimizes `|τ(f0)|²` subject to the linearized contact constraints on
/// `f = f1 + N_b f0`.
pub fn redundancy_solve(
    c: &CentroidalTerms,
    hdot_star: &Vector6<f64>,
    task: &MomentumTask,
    pgains: &PosturalGains,
    fc: &FrictionParams,
    opts: PinvOptions,
) -> Result<RedundancySolution> {
    let m = 6 * c.n_contacts();
    let ws0 = wrench_distribution(c, hdot_star, &DVector::zeros(m), opts)?;
    let maps = torque_maps(c, task, pgains, opts)?;
    let tau_zero = maps.torque(c, &ws0.f1);
    let t = maps.torque_sensitivity(c) * &ws0.n_b;
    let z = projector_basis(&ws0.n_b);
    if z.ncols() == 0 {
        return Ok(RedundancySolution {
            wrench: ws0,
            tau: tau_zero.clone(),
            tau_zero,
            active: Vec::new(),
            c: DMatrix::zeros(0, m),
            b: DVector::zeros(0),
            t,
        });
    }
    let rotations: Vec<_> = c.contact_poses.iter().map(|p| p.rotation).collect();
    let (c_raw, b_raw) = fc.constraints(&rotations)?;
    let tz = &t * &z;
    let hess = tz.transpose() * &tz * 2.0;
    let grad = tz.transpose() * &tau_zero * 2.0;
    let a = &c_raw * &z;
    let b = &b_raw - &c_raw * &ws0.f1;
    let sol = qp::solve(&hess, &grad, &a, &b)?;
    let f0 = &z * &sol.x;
    let ws = wrench_distribution(c, hdot_star, &f0, opts)?;
    let tau = maps.torque(c, &ws.f);
    Ok(RedundancySolution {
        wrench: ws,
        tau,
        tau_zero,
        active: sol.active,
        c: &c_raw * &ws0.n_b,
        b,
        t,
    })
}

/// How the controller chooses the wrench redundancy `f0`.
#[derive(Clone, Debug, PartialEq)]
pub enum RedundancyMode {
    Zero,
    Fixed(DVector<f64>),
    Optimize(FrictionParams),
}

#[derive(Clone, Debug)]
pub struct ControllerOutput {
    pub tau: DVector<f64>,
    pub hdot_star: Vector6<f64>,
    pub wrench: WrenchSolution,
    pub integral_rate: Vector6<f64>,
    pub active: Vec<usize>,
}

/// Full controller evaluation at one state.
pub fn evaluate(
    c: &CentroidalTerms,
    task: &MomentumTask,
    gains: &ControlGains,
    mode: &RedundancyMode,
    opts: PinvOptions,
) -> Result<ControllerOutput> {
    let hdot_star = momentum_reference(&c.momentum, task, &gains.momentum);
    let integral_rate = integral_update(c, task)?;
    let m = 6 * c.n_contacts();
    let (tau, wrench, active) = match mode {
        RedundancyMode::Optimize(fc) => {
            let r = redundancy_solve(c, &hdot_star, task, &gains.postural, fc, opts)?;
            (r.tau, r.wrench, r.active)
        }
        RedundancyMode::Zero | RedundancyMode::Fixed(_) => {
            let f0 = match mode {
                RedundancyMode::Fixed(f0) => f0.clone(),
                _ => DVector::zeros(m),
            };
            let ws = wrench_distribution(c, &hdot_star, &f0, opts)?;
            let tau = control_torques(c, &ws.f, task, &gains.postural, opts)?;
            (tau, ws, Vec::new())
        }
    };
    Ok(ControllerOutput {
        tau,
        hdot_star,
        wrench,
        integral_rate,
        active,
    })
}

/// Outcome of the wrench-redundancy invariance check.
#[derive(Clone, Debug)]
pub struct Lemma1Report {
    /// Closed-loop joint accelerations with `f0 = 0`.
    pub qdd_reference: DVector<f64>,
    /// Max deviation of `q̈_j` across samples, from the joint-space formula.
    pub deviation_formula: f64,
    /// Max deviation of `q̈_j` when the torques drive the constrained dynamics.
    pub deviation_closed_loop: f64,
}

impl Lemma1Report {
    pub fn deviation(&self) -> f64 {
        self.deviation_formula.max(self.deviation_closed_loop)
    }

    pub fn relative_deviation(&self) -> f64 {
        self.deviation() / self.qdd_reference.norm()
    }
}

/// Which projector maps `f0` into the wrenches (the identity is a
/// deliberately wrong choice, used as a negative control).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedundancyProjector {
    NullSpace,
    Identity,
}

/// Checks that the closed-loop joint accelerations do not depend on `f0`:
/// evaluates `q̈_j` for `f0 = 0` and `samples` random `f0` (entries uniform in
/// `±m g`), both through the joint-space formula and by applying the
/// torques to the constrained dynamics, and reports the largest deviation.
pub fn verify_lemma1(
    c: &CentroidalTerms,
    task: &MomentumTask,
    gains: &ControlGains,
    samples: usize,
    seed: u64,
    projector: RedundancyProjector,
) -> Result<Lemma1Report> {
    let opts = PinvOptions::default();
    let n = c.n();
    let m = 6 * c.n_contacts();
    let hdot_star = momentum_reference(&c.momentum, task, &gains.momentum);
    let maps = torque_maps(c, task, &gains.postural, opts)?;
    let ws0 = wrench_distribution(c, &hdot_star, &DVector::zeros(m), opts)?;
    let m_j_chol = c
        .m_j
        .clone()
        .cholesky()
        .ok_or(Error::Invalid("joint mass block is not positive definite".into()))?;

    let accelerations = |f: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let formula = m_j_chol.solve(&maps.joint_space_force(c, f));
        let tau = maps.torque(c, f);
        let sol = constrained_forward_dynamics(&c.m, &c.h, &c.j, &c.jdot_nu, &tau, None)?;
        Ok((formula, sol.nu_dot.rows(6, n).into_owned()))
    };
    let (ref_formula, ref_loop) = accelerations(&ws0.f1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = c.total_mass * c.gravity.max(1.0);
    let mut dev_formula: f64 = 0.0;
    let mut dev_loop: f64 = 0.0;
    for _ in 0..samples {
        let f0 = DVector::from_fn(m, |_, _| rng.random_range(-scale..scale));
        let f = match projector {
            RedundancyProjector::NullSpace => &ws0.f1 + &ws0.n_b * &f0,
            RedundancyProjector::Identity => &ws0.f1 + &f0,
        };
        let (a, b) = accelerations(&f)?;
        dev_formula = dev_formula.max((a - &ref_formula).norm());
        dev_loop = dev_loop.max((b - &ref_loop).norm());
    }
    Ok(Lemma1Report {
        qdd_reference: ref_loop,
        deviation_formula: dev_formula,
        deviation_closed_loop: dev_loop,
    })
}

/// Projector identities of the controller at one state, as residual norms:
/// `(‖N_b² − N_b‖, ‖J_bᵀN_b‖, ‖N_Λ² − N_Λ‖, ‖Λ N_Λ‖)`.
pub fn projector_residuals(
    c: &CentroidalTerms,
    task: &MomentumTask,
    pgains: &PosturalGains,
) -> Result<[f64; 4]> {
    let opts = PinvOptions::default();
    let ws = wrench_distribution(c, &Vector6::zeros(), &DVector::zeros(6 * c.n_contacts()), opts)?;
    let maps = torque_maps(c, task, pgains, opts)?;
    let nb = &ws.n_b;
    let nl = &maps.n_lambda;
    Ok([
        (nb * nb - nb).norm(),
        (c.j_b().transpose() * nb).norm(),
        (nl * nl - nl).norm(),
        (&maps.lambda * nl).norm(),
    ])
}

/// Null-space projector of `J_bᵀ` (convenience for diagnostics).
pub fn wrench_null_projector(c: &CentroidalTerms) -> DMatrix<f64> {
    null_projector(&c.j_b().transpose(), PinvOptions::default())
}
