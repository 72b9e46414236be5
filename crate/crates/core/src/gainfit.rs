//! Least-squares fit of the control gains to desired closed-loop joint
//! dynamics, and the correction of the desired matrices for several
//! contacts.
//!
//! With column-major `vec`, `vec(C1 K C2) = (C2ᵀ ⊗ C1) vec(K)`, so
//!
//! ```text
//! Γ [vec K_i; vec K_pj] = vec Q1,   Γ [vec K_p; vec K_dj] = vec Q2,
//! Γ = [C2ᵀ ⊗ C1 | C4ᵀ ⊗ C3].
//! ```

use nalgebra::{DMatrix, DVector, Matrix6};
use rayon::prelude::*;
use serde::Deserialize;

use crate::balancer::{matrix_from_rows, matrix_to_rows, ControlGains, MomentumGains, PosturalGains};
use crate::dynamics::centroidal_transform;
use crate::error::{Error, Result};
use crate::linalg::{kron, pinv_with, projector_basis, rank, singular_values, unvec_cm, vec_cm, PinvOptions, RANK_RCOND};
use crate::linearizer::{analytic_a, assemble_a, c_matrices, CMatrices};
use crate::multibody::{RobotModel, RobotState};
use crate::spdtrack::{track, TrackOptions, TrackResult, TrackStatus, TrackerGains, TrackerState};

/// Desired stiffness `Q1^d` and damping `Q2^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesiredDynamics {
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Diag {
        diag: Vec<f64>,
    },
    Dense(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesiredFile {
    #[serde(rename = "Q1")]
    q1: MatrixSpec,
    #[serde(rename = "Q2")]
    q2: MatrixSpec,
}

impl MatrixSpec {
    fn build(&self, name: &str) -> Result<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::Diag { diag } => DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
            MatrixSpec::Dense(rows) => matrix_from_rows(name, rows)?,
        };
        if !m.is_square() {
            return Err(Error::Invalid(format!("{name} must be square")));
        }
        Ok(m)
    }
}

impl DesiredDynamics {
    /// Parses `{"Q1": ..., "Q2": ...}` where each matrix is a list of rows
    /// or `{"diag": [...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: DesiredFile = serde_json::from_str(text)?;
        let q1 = f.q1.build("Q1")?;
        let q2 = f.q2.build("Q2")?;
        if q1.shape() != q2.shape() {
            return Err(Error::DimensionMismatch {
                what: "Q2",
                expected: q1.nrows(),
                got: q2.nrows(),
            });
        }
        if q1.iter().chain(q2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("desired matrices must be finite".into()));
        }
        Ok(Self { q1, q2 })
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({ "Q1": matrix_to_rows(&self.q1), "Q2": matrix_to_rows(&self.q2) })
    }

    /// `Q1 = diag(ω_i²)`, `Q2 = diag(2ω_i)`.
    pub fn critically_damped(omega: &[f64]) -> Self {
        let w = DVector::from_row_slice(omega);
        Self {
            q1: DMatrix::from_diagonal(&w.map(|x| x * x)),
            q2: DMatrix::from_diagonal(&(w * 2.0)),
        }
    }

    pub fn n(&self) -> usize {
        self.q1.nrows()
    }

    pub fn a(&self) -> DMatrix<f64> {
        assemble_a(&self.q1, &self.q2)
    }
}

#[derive(Clone, Debug)]
pub struct GainFitProblem {
    pub gamma: DMatrix<f64>,
    pub y1: DVector<f64>,
    pub y2: DVector<f64>,
    pub cm: CMatrices,
}

impl GainFitProblem {
    pub fn n(&self) -> usize {
        self.cm.n()
    }
}

/// `Γ = [C2ᵀ ⊗ C1 | C4ᵀ ⊗ C3]`.
pub fn gamma(cm: &CMatrices) -> DMatrix<f64> {
    let n = cm.n();
    let mut g = DMatrix::zeros(n * n, 36 + n * n);
    g.columns_mut(0, 36).copy_from(&kron(&cm.c2.transpose(), &cm.c1));
    g.columns_mut(36, n * n).copy_from(&kron(&cm.c4.transpose(), &cm.c3));
    g
}

pub fn build_problem(cm: &CMatrices, desired: &DesiredDynamics) -> Result<GainFitProblem> {
    let n = cm.n();
    if desired.n() != n {
        return Err(Error::DimensionMismatch {
            what: "desired dynamics",
            expected: n,
            got: desired.n(),
        });
    }
    Ok(GainFitProblem {
        gamma: gamma(cm),
        y1: vec_cm(&desired.q1),
        y2: vec_cm(&desired.q2),
        cm: cm.clone(),
    })
}

/// `[vec K6; vec Kn]`.
pub fn stack_gains(k6: &DMatrix<f64>, kn: &DMatrix<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(36 + kn.len());
    v.rows_mut(0, 36).copy_from(&vec_cm(k6));
    v.rows_mut(36, kn.len()).copy_from(&vec_cm(kn));
    v
}

pub fn unstack_gains(v: &DVector<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        unvec_cm(&v.as_slice()[..36], 6, 6),
        unvec_cm(&v.as_slice()[36..], n, n),
    )
}

#[derive(Clone, Debug)]
pub struct RankReport {
    pub rank: usize,
    pub rows: usize,
    /// `36 + (n − 6 n_c)²`, only meaningful when `n > 6 n_c`.
    pub bound: Option<usize>,
    pub full_row_rank: bool,
    pub threshold: f64,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn within_bound(&self) -> bool {
        self.bound.is_none_or(|b| self.rank <= b)
    }
}

pub fn rank_diagnostics(p: &GainFitProblem, n_contacts: usize) -> RankReport {
    let n = p.n();
    let sv = singular_values(&p.gamma);
    let smax = sv.first().copied().unwrap_or(0.0);
    let r = rank(&p.gamma, RANK_RCOND);
    let bound = (n > 6 * n_contacts).then(|| 36 + (n - 6 * n_contacts).pow(2));
    RankReport {
        rank: r,
        rows: n * n,
        bound,
        full_row_rank: r == n * n,
        threshold: RANK_RCOND * smax,
        singular_values: sv,
    }
}

#[derive(Clone, Debug)]
pub struct UnconstrainedGains {
    pub ki: DMatrix<f64>,
    pub kp: DMatrix<f64>,
    pub kpj: DMatrix<f64>,
    pub kdj: DMatrix<f64>,
    /// `|Γ k − y|` for the stiffness and damping fits.
    pub r1: f64,
    pub r2: f64,
}

/// Minimal-norm least squares `Γ† y1`, `Γ† y2` with a hard singular-value
/// cutoff at `1e-10 σ_max`.
pub fn solve_unconstrained(p: &GainFitProblem) -> UnconstrainedGains {
    solve_unconstrained_with(
        p,
        PinvOptions {
            rcond: RANK_RCOND,
            damping: 0.0,
        },
    )
}

pub fn solve_unconstrained_with(p: &GainFitProblem, opts: PinvOptions) -> UnconstrainedGains {
    let n = p.n();
    let gp = pinv_with(&p.gamma, opts);
    let k1 = &gp * &p.y1;
    let k2 = &gp * &p.y2;
    let r1 = (&p.gamma * &k1 - &p.y1).norm();
    let r2 = (&p.gamma * &k2 - &p.y2).norm();
    let (ki, kpj) = unstack_gains(&k1, n);
    let (kp, kdj) = unstack_gains(&k2, n);
    UnconstrainedGains { ki, kp, kpj, kdj, r1, r2 }
}

#[derive(Clone, Debug)]
pub struct Correction {
    pub desired: DesiredDynamics,
    /// `J̄_j = (I − J_b J_b†) J_j`.
    pub jbar: DMatrix<f64>,
    /// Null-space projector of `J̄_j`.
    pub n_j: DMatrix<f64>,
    pub jbar_rank: usize,
}

/// Restricts the desired matrices to joint accelerations compatible with
/// the contacts: `Q̄^d = N_J Q^d`.
pub fn two_feet_correction(
    model: &RobotModel,
    reference: &RobotState,
    desired: &DesiredDynamics,
) -> Result<Correction> {
    let n = model.n_joints();
    if desired.n() != n {
        return Err(Error::DimensionMismatch {
            what: "desired dynamics",
            expected: n,
            got: desired.n(),
        });
    }
    if model.n_contacts() == 0 {
        return Err(Error::Invalid("correction needs at least one contact".into()));
    }
    let rest = reference.with_nu(&DVector::zeros(model.dof()));
    let c = centroidal_transform(model, &rest)?;
    let jb = c.j_b();
    let jj = c.j_j();
    let opts = PinvOptions::default();
    let rows = jb.nrows();
    let jbar = (DMatrix::identity(rows, rows) - &jb * pinv_with(&jb, opts)) * &jj;
    // Singular values are judged against the scale of J_j, so a J̄_j that is
    // zero up to rounding (one contact) has rank zero and N_J = I.
    let tol = RANK_RCOND * singular_values(&jj).first().copied().unwrap_or(0.0);
    let svd = jbar.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut n_j = DMatrix::identity(n, n);
    let mut jbar_rank = 0;
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            let v = vt.row(k).transpose();
            n_j -= &v * v.transpose();
            jbar_rank += 1;
        }
    }
    Ok(Correction {
        desired: DesiredDynamics {
            q1: &n_j * &desired.q1,
            q2: &n_j * &desired.q2,
        },
        jbar,
        n_j,
        jbar_rank,
    })
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub tracker: TrackOptions,
    /// `None` uses `K_U = K_v = I` of the matching size.
    pub tracker_gains: Option<(TrackerGains, TrackerGains)>,
    pub pinv: PinvOptions,
    /// Start each track from the warm start instead of `O = I, L = 0`.
    pub warm_start: bool,
    pub space: FitSpace,
}

/// Which columns of the desired matrices the least-squares fit matches when
/// several contacts are closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitSpace {
    /// All of `Q̄^d`.
    Full,
    /// `Q̄^d V` only, with `V` an orthonormal basis of the joint motions
    /// compatible with the contacts. Columns acting on incompatible motions
    /// are never excited by the closed loop and are left free.
    Compatible,
}

/// Least-squares problem for `Q(K) W = Q^d W`.
pub fn build_problem_on(cm: &CMatrices, desired: &DesiredDynamics, w: &DMatrix<f64>) -> Result<GainFitProblem> {
    let n = cm.n();
    if desired.n() != n || w.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "desired dynamics",
            expected: n,
            got: desired.n(),
        });
    }
    let r = w.ncols();
    let mut g = DMatrix::zeros(n * r, 36 + n * n);
    g.columns_mut(0, 36).copy_from(&kron(&(&cm.c2 * w).transpose(), &cm.c1));
    g.columns_mut(36, n * n).copy_from(&kron(&(&cm.c4 * w).transpose(), &cm.c3));
    Ok(GainFitProblem {
        gamma: g,
        y1: vec_cm(&(&desired.q1 * w)),
        y2: vec_cm(&(&desired.q2 * w)),
        cm: cm.clone(),
    })
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tracker: TrackOptions {
                record_stride: 0,
                ..TrackOptions::default()
            },
            tracker_gains: None,
            pinv: PinvOptions {
                rcond: RANK_RCOND,
                damping: 0.0,
            },
            warm_start: true,
            space: FitSpace::Compatible,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GainReport {
    pub name: &'static str,
    /// `|K* − X*|` (Frobenius).
    pub distance: f64,
    pub status: TrackStatus,
    pub steps: usize,
    pub monotone: bool,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub gains: ControlGains,
    pub unconstrained: UnconstrainedGains,
    pub corrected: bool,
    /// Desired dynamics after the correction, the target of the fit.
    pub desired: DesiredDynamics,
    pub rank: RankReport,
    pub per_gain: Vec<GainReport>,
    /// `|(A(K*) − A^d) W|` and `|(A(X*) − A^d) W|` (Frobenius), with `W` the
    /// fitted columns (all of them unless the fit is restricted).
    pub unconstrained_error: f64,
    pub achieved_error: f64,
}

pub const GAIN_NAMES: [&str; 4] = ["Ki", "Kp", "Kpj", "Kdj"];

/// Correction (several contacts), least-squares fit, and SPD tracking of
/// each of the four gain matrices.
pub fn fit_gains(
    model: &RobotModel,
    reference: &RobotState,
    desired: &DesiredDynamics,
    opts: &FitOptions,
) -> Result<FitReport> {
    let n = model.n_joints();
    let corrected = model.n_contacts() > 1;
    let (target, w) = if corrected {
        let c = two_feet_correction(model, reference, desired)?;
        let w = match opts.space {
            FitSpace::Full => DMatrix::identity(n, n),
            FitSpace::Compatible => projector_basis(&c.n_j),
        };
        (c.desired, w)
    } else {
        (desired.clone(), DMatrix::identity(n, n))
    };
    let cm = c_matrices(model, reference)?;
    let problem = build_problem(&cm, &target)?;
    let rank = rank_diagnostics(&problem, model.n_contacts());
    let k = if corrected && opts.space == FitSpace::Compatible {
        solve_unconstrained_with(&build_problem_on(&cm, &target, &w)?, opts.pinv)
    } else {
        solve_unconstrained_with(&problem, opts.pinv)
    };
    let targets = [&k.ki, &k.kp, &k.kpj, &k.kdj];
    let runs: Vec<Result<TrackResult>> = targets
        .par_iter()
        .map(|kstar| {
            let m = kstar.nrows();
            let gains = match &opts.tracker_gains {
                Some((g6, gn)) => if m == 6 { g6.clone() } else { gn.clone() },
                None => TrackerGains::identity(m),
            };
            let init = if opts.warm_start {
                TrackerState::warm_start(kstar)
            } else {
                TrackerState::identity(m)
            };
            track(kstar, &init, &gains, &opts.tracker)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let to6 = |m: &DMatrix<f64>| Matrix6::from_fn(|r, c| m[(r, c)]);
    let gains = ControlGains {
        momentum: MomentumGains {
            ki: to6(&runs[0].x),
            kp: to6(&runs[1].x),
        },
        postural: PosturalGains {
            kpj: runs[2].x.clone(),
            kdj: runs[3].x.clone(),
        },
    };
    let per_gain = runs
        .iter()
        .zip(targets)
        .zip(GAIN_NAMES)
        .map(|((r, kstar), name)| GainReport {
            name,
            distance: (kstar - &r.x).norm(),
            status: r.status,
            steps: r.steps,
            monotone: r.is_monotone(),
        })
        .collect();
    let ad = target.a();
    let unconstrained_gains = ControlGains {
        momentum: MomentumGains {
            ki: to6(&k.ki),
            kp: to6(&k.kp),
        },
        postural: PosturalGains {
            kpj: k.kpj.clone(),
            kdj: k.kdj.clone(),
        },
    };
    let mut w2 = DMatrix::zeros(2 * n, 2 * w.ncols());
    w2.view_mut((0, 0), (n, w.ncols())).copy_from(&w);
    w2.view_mut((n, w.ncols()), (n, w.ncols())).copy_from(&w);
    let unconstrained_error = ((analytic_a(&cm, &unconstrained_gains).a - &ad) * &w2).norm();
    let achieved_error = ((analytic_a(&cm, &gains).a - &ad) * &w2).norm();
    Ok(FitReport {
        gains,
        unconstrained: k,
        corrected,
        desired: target,
        rank,
        per_gain,
        unconstrained_error,
        achieved_error,
    })
}
