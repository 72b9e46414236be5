//! Dense strictly convex QP by the Goldfarb-Idnani dual active-set method:
//!
//! ```text
//! minimize ½ xᵀ G x + gᵀ x   subject to   A x ≤ b
//! ```
//!
//! Starts from the unconstrained minimizer and adds violated constraints
//! one at a time, so an unconstrained minimizer that happens to be
//! feasible is returned unchanged.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Indices of constraints active at the solution.
    pub active: Vec<usize>,
    /// Multipliers of the active constraints (same order), all ≥ 0.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

pub fn solve(
    g_mat: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution> {
    let nx = g.len();
    let scale = g_mat.diagonal().amax().max(1.0);
    let mut hess = g_mat.clone();
    let chol = match hess.clone().cholesky() {
        Some(c) => c,
        None => {
            // Positive semidefinite: make it strictly convex.
            for i in 0..nx {
                hess[(i, i)] += 1e-12 * scale;
            }
            hess.clone().cholesky().ok_or(Error::Invalid("QP Hessian is indefinite".into()))?
        }
    };
    let ginv = chol.inverse();
    let mut x = -(&ginv * g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let tol = |i: usize| 1e-12 * (1.0 + b[i].abs() + a.row(i).norm());

    loop {
        // Most violated inactive constraint.
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..a.nrows() {
            if active.contains(&i) {
                continue;
            }
            let viol = a.row(i).dot(&x.transpose()) - b[i];
            if viol > tol(i) && worst.is_none_or(|(_, v)| viol > v) {
                worst = Some((i, viol));
            }
        }
        let Some((p, first_violation)) = worst else {
            return Ok(QpSolution {
                x,
                active,
                multipliers: u,
                iterations,
            });
        };
        // Work with normals n_i = −a_i so that constraints read n_iᵀx ≥ −b_i.
        let np: DVector<f64> = -a.row(p).transpose();
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > MAX_ITERATIONS {
                return Err(Error::NoConvergence {
                    what: "active-set QP",
                    iterations: MAX_ITERATIONS,
                });
            }
            let (z, r) = directions(&ginv, a, &active, &np);
            // Partial step: largest step keeping the multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let slack = -b[p] - np.dot(&x);
            let t2 = if z.norm() > 1e-14 * (1.0 + np.norm()) && zn > 0.0 {
                slack / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible {
                    row: p,
                    violation: first_violation,
                });
            }
            if t2.is_finite() {
                x += &z * t;
            }
            for (k, uk) in u.iter_mut().enumerate() {
                *uk -= t * r[k];
            }
            u_plus += t;
            if t == t2 {
                active.push(p);
                u.push(u_plus);
                break;
            }
            let k = drop.expect("partial step has a blocking multiplier");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Primal step direction `z` and dual direction `r` for adding normal `np`
/// to the active set.
fn directions(
    ginv: &DMatrix<f64>,
    a: &DMatrix<f64>,
    active: &[usize],
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let gnp = ginv * np;
    if active.is_empty() {
        return (gnp, DVector::zeros(0));
    }
    let nx = np.len();
    let mut nmat = DMatrix::zeros(nx, active.len());
    for (k, &i) in active.iter().enumerate() {
        nmat.set_column(k, &(-a.row(i).transpose()));
    }
    let gn = ginv * &nmat;
    let s = nmat.transpose() * &gn;
    let rhs = nmat.transpose() * &gnp;
    let r = s
        .clone()
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| crate::linalg::pinv(&s) * &rhs);
    let z = gnp - gn * &r;
    (z, r)
}
