//! Mass matrix, bias forces, the centroidal change of base coordinates,
//! robot momentum and constrained forward dynamics.
//!
//! Generalized velocities are `ν = (ṗ_B, ω_B, q̇_j)`. Equations of motion
//! read `M ν̇ + h = B τ + Jᵀ f` with `B = [0; I]` and gravity inside `h`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::linalg::skew3;
use crate::multibody::spatial::{ang, cross_force, cross_motion, inertia_at_origin, join, lin};
use crate::multibody::{FrameId, Kinematics, Pose, RobotModel, RobotState};

/// `M` and `h = Cν + G` in the original base coordinates.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub m: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl DynamicsTerms {
    pub fn h_b(&self) -> DVector<f64> {
        self.h.rows(0, 6).into_owned()
    }

    pub fn h_j(&self) -> DVector<f64> {
        let n = self.h.len() - 6;
        self.h.rows(6, n).into_owned()
    }
}

struct LinkInertials {
    /// Spatial inertia of each link about the world origin.
    inertia: Vec<Matrix6<f64>>,
    /// World position of each link's center of mass.
    com: Vec<Vector3<f64>>,
    /// Rotational inertia about the com, world axes.
    rot_inertia: Vec<Matrix3<f64>>,
}

fn link_inertials(model: &RobotModel, kin: &Kinematics) -> LinkInertials {
    let nl = model.links.len();
    let mut inertia = Vec::with_capacity(nl);
    let mut com = Vec::with_capacity(nl);
    let mut rot_inertia = Vec::with_capacity(nl);
    for (l, pose) in model.links.iter().zip(&kin.link_poses) {
        let c = pose.transform_point(&l.com);
        let iw = pose.rotation * l.inertia * pose.rotation.transpose();
        inertia.push(inertia_at_origin(l.mass, &c, &iw));
        com.push(c);
        rot_inertia.push(iw);
    }
    LinkInertials {
        inertia,
        com,
        rot_inertia,
    }
}

/// Composite-rigid-body mass matrix.
fn crba(model: &RobotModel, kin: &Kinematics, li: &LinkInertials) -> DMatrix<f64> {
    let n = model.n_joints();
    let nl = model.links.len();
    let mut composite = li.inertia.clone();
    for i in (1..nl).rev() {
        let p = model.links[i].parent.expect("non-root link");
        let ci = composite[i];
        composite[p] += ci;
    }
    let sb = &kin.base_map;
    let mut m = DMatrix::zeros(n + 6, n + 6);
    m.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(sb.transpose() * composite[0] * sb));
    for i in 1..nl {
        let j = model.joint_of_link(i).expect("non-root link");
        let f = composite[i] * kin.joint_columns[j];
        m[(6 + j, 6 + j)] = kin.joint_columns[j].dot(&f);
        let mut cur = model.links[i].parent;
        while let Some(a) = cur {
            if let Some(k) = model.joint_of_link(a) {
                let v = kin.joint_columns[k].dot(&f);
                m[(6 + k, 6 + j)] = v;
                m[(6 + j, 6 + k)] = v;
            }
            cur = model.links[a].parent;
        }
        let fb = sb.transpose() * f;
        m.fixed_view_mut::<6, 1>(0, 6 + j).copy_from(&fb);
        m.fixed_view_mut::<1, 6>(6 + j, 0).copy_from(&fb.transpose());
    }
    m
}

/// Recursive Newton-Euler. Returns the generalized forces and the total
/// spatial force about the world origin (the rate of spatial momentum
/// when gravity is off).
fn rnea(
    model: &RobotModel,
    state: &RobotState,
    kin: &Kinematics,
    li: &LinkInertials,
    nu_dot: &DVector<f64>,
    gravity: f64,
) -> (DVector<f64>, Vector6<f64>) {
    let n = model.n_joints();
    let nl = model.links.len();
    let base_acc = nu_dot.fixed_rows::<6>(0).into_owned();
    let pdot = lin(&state.base_velocity);
    let mut a0 = kin.base_map * base_acc
        + join(&pdot.cross(&ang(&state.base_velocity)), &Vector3::zeros());
    // Uniform gravity as an upward acceleration of the whole tree.
    a0[2] += gravity;

    let mut acc = Vec::with_capacity(nl);
    let mut forces = Vec::with_capacity(nl);
    for (i, link) in model.links.iter().enumerate() {
        let a = match link.parent {
            None => a0,
            Some(p) => {
                let j = model.joint_of_link(i).expect("non-root link");
                let s = kin.joint_columns[j];
                acc[p] + s * nu_dot[6 + j] + cross_motion(&kin.velocities[i], &(s * state.qdot[j]))
            }
        };
        acc.push(a);
        let v = kin.velocities[i];
        forces.push(li.inertia[i] * a + cross_force(&v, &(li.inertia[i] * v)));
    }
    let mut tau = DVector::zeros(n + 6);
    for i in (1..nl).rev() {
        let j = model.joint_of_link(i).expect("non-root link");
        tau[6 + j] = kin.joint_columns[j].dot(&forces[i]);
        let p = model.links[i].parent.expect("non-root link");
        let fi = forces[i];
        forces[p] += fi;
    }
    let fb = kin.base_map.transpose() * forces[0];
    tau.fixed_rows_mut::<6>(0).copy_from(&fb);
    (tau, forces[0])
}

pub fn mass_matrix(model: &RobotModel, state: &RobotState) -> Result<DMatrix<f64>> {
    let kin = Kinematics::new(model, state)?;
    let li = link_inertials(model, &kin);
    Ok(crba(model, &kin, &li))
}

/// `h = C(q,ν)ν + G(q)`.
pub fn bias_forces(model: &RobotModel, state: &RobotState) -> Result<DVector<f64>> {
    let kin = Kinematics::new(model, state)?;
    let li = link_inertials(model, &kin);
    let zero = DVector::zeros(model.dof());
    Ok(rnea(model, state, &kin, &li, &zero, model.gravity).0)
}

/// Generalized forces `M ν̇ + h` (gravity optional).
pub fn inverse_dynamics(
    model: &RobotModel,
    state: &RobotState,
    nu_dot: &DVector<f64>,
    with_gravity: bool,
) -> Result<DVector<f64>> {
    if nu_dot.len() != model.dof() {
        return Err(Error::DimensionMismatch {
            what: "generalized acceleration",
            expected: model.dof(),
            got: nu_dot.len(),
        });
    }
    let kin = Kinematics::new(model, state)?;
    let li = link_inertials(model, &kin);
    let g = if with_gravity { model.gravity } else { 0.0 };
    Ok(rnea(model, state, &kin, &li, nu_dot, g).0)
}

pub fn dynamics_terms(model: &RobotModel, state: &RobotState) -> Result<DynamicsTerms> {
    let kin = Kinematics::new(model, state)?;
    Ok(dynamics_terms_with(model, state, &kin))
}

fn dynamics_terms_with(model: &RobotModel, state: &RobotState, kin: &Kinematics) -> DynamicsTerms {
    let li = link_inertials(model, kin);
    let zero = DVector::zeros(model.dof());
    DynamicsTerms {
        m: crba(model, kin, &li),
        h: rnea(model, state, kin, &li, &zero, model.gravity).0,
    }
}

/// World position of the center of mass.
pub fn center_of_mass(model: &RobotModel, state: &RobotState) -> Result<Vector3<f64>> {
    let kin = Kinematics::new(model, state)?;
    Ok(com_of(model, &link_inertials(model, &kin)))
}

fn com_of(model: &RobotModel, li: &LinkInertials) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for (l, c) in model.links.iter().zip(&li.com) {
        acc += c * l.mass;
    }
    acc / model.total_mass()
}

/// Dynamics in centroidal base coordinates, where the base velocity is
/// `(ṗ_c, ω_o)` and the mass matrix is block diagonal.
#[derive(Clone, Debug)]
pub struct CentroidalTerms {
    /// `diag(m·I₃, I_c)`.
    pub m_b: Matrix6<f64>,
    /// Joint-space block (Schur complement of the original base block).
    pub m_j: DMatrix<f64>,
    /// Full transformed mass matrix.
    pub m: DMatrix<f64>,
    pub h: DVector<f64>,
    /// Stacked contact Jacobian in the new coordinates.
    pub j: DMatrix<f64>,
    /// Stacked contact bias `J̇ν` (invariant under the change of coordinates).
    pub jdot_nu: DVector<f64>,
    pub nu: DVector<f64>,
    /// Joint positions.
    pub q: DVector<f64>,
    /// Momentum `(H_L, H_ω)` about the center of mass.
    pub momentum: Vector6<f64>,
    pub com: Vector3<f64>,
    /// Velocity transformation `ν' = T ν`.
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
    /// Terms in the original coordinates.
    pub original: DynamicsTerms,
    pub original_j: DMatrix<f64>,
    /// World poses of the contact frames.
    pub contact_poses: Vec<Pose>,
    pub total_mass: f64,
    pub gravity: f64,
}

impl CentroidalTerms {
    pub fn n(&self) -> usize {
        self.nu.len() - 6
    }

    pub fn n_contacts(&self) -> usize {
        self.j.nrows() / 6
    }

    pub fn j_b(&self) -> DMatrix<f64> {
        self.j.columns(0, 6).into_owned()
    }

    pub fn j_j(&self) -> DMatrix<f64> {
        self.j.columns(6, self.n()).into_owned()
    }

    pub fn h_b(&self) -> DVector<f64> {
        self.h.rows(0, 6).into_owned()
    }

    pub fn h_j(&self) -> DVector<f64> {
        self.h.rows(6, self.n()).into_owned()
    }

    pub fn v_b(&self) -> Vector6<f64> {
        self.nu.fixed_rows::<6>(0).into_owned()
    }

    pub fn qdot(&self) -> DVector<f64> {
        self.nu.rows(6, self.n()).into_owned()
    }

    pub fn m_b_inv(&self) -> Matrix6<f64> {
        let mut out = Matrix6::zeros();
        let ic = self.m_b.fixed_view::<3, 3>(3, 3).into_owned();
        out.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() / self.total_mass));
        out.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&ic.try_inverse().expect("locked inertia is positive definite"));
        out
    }

    /// `m g e₃`, the gravity wrench the contacts must balance.
    pub fn weight(&self) -> Vector6<f64> {
        Vector6::new(0.0, 0.0, self.total_mass * self.gravity, 0.0, 0.0, 0.0)
    }
}

pub fn centroidal_transform(model: &RobotModel, state: &RobotState) -> Result<CentroidalTerms> {
    let kin = Kinematics::new(model, state)?;
    centroidal_with(model, state, &kin)
}

pub fn centroidal_with(
    model: &RobotModel,
    state: &RobotState,
    kin: &Kinematics,
) -> Result<CentroidalTerms> {
    let n = model.n_joints();
    let dof = n + 6;
    let li = link_inertials(model, kin);
    let mass = model.total_mass();
    let zero = DVector::zeros(dof);
    let m = crba(model, kin, &li);
    let h = rnea(model, state, kin, &li, &zero, model.gravity).0;
    let (_, momentum_rate) = rnea(model, state, kin, &li, &zero, 0.0);

    let com = com_of(model, &li);
    let r = com - state.base_pose.position;
    let rx = skew3(&r);

    // Locked rotational inertia about the com and its rate.
    let mut ic = Matrix3::zeros();
    let mut ic_dot = Matrix3::zeros();
    let mut p_lin = Vector3::zeros();
    let mut cdot = Vec::with_capacity(model.links.len());
    for (i, l) in model.links.iter().enumerate() {
        let v = kin.velocities[i];
        let cd = lin(&v) + ang(&v).cross(&li.com[i]);
        p_lin += cd * l.mass;
        cdot.push(cd);
    }
    let com_dot = p_lin / mass;
    for (i, l) in model.links.iter().enumerate() {
        let ri = li.com[i] - com;
        let rdi = cdot[i] - com_dot;
        let iw = li.rot_inertia[i];
        let wx = skew3(&ang(&kin.velocities[i]));
        ic += iw + (Matrix3::identity() * ri.norm_squared() - ri * ri.transpose()) * l.mass;
        ic_dot += wx * iw - iw * wx
            + (Matrix3::identity() * (2.0 * ri.dot(&rdi)) - rdi * ri.transpose() - ri * rdi.transpose())
                * l.mass;
    }
    let mut m_b = Matrix6::zeros();
    m_b.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * mass));
    m_b.fixed_view_mut::<3, 3>(3, 3).copy_from(&ic);
    let ic_inv = ic.try_inverse().ok_or(Error::Invalid("singular locked inertia".into()))?;
    let mut m_b_inv = Matrix6::zeros();
    m_b_inv
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() / mass));
    m_b_inv.fixed_view_mut::<3, 3>(3, 3).copy_from(&ic_inv);

    // Force transform to the com, and the inverse of the base motion block.
    let mut x_c = Matrix6::identity();
    x_c.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rx));
    let mut xi = Matrix6::identity();
    xi.fixed_view_mut::<3, 3>(0, 3).copy_from(&rx);

    let m_bb: Matrix6<f64> = m.fixed_view::<6, 6>(0, 0).into_owned();
    let m_bj = m.view((0, 6), (6, n)).into_owned();
    let m_bb_inv = m_bb
        .cholesky()
        .ok_or(Error::Invalid("base mass block is not positive definite".into()))?
        .inverse();
    let yi = -(m_bb_inv * &m_bj);

    let mut t = DMatrix::identity(dof, dof);
    let tb = m_b_inv * x_c;
    t.view_mut((0, 0), (6, 6)).copy_from(&(tb * m_bb));
    t.view_mut((0, 6), (6, n)).copy_from(&(tb * &m_bj));
    let mut t_inv = DMatrix::identity(dof, dof);
    t_inv.view_mut((0, 0), (6, 6)).copy_from(&xi);
    t_inv.view_mut((0, 6), (6, n)).copy_from(&yi);

    let nu = state.nu();
    let nu_new = &t * &nu;
    let v_new: Vector6<f64> = nu_new.fixed_rows::<6>(0).into_owned();

    // Momentum rate at zero acceleration without gravity, about the com.
    let pd = lin(&momentum_rate);
    let hdot = join(&pd, &(ang(&momentum_rate) - com.cross(&pd)));
    let mut mb_dot_v = Vector6::zeros();
    mb_dot_v
        .fixed_rows_mut::<3>(3)
        .copy_from(&(ic_dot * ang(&v_new)));
    let a_new = m_b_inv * (hdot - mb_dot_v);
    let mut nu_dot0 = DVector::zeros(dof);
    nu_dot0.fixed_rows_mut::<6>(0).copy_from(&(-(xi * a_new)));

    let t_inv_t = t_inv.transpose();
    let mut m_new = &t_inv_t * &m * &t_inv;
    // The coupling blocks vanish analytically; enforce exact symmetry.
    m_new = (&m_new + m_new.transpose()) * 0.5;
    let h_new = &t_inv_t * (&h + &m * &nu_dot0);
    let j = kin.contact_jacobian(model);
    let jdot_nu = kin.contact_bias(model) + &j * &nu_dot0;
    let j_new = &j * &t_inv;
    let m_j = m_new.view((6, 6), (n, n)).into_owned();
    let momentum = m_b * v_new;

    Ok(CentroidalTerms {
        m_b,
        m_j,
        m: m_new,
        h: h_new,
        j: j_new,
        jdot_nu,
        nu: nu_new,
        q: state.q.clone(),
        momentum,
        com,
        t,
        t_inv,
        original: DynamicsTerms { m, h },
        original_j: j,
        contact_poses: (0..model.n_contacts())
            .map(|k| kin.frame_pose(model, FrameId::Contact(k)))
            .collect(),
        total_mass: mass,
        gravity: model.gravity,
    })
}

/// Robot momentum `H = M_b v_B` about the center of mass.
pub fn momentum(model: &RobotModel, state: &RobotState) -> Result<Vector6<f64>> {
    Ok(centroidal_transform(model, state)?.momentum)
}

/// Result of a constrained forward-dynamics solve.
#[derive(Clone, Debug)]
pub struct KktSolution {
    pub nu_dot: DVector<f64>,
    /// Contact wrenches, stacked per contact.
    pub f: DVector<f64>,
}

/// Solves `M ν̇ − Jᵀ f = Bτ − h`, `J ν̇ = −J̇ν − s` for `(ν̇, f)`, where `s`
/// is a stabilization term (zero for exact acceleration constraints).
/// Works in any base coordinates as long as inputs are consistent.
pub fn constrained_forward_dynamics(
    m: &DMatrix<f64>,
    h: &DVector<f64>,
    j: &DMatrix<f64>,
    jdot_nu: &DVector<f64>,
    tau: &DVector<f64>,
    stabilization: Option<&DVector<f64>>,
) -> Result<KktSolution> {
    let dof = m.nrows();
    let n = dof - 6;
    if tau.len() != n {
        return Err(Error::DimensionMismatch {
            what: "joint torques",
            expected: n,
            got: tau.len(),
        });
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::Invalid("mass matrix is not positive definite".into()))?;
    let mut rhs = -h.clone();
    rhs.rows_mut(6, n).axpy(1.0, tau, 1.0);
    let free = chol.solve(&rhs);
    if j.nrows() == 0 {
        return Ok(KktSolution {
            nu_dot: free,
            f: DVector::zeros(0),
        });
    }
    let minv_jt = chol.solve(&j.transpose());
    let schur = j * &minv_jt;
    let mut target = -jdot_nu - j * &free;
    if let Some(s) = stabilization {
        target -= s;
    }
    let scale = schur.diagonal().amax().max(f64::MIN_POSITIVE);
    let sc = schur.clone().cholesky().ok_or(Error::SingularKkt)?;
    let min_pivot = sc.l().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
    if min_pivot < 1e-12 * scale {
        return Err(Error::SingularKkt);
    }
    let f = sc.solve(&target);
    let nu_dot = free + minv_jt * &f;
    Ok(KktSolution { nu_dot, f })
}

/// Unconstrained forward dynamics `ν̇ = M⁻¹(Bτ − h)`.
pub fn forward_dynamics(model: &RobotModel, state: &RobotState, tau: &DVector<f64>) -> Result<DVector<f64>> {
    let d = dynamics_terms(model, state)?;
    let empty = DMatrix::zeros(0, model.dof());
    let none = DVector::zeros(0);
    Ok(constrained_forward_dynamics(&d.m, &d.h, &empty, &none, tau, None)?.nu_dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multibody::parse_model;

    fn brick() -> RobotModel {
        parse_model(
            r#"{"name": "brick", "gravity": 9.81, "links": [{"name": "b", "parent": null,
            "joint": {"kind": "floating", "origin": {"xyz": [0.1, 0, 0], "rpy": [0, 0.2, 0]}},
            "mass": 3.0, "com": [0.05, -0.02, 0.1], "inertia": [0.1, 0.2, 0.25, 0.01, 0, 0]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn single_body_mass_matrix_is_spatial_inertia() {
        let model = brick();
        let mut s = RobotState::zero(&model);
        s.base_pose = crate::multibody::Pose::from_xyz_rpy([0.3, 0.1, -0.2], [0.4, 0.0, 1.0]);
        let m = mass_matrix(&model, &s).unwrap();
        // Inertia about the base point, world axes, in (ṗ, ω) ordering.
        let kin = Kinematics::new(&model, &s).unwrap();
        let l = &model.links[0];
        let pose = kin.link_poses[0];
        let c = pose.transform_point(&l.com) - s.base_pose.position;
        let iw = pose.rotation * l.inertia * pose.rotation.transpose();
        let expect = inertia_at_origin(l.mass, &c, &iw);
        assert!((m.fixed_view::<6, 6>(0, 0) - expect).norm() < 1e-14);
    }

    #[test]
    fn single_body_centroidal_block_is_com_inertia() {
        let model = brick();
        let s = RobotState::zero(&model);
        let c = centroidal_transform(&model, &s).unwrap();
        let kin = Kinematics::new(&model, &s).unwrap();
        let pose = kin.link_poses[0];
        let iw = pose.rotation * model.links[0].inertia * pose.rotation.transpose();
        assert!((c.m_b.fixed_view::<3, 3>(3, 3) - iw).norm() < 1e-14);
        assert_eq!(c.m_j.nrows(), 0);
        assert!((c.h_b() - DVector::from_row_slice(&[0.0, 0.0, 3.0 * 9.81, 0.0, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn gravity_off_and_at_rest_gives_zero_bias() {
        let model = brick().with_gravity(0.0);
        let h = bias_forces(&model, &RobotState::zero(&model)).unwrap();
        assert_eq!(h, DVector::zeros(6));
    }
}
