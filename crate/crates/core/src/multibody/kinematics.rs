use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};

use super::spatial::{ang, base_motion_map, cross_motion, join, lin, point_map};
use super::{FrameId, Pose, RobotModel, RobotState};
use crate::error::Result;

/// Positions, joint motion subspaces, velocities and velocity-product
/// accelerations of every link for one state.
///
/// Spatial quantities are world-aligned and referred to the world origin.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub link_poses: Vec<Pose>,
    /// `S_base`: base twist to spatial velocity.
    pub base_map: Matrix6<f64>,
    /// Motion subspace `(o × a, a)` of each joint.
    pub joint_columns: Vec<Vector6<f64>>,
    /// Spatial velocity of each link.
    pub velocities: Vec<Vector6<f64>>,
    /// Spatial acceleration of each link when `ν̇ = 0`.
    pub bias_accelerations: Vec<Vector6<f64>>,
}

impl Kinematics {
    pub fn new(model: &RobotModel, state: &RobotState) -> Result<Self> {
        state.check(model)?;
        let nl = model.links.len();
        let mut link_poses = Vec::with_capacity(nl);
        let mut velocities = Vec::with_capacity(nl);
        let mut bias = Vec::with_capacity(nl);
        let mut joint_columns = vec![Vector6::zeros(); model.n_joints()];

        let base_map = base_motion_map(&state.base_pose.position);
        let v_base = base_map * state.base_velocity;
        let pdot = lin(&state.base_velocity);
        let a_base = join(&pdot.cross(&ang(&state.base_velocity)), &Vector3::zeros());

        for (i, link) in model.links.iter().enumerate() {
            match link.parent {
                None => {
                    link_poses.push(state.base_pose.compose(&link.joint.origin_pose));
                    velocities.push(v_base);
                    bias.push(a_base);
                }
                Some(p) => {
                    let j = model.joint_of_link(i).expect("non-root links are revolute");
                    let frame = link_poses[p].compose(&link.joint.origin_pose);
                    let axis = frame.rotation * link.joint.axis;
                    let s = join(&frame.position.cross(&axis), &axis);
                    let rot = super::spatial::axis_angle(&link.joint.axis, state.q[j]);
                    link_poses.push(Pose::new(frame.rotation * rot, frame.position));
                    joint_columns[j] = s;
                    let vs = s * state.qdot[j];
                    let v = velocities[p] + vs;
                    bias.push(bias[p] + cross_motion(&v, &vs));
                    velocities.push(v);
                }
            }
        }
        Ok(Self {
            link_poses,
            base_map,
            joint_columns,
            velocities,
            bias_accelerations: bias,
        })
    }

    pub fn frame_pose(&self, model: &RobotModel, frame: FrameId) -> Pose {
        match frame {
            FrameId::Link(i) => self.link_poses[i],
            FrameId::Contact(k) => {
                let c = &model.contacts[k];
                self.link_poses[c.link].compose(&c.origin_pose)
            }
        }
    }

    /// Spatial Jacobian of a link: `V_link = J ν` with `V` referred to the origin.
    pub fn link_spatial_jacobian(&self, model: &RobotModel, link: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, model.dof());
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.base_map);
        for k in model.joint_path(link) {
            j.fixed_view_mut::<6, 1>(0, 6 + k).copy_from(&self.joint_columns[k]);
        }
        j
    }

    /// Jacobian mapping `ν` to the frame's (linear velocity, angular velocity).
    pub fn jacobian(&self, model: &RobotModel, frame: FrameId) -> DMatrix<f64> {
        let x = self.frame_pose(model, frame).position;
        let link = model.frame_link(frame);
        let p = point_map(&x);
        let mut j = DMatrix::zeros(6, model.dof());
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&(p * self.base_map));
        for k in model.joint_path(link) {
            j.fixed_view_mut::<6, 1>(0, 6 + k)
                .copy_from(&(p * self.joint_columns[k]));
        }
        j
    }

    /// `J̇ν` for the frame: its classical acceleration when `ν̇ = 0`.
    pub fn bias(&self, model: &RobotModel, frame: FrameId) -> Vector6<f64> {
        let x = self.frame_pose(model, frame).position;
        let link = model.frame_link(frame);
        let v = self.velocities[link];
        let a = self.bias_accelerations[link];
        let w = ang(&v);
        let vx = lin(&v) + w.cross(&x);
        join(&(lin(&a) + ang(&a).cross(&x) + w.cross(&vx)), &ang(&a))
    }

    /// Stacked contact Jacobian `J` (6n_c × (n+6)).
    pub fn contact_jacobian(&self, model: &RobotModel) -> DMatrix<f64> {
        let nc = model.n_contacts();
        let mut j = DMatrix::zeros(6 * nc, model.dof());
        for k in 0..nc {
            j.rows_mut(6 * k, 6)
                .copy_from(&self.jacobian(model, FrameId::Contact(k)));
        }
        j
    }

    /// Stacked contact bias `J̇ν`.
    pub fn contact_bias(&self, model: &RobotModel) -> nalgebra::DVector<f64> {
        let nc = model.n_contacts();
        let mut b = nalgebra::DVector::zeros(6 * nc);
        for k in 0..nc {
            b.fixed_rows_mut::<6>(6 * k)
                .copy_from(&self.bias(model, FrameId::Contact(k)));
        }
        b
    }
}

/// World pose of every link (by name) and contact (`contact<k>`).
pub fn forward_kinematics(model: &RobotModel, state: &RobotState) -> Result<BTreeMap<String, Pose>> {
    let kin = Kinematics::new(model, state)?;
    let mut out = BTreeMap::new();
    for (i, l) in model.links.iter().enumerate() {
        out.insert(l.name.clone(), kin.link_poses[i]);
    }
    for k in 0..model.n_contacts() {
        out.insert(format!("contact{k}"), kin.frame_pose(model, FrameId::Contact(k)));
    }
    Ok(out)
}

pub fn frame_jacobian(model: &RobotModel, state: &RobotState, frame: &str) -> Result<DMatrix<f64>> {
    let f = model.frame(frame)?;
    Ok(Kinematics::new(model, state)?.jacobian(model, f))
}

pub fn jacobian_bias(model: &RobotModel, state: &RobotState, frame: &str) -> Result<Vector6<f64>> {
    let f = model.frame(frame)?;
    Ok(Kinematics::new(model, state)?.bias(model, f))
}
