//! Kinematic-tree robot models, states, forward kinematics and frame Jacobians.

mod kinematics;
mod model_file;
pub mod spatial;

use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector3, Vector6};

pub use kinematics::{forward_kinematics, frame_jacobian, jacobian_bias, Kinematics};
pub use model_file::{parse_model, serialize_model, ModelError};

use crate::error::{Error, Result};

/// Rigid transform: maps frame coordinates `x` to `rotation * x + position`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            position,
        }
    }

    /// Builds a pose from a translation and extrinsic XYZ Euler angles,
    /// i.e. `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        let r = *nalgebra::Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).matrix();
        Self::new(r, Vector3::from(xyz))
    }

    /// Extrinsic XYZ Euler angles of the rotation.
    pub fn rpy(&self) -> [f64; 3] {
        let (r, p, y) = nalgebra::Rotation3::from_matrix_unchecked(self.rotation).euler_angles();
        [r, p, y]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            position: self.rotation * other.position + self.position,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            position: -(rt * self.position),
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.position
    }

    /// `‖RᵀR − I‖_F` plus the deviation of `det R` from one.
    pub fn orthogonality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
            + (self.rotation.determinant() - 1.0).abs()
    }

    /// 6-vector (position error, rotation-vector error) of `self` relative to `reference`.
    pub fn error_to(&self, reference: &Pose) -> Vector6<f64> {
        let dp = self.position - reference.position;
        let dr = spatial::log_so3(&(self.rotation * reference.rotation.transpose()));
        spatial::join(&dp, &dr)
    }
}

/// The stored form of a joint or contact origin, kept verbatim so that a
/// model survives serialization bit-for-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Origin {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

impl Origin {
    pub fn pose(&self) -> Pose {
        Pose::from_xyz_rpy(self.xyz, self.rpy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    Floating,
    Revolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub kind: JointKind,
    /// Unit axis in the joint frame; zero for the floating root.
    pub axis: Vector3<f64>,
    pub origin: Origin,
    pub origin_pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    /// Index of the parent link; `None` for the root.
    pub parent: Option<usize>,
    pub joint: JointSpec,
    pub mass: f64,
    /// Center of mass in link coordinates.
    pub com: Vector3<f64>,
    /// Rotational inertia about the com, link axes.
    pub inertia: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactFrame {
    pub link: usize,
    pub origin: Origin,
    pub origin_pose: Pose,
}

/// Named frame of a model: a link frame or a contact frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameId {
    Link(usize),
    Contact(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    /// Links sorted so every parent precedes its children; root first.
    pub links: Vec<LinkSpec>,
    pub contacts: Vec<ContactFrame>,
    pub gravity: f64,
    /// Joint index of each link (`None` for the root).
    joint_of_link: Vec<Option<usize>>,
    /// Link index of each joint.
    link_of_joint: Vec<usize>,
}

impl RobotModel {
    pub(crate) fn from_parts(
        name: String,
        links: Vec<LinkSpec>,
        contacts: Vec<ContactFrame>,
        gravity: f64,
    ) -> Self {
        let mut joint_of_link = Vec::with_capacity(links.len());
        let mut link_of_joint = Vec::new();
        for (i, l) in links.iter().enumerate() {
            if l.joint.kind == JointKind::Revolute {
                joint_of_link.push(Some(link_of_joint.len()));
                link_of_joint.push(i);
            } else {
                joint_of_link.push(None);
            }
        }
        Self {
            name,
            links,
            contacts,
            gravity,
            joint_of_link,
            link_of_joint,
        }
    }

    /// Number of revolute joints `n`.
    pub fn n_joints(&self) -> usize {
        self.link_of_joint.len()
    }

    /// Number of contact frames `n_c`.
    pub fn n_contacts(&self) -> usize {
        self.contacts.len()
    }

    /// Generalized velocity dimension `n + 6`.
    pub fn dof(&self) -> usize {
        self.n_joints() + 6
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub fn joint_of_link(&self, link: usize) -> Option<usize> {
        self.joint_of_link[link]
    }

    pub fn link_of_joint(&self, joint: usize) -> usize {
        self.link_of_joint[joint]
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Resolves a frame name: a link name, or `contact<k>` / `contact:<k>`.
    pub fn frame(&self, name: &str) -> Result<FrameId> {
        if let Some(i) = self.link_index(name) {
            return Ok(FrameId::Link(i));
        }
        let rest = name
            .strip_prefix("contact:")
            .or_else(|| name.strip_prefix("contact"));
        if let Some(k) = rest.and_then(|s| s.parse::<usize>().ok()) {
            if k < self.n_contacts() {
                return Ok(FrameId::Contact(k));
            }
        }
        Err(Error::UnknownFrame(name.to_string()))
    }

    pub fn check_frame(&self, frame: FrameId) -> Result<()> {
        let ok = match frame {
            FrameId::Link(i) => i < self.links.len(),
            FrameId::Contact(k) => k < self.contacts.len(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownFrame(format!("{frame:?}")))
        }
    }

    /// Link carrying the frame.
    pub fn frame_link(&self, frame: FrameId) -> usize {
        match frame {
            FrameId::Link(i) => i,
            FrameId::Contact(k) => self.contacts[k].link,
        }
    }

    /// Joints on the path from the root to `link`, root side first.
    pub fn joint_path(&self, link: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = Some(link);
        while let Some(i) = cur {
            if let Some(j) = self.joint_of_link[i] {
                out.push(j);
            }
            cur = self.links[i].parent;
        }
        out.reverse();
        out
    }

    /// A copy of the model with the given contacts only (by index).
    pub fn with_contacts(&self, keep: &[usize]) -> RobotModel {
        let mut m = self.clone();
        m.contacts = keep.iter().map(|&k| self.contacts[k].clone()).collect();
        m
    }

    /// A copy of the model with gravity replaced.
    pub fn with_gravity(&self, g: f64) -> RobotModel {
        let mut m = self.clone();
        m.gravity = g;
        m
    }
}

/// Configuration and velocity of a floating-base robot.
///
/// `base_velocity` is `(ṗ_B, ω_B)`: the velocity of the base origin and the
/// world-frame angular velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub base_pose: Pose,
    pub q: DVector<f64>,
    pub base_velocity: Vector6<f64>,
    pub qdot: DVector<f64>,
}

impl RobotState {
    pub fn zero(model: &RobotModel) -> Self {
        let n = model.n_joints();
        Self {
            base_pose: Pose::identity(),
            q: DVector::zeros(n),
            base_velocity: Vector6::zeros(),
            qdot: DVector::zeros(n),
        }
    }

    pub fn at_rest(base_pose: Pose, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            base_pose,
            q,
            base_velocity: Vector6::zeros(),
            qdot: DVector::zeros(n),
        }
    }

    pub fn check(&self, model: &RobotModel) -> Result<()> {
        let n = model.n_joints();
        if self.q.len() != n {
            return Err(Error::DimensionMismatch {
                what: "joint positions",
                expected: n,
                got: self.q.len(),
            });
        }
        if self.qdot.len() != n {
            return Err(Error::DimensionMismatch {
                what: "joint velocities",
                expected: n,
                got: self.qdot.len(),
            });
        }
        Ok(())
    }

    /// Generalized velocity `ν = (ṗ_B, ω_B, q̇_j)`.
    pub fn nu(&self) -> DVector<f64> {
        let n = self.q.len();
        let mut v = DVector::zeros(n + 6);
        v.fixed_rows_mut::<6>(0).copy_from(&self.base_velocity);
        v.rows_mut(6, n).copy_from(&self.qdot);
        v
    }

    pub fn set_nu(&mut self, nu: &DVector<f64>) {
        let n = self.q.len();
        self.base_velocity.copy_from(&nu.fixed_rows::<6>(0));
        self.qdot.copy_from(&nu.rows(6, n));
    }

    pub fn with_nu(&self, nu: &DVector<f64>) -> Self {
        let mut s = self.clone();
        s.set_nu(nu);
        s
    }

    /// Configuration moved by `eps` along the velocity direction `dir`
    /// (base translated by `eps·ṗ`, rotated by `exp(eps·ω)` on the left).
    /// Velocities are left unchanged.
    pub fn displaced(&self, dir: &DVector<f64>, eps: f64) -> Self {
        let n = self.q.len();
        let mut s = self.clone();
        let dp = Vector3::new(dir[0], dir[1], dir[2]) * eps;
        let dw = Vector3::new(dir[3], dir[4], dir[5]) * eps;
        s.base_pose.position += dp;
        s.base_pose.rotation = spatial::exp_so3(&dw) * s.base_pose.rotation;
        s.q += dir.rows(6, n) * eps;
        s
    }

    pub fn base_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.base_pose.rotation)
    }
}
