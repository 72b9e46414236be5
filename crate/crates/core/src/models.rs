//! Bundled desk-scale models and their reference postures.

use nalgebra::DVector;
use serde::Deserialize;

use crate::balancer::FrictionParams;
use crate::error::{Error, Result};
use crate::gainfit::DesiredDynamics;
use crate::multibody::{parse_model, Pose, RobotModel, RobotState};

pub const CHAIN7_JSON: &str = include_str!("../models/chain7.json");
pub const CHAIN7_EQ_JSON: &str = include_str!("../models/chain7_eq.json");
pub const BIPED14_JSON: &str = include_str!("../models/biped14.json");
pub const BIPED14_EQ_JSON: &str = include_str!("../models/biped14_eq.json");
pub const CHAIN7_DESIRED_JSON: &str = include_str!("../models/chain7_desired.json");
pub const BIPED14_DESIRED_JSON: &str = include_str!("../models/biped14_desired.json");
pub const FRICTION_JSON: &str = include_str!("../models/friction.json");

/// Single support chain: a foot on the ground and seven revolute joints.
pub fn chain7() -> RobotModel {
    parse_model(CHAIN7_JSON).expect("bundled model is valid")
}

/// Two-legged model with a two-joint torso, both feet in contact.
pub fn biped14() -> RobotModel {
    parse_model(BIPED14_JSON).expect("bundled model is valid")
}

pub fn chain7_equilibrium() -> Equilibrium {
    parse_equilibrium(CHAIN7_EQ_JSON).expect("bundled equilibrium is valid")
}

pub fn biped14_equilibrium() -> Equilibrium {
    parse_equilibrium(BIPED14_EQ_JSON).expect("bundled equilibrium is valid")
}

/// Critically damped desired dynamics with `ω = 4` on every joint.
pub fn chain7_desired() -> DesiredDynamics {
    DesiredDynamics::from_json(CHAIN7_DESIRED_JSON).expect("bundled desired dynamics are valid")
}

pub fn biped14_desired() -> DesiredDynamics {
    DesiredDynamics::from_json(BIPED14_DESIRED_JSON).expect("bundled desired dynamics are valid")
}

pub fn friction() -> FrictionParams {
    serde_json::from_str(FRICTION_JSON).expect("bundled friction parameters are valid")
}

/// Reference posture: joint angles and base pose, at rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub q: DVector<f64>,
    pub base: Pose,
}

impl Equilibrium {
    pub fn state(&self) -> RobotState {
        RobotState::at_rest(self.base, self.q.clone())
    }

    pub fn check(&self, model: &RobotModel) -> Result<()> {
        if self.q.len() != model.n_joints() {
            return Err(Error::DimensionMismatch {
                what: "equilibrium joint positions",
                expected: model.n_joints(),
                got: self.q.len(),
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EqFile {
    q: Vec<f64>,
    #[serde(default)]
    base: Option<BaseFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseFile {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

/// Parses `{"q": [...], "base": {"xyz": [...], "rpy": [...]}}`; the base
/// defaults to the identity pose.
pub fn parse_equilibrium(text: &str) -> Result<Equilibrium> {
    let f: EqFile = serde_json::from_str(text)?;
    let base = f
        .base
        .map(|b| Pose::from_xyz_rpy(b.xyz, b.rpy))
        .unwrap_or_default();
    Ok(Equilibrium {
        q: DVector::from_vec(f.q),
        base,
    })
}
