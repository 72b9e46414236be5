//! JSON model files.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ContactFrame, JointKind, JointSpec, LinkSpec, Origin, RobotModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate link name `{0}`")]
    DuplicateLink(String),
    #[error("link `{link}` names unknown parent `{parent}`")]
    UnknownParent { link: String, parent: String },
    #[error("kinematic cycle through link `{0}`")]
    Cycle(String),
    #[error("model has no root link")]
    NoRoot,
    #[error("model has more than one root link (`{0}` and `{1}`)")]
    MultipleRoots(String, String),
    #[error("root link `{0}` must have a floating joint")]
    RootNotFloating(String),
    #[error("floating joint on non-root link `{0}`")]
    FloatingNotRoot(String),
    #[error("revolute joint of link `{0}` needs a unit axis")]
    InvalidAxis(String),
    #[error("link `{link}` has non-positive mass {mass}")]
    NonPositiveMass { link: String, mass: f64 },
    #[error("inertia of link `{0}` is not symmetric positive definite")]
    NonSpdInertia(String),
    #[error("principal moments of link `{0}` violate the triangle inequality")]
    InertiaTriangle(String),
    #[error("contact {index} refers to unknown link `{link}`")]
    UnknownContactLink { index: usize, link: String },
    #[error("invalid number in {0}")]
    NonFinite(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    gravity: f64,
    links: Vec<LinkFile>,
    #[serde(default)]
    contacts: Vec<ContactFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    name: String,
    parent: Option<String>,
    joint: JointFile,
    mass: f64,
    com: [f64; 3],
    inertia: [f64; 6],
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq)]
#[serde(rename_all = "lowercase")]
enum KindFile {
    Floating,
    Revolute,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    kind: KindFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default)]
    origin: OriginFile,
}

#[derive(Serialize, Deserialize, Default, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct OriginFile {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactFile {
    link: String,
    #[serde(default)]
    origin: OriginFile,
}

impl From<OriginFile> for Origin {
    fn from(o: OriginFile) -> Self {
        Origin { xyz: o.xyz, rpy: o.rpy }
    }
}

impl From<Origin> for OriginFile {
    fn from(o: Origin) -> Self {
        OriginFile { xyz: o.xyz, rpy: o.rpy }
    }
}

fn finite(xs: &[f64], what: &str) -> Result<(), ModelError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what.to_string()))
    }
}

fn inertia_matrix(i: &[f64; 6]) -> Matrix3<f64> {
    let [ixx, iyy, izz, ixy, ixz, iyz] = *i;
    Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz)
}

fn check_inertia(name: &str, i: &Matrix3<f64>) -> Result<(), ModelError> {
    let eig = SymmetricEigen::new(*i).eigenvalues;
    let scale = eig.amax().max(f64::MIN_POSITIVE);
    if eig.min() <= 1e-10 * scale {
        return Err(ModelError::NonSpdInertia(name.to_string()));
    }
    let (a, b, c) = (eig[0], eig[1], eig[2]);
    let slack = 1e-10 * scale;
    if a + b < c - slack || a + c < b - slack || b + c < a - slack {
        return Err(ModelError::InertiaTriangle(name.to_string()));
    }
    Ok(())
}

/// Parses and validates a JSON model file.
///
/// Links are re-ordered topologically; among links whose parent is already
/// placed, file order is kept.
pub fn parse_model(text: &str) -> Result<RobotModel, ModelError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| {
        let (line, column, message) = (e.line(), e.column(), e.to_string());
        if e.is_data() {
            ModelError::Schema {
                line,
                column,
                message,
            }
        } else {
            ModelError::Syntax {
                line,
                column,
                message,
            }
        }
    })?;

    if !file.gravity.is_finite() || file.gravity < 0.0 {
        return Err(ModelError::NonFinite("gravity".into()));
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, l) in file.links.iter().enumerate() {
        if index.insert(l.name.as_str(), i).is_some() {
            return Err(ModelError::DuplicateLink(l.name.clone()));
        }
    }
    let mut parent_of = Vec::with_capacity(file.links.len());
    for l in &file.links {
        let p = match &l.parent {
            None => None,
            Some(p) => Some(*index.get(p.as_str()).ok_or_else(|| ModelError::UnknownParent {
                link: l.name.clone(),
                parent: p.clone(),
            })?),
        };
        parent_of.push(p);
    }

    // Stable Kahn ordering: always emit the lowest file index that is ready.
    let nl = file.links.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); nl];
    let mut ready = BTreeSet::new();
    for (i, p) in parent_of.iter().enumerate() {
        match p {
            Some(p) => children[*p].push(i),
            None => {
                ready.insert(i);
            }
        }
    }
    let mut order = Vec::with_capacity(nl);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        ready.extend(children[i].iter().copied());
    }
    if order.len() < nl {
        let placed: BTreeSet<usize> = order.iter().copied().collect();
        let first = (0..nl).find(|i| !placed.contains(i)).unwrap();
        return Err(ModelError::Cycle(file.links[first].name.clone()));
    }
    let roots: Vec<usize> = (0..nl).filter(|&i| parent_of[i].is_none()).collect();
    match roots.as_slice() {
        [] => return Err(ModelError::NoRoot),
        [_] => {}
        [a, b, ..] => {
            return Err(ModelError::MultipleRoots(
                file.links[*a].name.clone(),
                file.links[*b].name.clone(),
            ))
        }
    }

    let mut new_index = vec![0usize; nl];
    for (k, &i) in order.iter().enumerate() {
        new_index[i] = k;
    }

    let mut links = Vec::with_capacity(nl);
    for &i in &order {
        let l = &file.links[i];
        finite(&[l.mass], &format!("mass of `{}`", l.name))?;
        finite(&l.com, &format!("com of `{}`", l.name))?;
        finite(&l.inertia, &format!("inertia of `{}`", l.name))?;
        finite(&l.joint.origin.xyz, &format!("origin of `{}`", l.name))?;
        finite(&l.joint.origin.rpy, &format!("origin of `{}`", l.name))?;
        if l.mass <= 0.0 {
            return Err(ModelError::NonPositiveMass {
                link: l.name.clone(),
                mass: l.mass,
            });
        }
        let inertia = inertia_matrix(&l.inertia);
        check_inertia(&l.name, &inertia)?;

        let is_root = parent_of[i].is_none();
        let (kind, axis) = match l.joint.kind {
            KindFile::Floating => {
                if !is_root {
                    return Err(ModelError::FloatingNotRoot(l.name.clone()));
                }
                (JointKind::Floating, Vector3::zeros())
            }
            KindFile::Revolute => {
                if is_root {
                    return Err(ModelError::RootNotFloating(l.name.clone()));
                }
                let a = l
                    .joint
                    .axis
                    .ok_or_else(|| ModelError::InvalidAxis(l.name.clone()))?;
                let a = Vector3::from(a);
                if !a.iter().all(|x| x.is_finite()) || (a.norm() - 1.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidAxis(l.name.clone()));
                }
                (JointKind::Revolute, a)
            }
        };
        let origin = Origin::from(l.joint.origin);
        links.push(LinkSpec {
            name: l.name.clone(),
            parent: parent_of[i].map(|p| new_index[p]),
            joint: JointSpec {
                kind,
                axis,
                origin,
                origin_pose: origin.pose(),
            },
            mass: l.mass,
            com: Vector3::from(l.com),
            inertia,
        });
    }

    let mut contacts = Vec::with_capacity(file.contacts.len());
    for (k, c) in file.contacts.iter().enumerate() {
        let link = *index
            .get(c.link.as_str())
            .ok_or_else(|| ModelError::UnknownContactLink {
                index: k,
                link: c.link.clone(),
            })?;
        finite(&c.origin.xyz, "contact origin")?;
        finite(&c.origin.rpy, "contact origin")?;
        let origin = Origin::from(c.origin);
        contacts.push(ContactFrame {
            link: new_index[link],
            origin,
            origin_pose: origin.pose(),
        });
    }

    Ok(RobotModel::from_parts(file.name, links, contacts, file.gravity))
}

/// Serializes a model to pretty-printed JSON. Floats use the shortest
/// representation that parses back to the same value.
pub fn serialize_model(model: &RobotModel) -> String {
    let links = model
        .links
        .iter()
        .map(|l| {
            let i = &l.inertia;
            LinkFile {
                name: l.name.clone(),
                parent: l.parent.map(|p| model.links[p].name.clone()),
                joint: JointFile {
                    kind: match l.joint.kind {
                        JointKind::Floating => KindFile::Floating,
                        JointKind::Revolute => KindFile::Revolute,
                    },
                    axis: match l.joint.kind {
                        JointKind::Floating => None,
                        JointKind::Revolute => Some([l.joint.axis.x, l.joint.axis.y, l.joint.axis.z]),
                    },
                    origin: l.joint.origin.into(),
                },
                mass: l.mass,
                com: [l.com.x, l.com.y, l.com.z],
                inertia: [i[(0, 0)], i[(1, 1)], i[(2, 2)], i[(0, 1)], i[(0, 2)], i[(1, 2)]],
            }
        })
        .collect();
    let contacts = model
        .contacts
        .iter()
        .map(|c| ContactFile {
            link: model.links[c.link].name.clone(),
            origin: c.origin.into(),
        })
        .collect();
    let file = ModelFile {
        name: model.name.clone(),
        gravity: model.gravity,
        links,
        contacts,
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
}
