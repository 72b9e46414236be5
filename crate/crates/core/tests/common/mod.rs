#![allow(dead_code)]

use gaintuner_core::multibody::{Pose, RobotModel, RobotState};
use nalgebra::{DMatrix, DVector, Vector6};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub fn random_state(model: &RobotModel, rng: &mut ChaCha8Rng) -> RobotState {
    let n = model.n_joints();
    let mut u = |s: f64| rng.random_range(-s..s);
    let base = Pose::from_xyz_rpy([u(1.0), u(1.0), u(1.0)], [u(3.0), u(1.5), u(3.0)]);
    RobotState {
        base_pose: base,
        q: DVector::from_fn(n, |_, _| u(1.5)),
        base_velocity: Vector6::from_fn(|_, _| u(1.0)),
        qdot: DVector::from_fn(n, |_, _| u(2.0)),
    }
}

pub fn random_vector(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn random_orthogonal(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

/// `Q diag(λ) Qᵀ` with a random orthogonal `Q`.
pub fn with_spectrum(eig: &[f64], rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = random_orthogonal(eig.len(), rng);
    let d = DMatrix::from_diagonal(&DVector::from_row_slice(eig));
    let k = &q * d * q.transpose();
    (&k + k.transpose()) * 0.5
}

#[derive(Clone, Copy, Debug)]
pub enum TargetClass {
    Spd,
    Indefinite,
    NonSymmetric,
}

pub fn random_target(class: TargetClass, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    match class {
        TargetClass::Spd => {
            let eig: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..5.0)).collect();
            with_spectrum(&eig, rng)
        }
        TargetClass::Indefinite => {
            let mut eig: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            eig[0] = rng.random_range(0.5..3.0);
            eig[1] = -rng.random_range(0.5..3.0);
            with_spectrum(&eig, rng)
        }
        TargetClass::NonSymmetric => DMatrix::from_fn(m, m, |_, _| rng.random_range(-2.0..2.0)),
    }
}
