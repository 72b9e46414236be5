use thiserror::Error;

use crate::multibody::ModelError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown frame `{0}`")]
    UnknownFrame(String),

    #[error("{what} is ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { what: &'static str, cond: f64 },

    #[error("{what} is rank deficient: rank {rank}, need {needed}")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        needed: usize,
    },

    #[error("contact constraints infeasible: row {row} violated by {violation:.3e}")]
    Infeasible { row: usize, violation: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("state is not an equilibrium: closed-loop joint acceleration norm {residual:.3e}")]
    NotEquilibrium { residual: f64 },

    #[error("cannot embed base state through the contacts: residual {residual:.3e}")]
    Embedding { residual: f64 },

    #[error("singular constrained-dynamics system (contact Jacobian lost rank)")]
    SingularKkt,

    #[error("simulation diverged at t = {t}: {detail}")]
    Diverged { t: f64, detail: String },

    #[error("unstable closed loop: spectral abscissa {abscissa:.6e}")]
    Unstable { abscissa: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
