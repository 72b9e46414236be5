//! Momentum-based balancing control for floating-base robots and automatic
//! gain tuning of the closed-loop joint dynamics.

pub mod error;
pub mod gainfit;
pub mod io;
pub mod balancer;
pub mod dynamics;
pub mod linalg;
pub mod linearizer;
pub mod models;
pub mod multibody;
pub mod simulator;
pub mod spdtrack;

pub use error::{Error, Result};
