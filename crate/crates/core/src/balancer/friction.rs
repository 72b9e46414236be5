//! Linearized contact-stability constraints `C_raw f ≤ b_raw`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    pub mu: f64,
    pub fz_min: f64,
    /// Half sizes `(d_x, d_y)` of the center-of-pressure rectangle, per contact.
    pub cop: Vec<[f64; 2]>,
    /// Number of facets of the inscribed friction pyramid.
    pub facets: usize,
    /// Tightening subtracted from every right-hand side.
    #[serde(default)]
    pub margin: f64,
}

impl FrictionParams {
    pub fn new(mu: f64, fz_min: f64, cop: [f64; 2], n_contacts: usize, facets: usize) -> Self {
        Self {
            mu,
            fz_min,
            cop: vec![cop; n_contacts],
            facets,
            margin: 0.0,
        }
    }

    pub fn validate(&self, n_contacts: usize) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Invalid("friction coefficient must be positive".into()));
        }
        if !(self.fz_min >= 0.0) {
            return Err(Error::Invalid("minimum normal force must be nonnegative".into()));
        }
        if self.facets < 4 {
            return Err(Error::Invalid("friction pyramid needs at least 4 facets".into()));
        }
        if self.cop.len() != n_contacts {
            return Err(Error::DimensionMismatch {
                what: "center-of-pressure bounds",
                expected: n_contacts,
                got: self.cop.len(),
            });
        }
        if self.cop.iter().flatten().any(|d| !(*d >= 0.0)) {
            return Err(Error::Invalid("center-of-pressure bounds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rows_per_contact(&self) -> usize {
        1 + self.facets + 4
    }

    /// Constraint rows on stacked world-frame contact wrenches. Each contact
    /// wrench is rotated into its contact frame (`rotations[k]`) first.
    pub fn constraints(&self, rotations: &[Matrix3<f64>]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let nc = rotations.len();
        self.validate(nc)?;
        let rows = self.rows_per_contact();
        let mut c = DMatrix::zeros(rows * nc, 6 * nc);
        let mut b = DVector::zeros(rows * nc);
        let shrink = (PI / self.facets as f64).cos();
        for (k, rot) in rotations.iter().enumerate() {
            // Local rows act on (f_local, τ_local).
            let mut local = DMatrix::zeros(rows, 6);
            let mut rhs = DVector::zeros(rows);
            local[(0, 2)] = -1.0;
            rhs[0] = -self.fz_min;
            for i in 0..self.facets {
                let th = 2.0 * PI * i as f64 / self.facets as f64;
                local[(1 + i, 0)] = th.cos();
                local[(1 + i, 1)] = th.sin();
                local[(1 + i, 2)] = -self.mu * shrink;
            }
            let [dx, dy] = self.cop[k];
            let r0 = 1 + self.facets;
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                local[(r0 + s, 3)] = sign;
                local[(r0 + s, 2)] = -dy;
                local[(r0 + 2 + s, 4)] = sign;
                local[(r0 + 2 + s, 2)] = -dx;
            }
            let rt = rot.transpose();
            let mut world_to_local = DMatrix::zeros(6, 6);
            for r in 0..3 {
                for cidx in 0..3 {
                    world_to_local[(r, cidx)] = rt[(r, cidx)];
                    world_to_local[(3 + r, 3 + cidx)] = rt[(r, cidx)];
                }
            }
            c.view_mut((rows * k, 6 * k), (rows, 6))
                .copy_from(&(local * world_to_local));
            b.rows_mut(rows * k, rows).copy_from(&rhs);
        }
        b.add_scalar_mut(-self.margin);
        Ok((c, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn facets_are_inscribed() {
        let p = FrictionParams::new(0.5, 0.0, [0.1, 0.05], 1, 4);
        let (c, b) = p.constraints(&[Matrix3::identity()]).unwrap();
        // Pure normal load satisfies everything.
        let f = DVector::from_row_slice(&[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        assert!((&c * &f - &b).max() <= 0.0);
        // Tangential force on the circle μ f_z along a facet normal violates.
        let f = DVector::from_row_slice(&[5.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        assert!((&c * &f - &b).max() > 0.0);
        // A tangential force strictly inside the inscribed polygon is fine.
        let f = DVector::from_row_slice(&[3.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        assert!((&c * &f - &b).max() <= 0.0);
    }

    #[test]
    fn cop_rows_bound_moments() {
        let p = FrictionParams::new(1.0, 0.0, [0.1, 0.05], 1, 8);
        let (c, b) = p.constraints(&[Matrix3::identity()]).unwrap();
        let ok = DVector::from_row_slice(&[0.0, 0.0, 10.0, 0.45, -0.95, 0.0]);
        assert!((&c * &ok - &b).max() <= 0.0);
        let bad = DVector::from_row_slice(&[0.0, 0.0, 10.0, 0.55, 0.0, 0.0]);
        assert!((&c * &bad - &b).max() > 0.0);
    }

    #[test]
    fn validation() {
        assert!(FrictionParams::new(0.0, 0.0, [0.1, 0.1], 1, 4).validate(1).is_err());
        assert!(FrictionParams::new(0.5, 0.0, [0.1, 0.1], 1, 3).validate(1).is_err());
        assert!(FrictionParams::new(0.5, 0.0, [0.1, 0.1], 2, 4).validate(1).is_err());
    }
}
