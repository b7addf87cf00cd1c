//! Holonomic contact decomposition: wrench bases, contact maps and the
//! constrained / unconstrained Jacobians with their time derivatives.
//!
//! The adjoint used here is the block-diagonal `blkdiag(R_E, R_E)`. It
//! deliberately omits the translation coupling of the full twist adjoint, so
//! wrenches are referred to the end-effector origin.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelTerms;
use crate::so3;
use crate::{Error, Result};

/// Orthonormal split of the body wrench space into constrained (`B_c`) and
/// free (`B_u`) directions. Rows are `[force; torque]` in the body frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WrenchBases {
    bc: DMatrix<f64>,
    bu: DMatrix<f64>,
}

impl WrenchBases {
    /// Validates a pair of bases: `[B_c | B_u]` must be orthogonal.
    pub fn from_parts(bc: DMatrix<f64>, bu: DMatrix<f64>) -> Result<Self> {
        let nc = bc.ncols();
        if bc.nrows() != 6 || bu.nrows() != 6 || !(1..=6).contains(&nc) || bu.ncols() != 6 - nc {
            return Err(Error::Validation(format!(
                "wrench bases must be 6x{nc} and 6x{} (got 6x{} / {}x{})",
                6 - nc.min(6),
                bc.ncols(),
                bu.nrows(),
                bu.ncols()
            )));
        }
        let stacked = DMatrix::from_fn(6, 6, |r, c| if c < nc { bc[(r, c)] } else { bu[(r, c - nc)] });
        let err = (stacked.transpose() * &stacked - DMatrix::identity(6, 6)).amax();
        if err > 1e-12 {
            return Err(Error::Validation(format!(
                "wrench bases are not orthonormal (error {err:.2e})"
            )));
        }
        Ok(Self { bc, bu })
    }

    /// Builds `B_u` as the orthonormal complement of `bc` by Gram-Schmidt over
    /// the canonical directions.
    pub fn from_constrained(bc: DMatrix<f64>) -> Result<Self> {
        let nc = bc.ncols();
        if bc.nrows() != 6 || !(1..=6).contains(&nc) {
            return Err(Error::Validation("B_c must be 6 x n_c with 1 <= n_c <= 6".into()));
        }
        let mut basis: Vec<DVector<f64>> = bc.column_iter().map(|c| c.into_owned()).collect();
        let mut free = Vec::with_capacity(6 - nc);
        for k in 0..6 {
            if free.len() == 6 - nc {
                break;
            }
            let mut v = DVector::zeros(6);
            v[k] = 1.0;
            for b in &basis {
                let d = b.dot(&v);
                v -= b * d;
            }
            let norm = v.norm();
            if norm > 1e-8 {
                v /= norm;
                basis.push(v.clone());
                free.push(v);
            }
        }
        let bu = DMatrix::from_columns(&free);
        Self::from_parts(bc, bu)
    }

    /// Single normal force along the probe axis (body z). The column points
    /// out of the surface so a compressive contact force is positive.
    pub fn probe_axis() -> Self {
        let col = |k: usize, s: f64| {
            let mut v = DVector::zeros(6);
            v[k] = s;
            v
        };
        Self::from_parts(
            DMatrix::from_columns(&[col(2, -1.0)]),
            DMatrix::from_columns(&[col(0, 1.0), col(1, 1.0), col(3, 1.0), col(4, 1.0), col(5, 1.0)]),
        )
        .expect("canonical bases are orthonormal")
    }

    /// Frictional point contact: two tangential forces and the normal force,
    /// in that order.
    pub fn point_contact() -> Self {
        let col = |k: usize, s: f64| {
            let mut v = DVector::zeros(6);
            v[k] = s;
            v
        };
        Self::from_parts(
            DMatrix::from_columns(&[col(0, 1.0), col(1, 1.0), col(2, -1.0)]),
            DMatrix::from_columns(&[col(3, 1.0), col(4, 1.0), col(5, 1.0)]),
        )
        .expect("canonical bases are orthonormal")
    }

    pub fn n_c(&self) -> usize {
        self.bc.ncols()
    }

    pub fn constrained(&self) -> &DMatrix<f64> {
        &self.bc
    }

    pub fn unconstrained(&self) -> &DMatrix<f64> {
        &self.bu
    }
}

/// `blkdiag(R, R)`.
pub fn adjoint_blockdiag(r: &Matrix3<f64>) -> Result<DMatrix<f64>> {
    so3::validate_rotation(r, "adjoint argument")?;
    Ok(blockdiag(r))
}

fn blockdiag(r: &Matrix3<f64>) -> DMatrix<f64> {
    let mut ad = DMatrix::zeros(6, 6);
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad
}

/// Contact maps `G = Ad_{g^-1}^T B_c` and `G_u = Ad_{g^-1}^T B_u`.
pub fn contact_maps(bases: &WrenchBases, r_e: &Matrix3<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ad_inv_t = adjoint_blockdiag(&r_e.transpose())?.transpose();
    Ok((&ad_inv_t * &bases.bc, &ad_inv_t * &bases.bu))
}

#[derive(Clone, Debug)]
pub struct ConstrainedJacobians {
    pub jc: DMatrix<f64>,
    pub ju: DMatrix<f64>,
    pub jc_dot: DMatrix<f64>,
    pub ju_dot: DMatrix<f64>,
}

/// `J_c = G^T J`, `J_u = G_u^T J` and their derivatives, using
/// `R_E' = S(omega_E) R_E` for the rotation of the contact maps.
pub fn constrained_jacobians(
    j: &DMatrix<f64>,
    j_dot: &DMatrix<f64>,
    bases: &WrenchBases,
    r_e: &Matrix3<f64>,
    omega_e: &Vector3<f64>,
) -> Result<ConstrainedJacobians> {
    if j.nrows() != 6 || j_dot.shape() != j.shape() {
        return Err(Error::Dimension {
            what: "jacobian rows",
            expected: 6,
            got: j.nrows(),
        });
    }
    let (g, gu) = contact_maps(bases, r_e)?;
    let ad_dot = blockdiag(&(so3::skew(omega_e) * r_e));
    let g_dot = &ad_dot * &bases.bc;
    let gu_dot = &ad_dot * &bases.bu;
    Ok(ConstrainedJacobians {
        jc: g.transpose() * j,
        ju: gu.transpose() * j,
        jc_dot: g_dot.transpose() * j + g.transpose() * j_dot,
        ju_dot: gu_dot.transpose() * j + gu.transpose() * j_dot,
    })
}

/// Linearised friction cone `C` with `C f_c <= 0`.
///
/// `n_c = 1`: compression-only normal force. `n_c = 3`: four-facet pyramid
/// `|f_t,i| <= mu f_n` with the normal force last.
pub fn friction_cone_rows(n_c: usize, mu: f64) -> Result<DMatrix<f64>> {
    match n_c {
        1 => Ok(DMatrix::from_element(1, 1, -1.0)),
        3 => {
            if !(mu >= 0.0) {
                return Err(Error::Config("friction coefficient must be nonnegative".into()));
            }
            Ok(DMatrix::from_row_slice(
                4,
                3,
                &[
                    1.0, 0.0, -mu, //
                    -1.0, 0.0, -mu, //
                    0.0, 1.0, -mu, //
                    0.0, -1.0, -mu,
                ],
            ))
        }
        _ => Err(Error::Config(format!(
            "no friction cone linearisation for n_c = {n_c} (supported: 1, 3)"
        ))),
    }
}

/// Viscous friction on the free linear directions: `f_u = -k_v * v_t` where
/// `v_t` are the body-frame velocities along linear columns of `B_u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrictionModel {
    pub viscous: f64,
}

impl Default for FrictionModel {
    fn default() -> Self {
        Self { viscous: 5.0 }
    }
}

impl FrictionModel {
    pub fn force(&self, bases: &WrenchBases, free_velocity: &DVector<f64>) -> DVector<f64> {
        let bu = bases.unconstrained();
        DVector::from_fn(bu.ncols(), |j, _| {
            let lin = bu.fixed_view::<3, 1>(0, j).norm_squared();
            -self.viscous * lin * free_velocity[j]
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactKind {
    ProbeAxis,
    PointContact,
}

impl ContactKind {
    pub fn bases(self) -> WrenchBases {
        match self {
            ContactKind::ProbeAxis => WrenchBases::probe_axis(),
            ContactKind::PointContact => WrenchBases::point_contact(),
        }
    }
}

/// Contact quantities evaluated at one robot state.
#[derive(Clone, Debug)]
pub struct ContactSpec {
    pub bases: WrenchBases,
    pub g: DMatrix<f64>,
    pub g_u: DMatrix<f64>,
    pub jc: DMatrix<f64>,
    pub ju: DMatrix<f64>,
    pub jc_dot: DMatrix<f64>,
    pub ju_dot: DMatrix<f64>,
    pub friction_c: DMatrix<f64>,
    pub friction: FrictionModel,
}

impl ContactSpec {
    pub fn build(
        bases: &WrenchBases,
        terms: &ModelTerms,
        friction: FrictionModel,
        mu: f64,
    ) -> Result<Self> {
        let omega = terms.angular_velocity();
        let cj = constrained_jacobians(
            &terms.jacobian,
            &terms.jacobian_dot,
            bases,
            &terms.pose.rotation,
            &omega,
        )?;
        let (g, g_u) = contact_maps(bases, &terms.pose.rotation)?;
        Ok(Self {
            bases: bases.clone(),
            g,
            g_u,
            jc: cj.jc,
            ju: cj.ju,
            jc_dot: cj.jc_dot,
            ju_dot: cj.ju_dot,
            friction_c: friction_cone_rows(bases.n_c(), mu)?,
            friction,
        })
    }

    pub fn n_c(&self) -> usize {
        self.bases.n_c()
    }

    /// Modelled free-direction friction `f_u` at joint velocity `qdot`.
    pub fn friction_force(&self, qdot: &DVector<f64>) -> DVector<f64> {
        self.friction.force(&self.bases, &(&self.ju * qdot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_adjoint() {
        assert_relative_eq!(adjoint_blockdiag(&Matrix3::identity()).unwrap(), DMatrix::identity(6, 6));
        assert!(adjoint_blockdiag(&(Matrix3::identity() * 2.0)).is_err());
    }

    #[test]
    fn quarter_turn_maps_x_force_to_y() {
        let ad = adjoint_blockdiag(&so3::rot_z(std::f64::consts::FRAC_PI_2)).unwrap();
        let mut fx = DVector::zeros(6);
        fx[0] = 1.0;
        fx[3] = 1.0;
        let out = ad * fx;
        assert_relative_eq!(out, DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn contact_map_of_identity_rotation_is_the_basis() {
        let mut e1 = DMatrix::zeros(6, 1);
        e1[(0, 0)] = 1.0;
        let b = WrenchBases::from_constrained(e1.clone()).unwrap();
        let (g, gu) = contact_maps(&b, &Matrix3::identity()).unwrap();
        assert_eq!(g, e1);
        assert_relative_eq!((g.transpose() * gu).amax(), 0.0);
    }

    #[test]
    fn completion_yields_orthonormal_bases() {
        let bc = DMatrix::from_column_slice(6, 1, &[0.6, 0.0, 0.8, 0.0, 0.0, 0.0]);
        let b = WrenchBases::from_constrained(bc).unwrap();
        assert_eq!(b.unconstrained().ncols(), 5);
        assert!((b.constrained().transpose() * b.unconstrained()).amax() < 1e-15);
    }

    #[test]
    fn friction_cone_feasibility() {
        let c = friction_cone_rows(1, 0.5).unwrap();
        assert_eq!((&c * DVector::from_vec(vec![10.0]))[0], -10.0);
        assert!((&c * DVector::from_vec(vec![-1.0]))[0] > 0.0);
        let c3 = friction_cone_rows(3, 0.5).unwrap();
        let f = DVector::from_vec(vec![6.0, 0.0, 10.0]);
        assert!((&c3 * f).max() > 0.0, "6 > 0.5 * 10 must violate the pyramid");
        let f = DVector::from_vec(vec![4.0, -4.0, 10.0]);
        assert!((&c3 * f).max() <= 0.0);
        assert!(friction_cone_rows(2, 0.5).is_err());
    }

    #[test]
    fn zero_rates_give_zero_derivatives() {
        let j = DMatrix::from_fn(6, 4, |r, c| (r as f64 + 1.0) * 0.1 - c as f64 * 0.05);
        let jd = DMatrix::zeros(6, 4);
        let b = WrenchBases::probe_axis();
        let cj = constrained_jacobians(&j, &jd, &b, &so3::rot_x(0.3), &Vector3::zeros()).unwrap();
        assert_eq!(cj.jc_dot.amax(), 0.0);
        assert_eq!(cj.ju_dot.amax(), 0.0);
    }

    #[test]
    fn viscous_friction_acts_on_linear_directions_only() {
        let b = WrenchBases::probe_axis();
        let f = FrictionModel { viscous: 5.0 }.force(&b, &DVector::from_vec(vec![0.1, -0.2, 1.0, 1.0, 1.0]));
        assert_relative_eq!(f, DVector::from_vec(vec![-0.5, 1.0, 0.0, 0.0, 0.0]));
    }
}
