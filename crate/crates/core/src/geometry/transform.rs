use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

const RIGID_TOL: f64 = 1e-9;

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 (tolerance 1e-9 per entry).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, RIGID_TOL)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

pub(crate) fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("rotation is not finite".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > tol {
        return Err(Error::Validation(format!(
            "rotation is not orthonormal (max |RᵀR - I| = {err:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::Validation(format!(
            "rotation has determinant {det}, expected +1"
        )));
    }
    Ok(())
}

/// Nearest proper rotation to `m` in the Frobenius sense.
pub(crate) fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}
