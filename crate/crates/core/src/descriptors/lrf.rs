use nalgebra::{Matrix3, Point3, Vector3};

use super::IndexedCloud;
use crate::error::{Error, Result};
use crate::geometry::sorted_eigen;

/// Minimum neighbor count (center excluded) for a usable local patch.
pub const MIN_PATCH_NEIGHBORS: usize = 5;

const AMBIGUITY_TOL: f64 = 1e-6;

/// Orthonormal frame attached to a keypoint. Rows of `axes` are x, y, z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalReferenceFrame {
    pub origin: Point3<f64>,
    pub axes: Matrix3<f64>,
    /// Set when two covariance eigenvalues nearly coincide, so an axis is
    /// not repeatable.
    pub ambiguous: bool,
}

impl LocalReferenceFrame {
    pub fn x_axis(&self) -> Vector3<f64> {
        self.axes.row(0).transpose()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.axes.row(1).transpose()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.axes.row(2).transpose()
    }

    /// Coordinates of `q` in this frame.
    pub fn to_local(&self, q: &Point3<f64>) -> Vector3<f64> {
        self.axes * (q - self.origin)
    }
}

/// Majority vote on the sign of the projections of `offsets` onto `axis`,
/// ties decided by the weighted sum. Returns +1 when more offsets project
/// positively.
fn projection_sign(offsets: &[(Vector3<f64>, f64)], axis: &Vector3<f64>) -> f64 {
    let mut pos = 0usize;
    let mut neg = 0usize;
    let mut weighted = 0.0;
    for (d, w) in offsets {
        let p = d.dot(axis);
        if p > 0.0 {
            pos += 1;
        } else if p < 0.0 {
            neg += 1;
        }
        weighted += w * p;
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => {
            if weighted < 0.0 {
                -1.0
            } else {
                1.0
            }
        }
    }
}

/// Weighted-covariance frame at `center` over neighbors within `radius`.
///
/// z is the least-variance direction flipped so most neighbor offsets lie on
/// its non-positive side; x is the most-variance direction flipped so most
/// offsets lie on its positive side; y = z × x.
pub fn compute_lrf(
    surface: &IndexedCloud,
    center: usize,
    radius: f64,
) -> Result<LocalReferenceFrame> {
    let hood = surface.neighbors(center, radius);
    if hood.len() < MIN_PATCH_NEIGHBORS {
        return Err(Error::DegeneratePatch {
            index: center,
            neighbors: hood.len(),
        });
    }
    let p = *surface.cloud().point(center);
    let offsets: Vec<(Vector3<f64>, f64)> = hood
        .iter()
        .map(|&(j, d)| (surface.cloud().point(j) - p, radius - d))
        .collect();
    let total: f64 = offsets.iter().map(|(_, w)| w).sum();
    let mut cov = offsets.iter().fold(Matrix3::zeros(), |acc, (d, w)| {
        acc + *w * d * d.transpose()
    });
    if total > 0.0 {
        cov /= total;
    }
    let (vals, vecs) = sorted_eigen(&cov);
    let near_one = |a: f64, b: f64| {
        let hi = a.abs().max(b.abs());
        hi == 0.0 || (a - b).abs() / hi <= AMBIGUITY_TOL
    };
    let ambiguous = near_one(vals[0], vals[1]) || near_one(vals[1], vals[2]);

    let mut z = vecs[0];
    if projection_sign(&offsets, &z) > 0.0 {
        z = -z;
    }
    let mut x = vecs[2] - z * vecs[2].dot(&z);
    x.normalize_mut();
    if projection_sign(&offsets, &x) < 0.0 {
        x = -x;
    }
    let y = z.cross(&x);
    let axes = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(LocalReferenceFrame {
        origin: p,
        axes,
        ambiguous,
    })
}
