use super::{bin_index, DescriptorConfig, IndexedCloud, MIN_PATCH_NEIGHBORS};
use crate::error::{Error, Result};

/// Signed-distance, normal-deviation and tangent-radius histograms,
/// each normalized to unit mass, concatenated in that order.
pub fn lfsh(surface: &IndexedCloud, center: usize, cfg: &DescriptorConfig) -> Result<Vec<f64>> {
    let normals = surface.cloud().normals().ok_or(Error::MissingNormals)?;
    let r = cfg.support_radius;
    let hood = surface.neighbors(center, r);
    if hood.len() < MIN_PATCH_NEIGHBORS {
        return Err(Error::DegeneratePatch {
            index: center,
            neighbors: hood.len(),
        });
    }
    let (na, nb, nc) = cfg.lfsh_bins;
    let p = surface.cloud().point(center);
    let n = normals[center];
    let mut hist = vec![0.0; na + nb + nc];
    for &(j, _) in &hood {
        let delta = surface.cloud().point(j) - p;
        let depth = n.dot(&delta);
        let deviation = n.dot(&normals[j]).clamp(-1.0, 1.0);
        let radial = (delta - n * depth).norm();
        hist[bin_index(depth, -r, r, na)] += 1.0;
        hist[na + bin_index(deviation, -1.0, 1.0, nb)] += 1.0;
        hist[na + nb + bin_index(radial, 0.0, r, nc)] += 1.0;
    }
    let mass = hood.len() as f64;
    hist.iter_mut().for_each(|v| *v /= mass);
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, RigidTransform};
    use nalgebra::{Point3, Vector3};

    fn flat_patch() -> PointCloud {
        let mut pts = Vec::new();
        for i in -5i32..=5 {
            for j in -5i32..=5 {
                pts.push(Point3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let n = pts.len();
        PointCloud::with_normals(pts, vec![Vector3::z(); n]).unwrap()
    }

    #[test]
    fn tangent_plane_patch() {
        let surface = IndexedCloud::new(flat_patch());
        let cfg = DescriptorConfig::with_support_radius(0.45);
        let d = lfsh(&surface, 60, &cfg).unwrap();
        let (na, nb, _) = cfg.lfsh_bins;
        assert_eq!(d.len(), 30);
        // depth 0 lands in the bin starting at the middle of [-r, r]
        assert_eq!(d[na / 2], 1.0);
        assert_eq!(d[na + nb - 1], 1.0);
    }

    #[test]
    fn sub_histograms_normalized_and_invariant() {
        let mut pts = Vec::new();
        for i in -6i32..=6 {
            for j in -6i32..=6 {
                // Jittered off the grid so no sample sits on a bin edge.
                let (x, y) = (
                    i as f64 * 0.1 + 0.013 * ((7 * j + i) as f64).sin(),
                    j as f64 * 0.1 + 0.011 * ((5 * i - j) as f64).cos(),
                );
                pts.push(Point3::new(x, y, 0.2 * (3.0 * x).sin() * y));
            }
        }
        let cloud = crate::geometry::estimate_normals(&PointCloud::new(pts), 0.25).unwrap();
        let cfg = DescriptorConfig::with_support_radius(0.5);
        let d = lfsh(&IndexedCloud::new(cloud.clone()), 84, &cfg).unwrap();
        let (na, nb, _) = cfg.lfsh_bins;
        for part in [&d[..na], &d[na..na + nb], &d[na + nb..]] {
            assert!((part.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 1.0, 0.2), 2.0, Vector3::new(3.0, 0.0, 1.0));
        let moved = lfsh(&IndexedCloud::new(cloud.transformed(&t)), 84, &cfg).unwrap();
        for (a, b) in d.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_normals() {
        let surface = IndexedCloud::new(PointCloud::new(flat_patch().points().to_vec()));
        let cfg = DescriptorConfig::with_support_radius(0.45);
        assert!(matches!(lfsh(&surface, 60, &cfg), Err(Error::MissingNormals)));
    }
}
