//! Point clouds, rigid motions, nearest-neighbor search and the basic
//! per-point estimates (resolution, normals, keypoints) everything else uses.

mod kdtree;
mod transform;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub use kdtree::SpatialIndex;
pub(crate) use transform::{check_rotation, project_to_rotation};
pub use transform::RigidTransform;

const NORMAL_TOL: f64 = 1e-6;

/// Points with optional unit normals and a cached resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
    resolution: Option<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            normals: None,
            resolution: None,
        }
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let mut cloud = Self::new(points);
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3<f64> {
        &self.points[i]
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Replaces the normals; each must be unit length within 1e-6.
    pub fn set_normals(&mut self, normals: Vec<Vector3<f64>>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !((n.norm() - 1.0).abs() <= NORMAL_TOL))
        {
            return Err(Error::InvalidInput(format!(
                "normal {i} has norm {}, expected 1",
                normals[i].norm()
            )));
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn clear_normals(&mut self) {
        self.normals = None;
    }

    pub fn resolution(&self) -> Option<f64> {
        self.resolution
    }

    pub fn set_resolution(&mut self, pr: f64) -> Result<()> {
        if !(pr > 0.0 && pr.is_finite()) {
            return Err(Error::InvalidInput(format!("resolution must be > 0, got {pr}")));
        }
        self.resolution = Some(pr);
        Ok(())
    }

    /// Computes the resolution and caches it on the cloud.
    pub fn update_resolution(&mut self) -> Result<f64> {
        let pr = compute_resolution(self)?;
        self.resolution = Some(pr);
        Ok(pr)
    }

    /// Applies `t` to every point and normal. Resolution metadata is kept.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
            resolution: self.resolution,
        }
    }

    /// New cloud holding the given points (in the given order).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            resolution: self.resolution,
        }
    }

    pub fn spatial_index(&self) -> SpatialIndex {
        SpatialIndex::build(&self.points)
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    cloud.transformed(t)
}

/// Sum of nearest-distinct-neighbor distances and the point count.
fn nn_distance_sum(cloud: &PointCloud) -> Result<(f64, usize)> {
    if cloud.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "resolution needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    let index = cloud.spatial_index();
    let sum = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .nearest_excluding(p, i)
                .map(|(_, d)| d)
                .unwrap_or(0.0)
        })
        .sum::<f64>();
    Ok((sum, cloud.len()))
}

/// Mean distance from each point to its nearest other point.
pub fn compute_resolution(cloud: &PointCloud) -> Result<f64> {
    let (sum, n) = nn_distance_sum(cloud)?;
    Ok(sum / n as f64)
}

/// Resolution averaged over every point of every cloud in a dataset.
pub fn dataset_resolution<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for cloud in clouds {
        let (s, n) = nn_distance_sum(cloud)?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    Ok(total / count as f64)
}

/// Eigen decomposition of a symmetric 3×3 matrix, eigenvalues ascending.
pub(crate) fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|k| eig.eigenvalues[k]);
    let vecs = order.map(|k| eig.eigenvectors.column(k).into_owned().normalize());
    (vals, vecs)
}

/// Normal estimation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalConfig {
    pub radius: f64,
    pub viewpoint: Point3<f64>,
}

impl NormalConfig {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            viewpoint: Point3::origin(),
        }
    }
}

/// Per-point normals from the covariance of neighbors within `radius`,
/// oriented toward the origin.
pub fn estimate_normals(cloud: &PointCloud, radius: f64) -> Result<PointCloud> {
    estimate_normals_with(cloud, &NormalConfig::new(radius))
}

pub fn estimate_normals_with(cloud: &PointCloud, cfg: &NormalConfig) -> Result<PointCloud> {
    if !(cfg.radius > 0.0) {
        return Err(Error::Config(format!("normal radius must be > 0, got {}", cfg.radius)));
    }
    let index = cloud.spatial_index();
    let mut normals = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let hood = index.within_radius(p, cfg.radius);
        let others = hood.iter().filter(|(j, _)| *j != i).count();
        if others < 3 {
            return Err(Error::DegenerateNeighborhood {
                index: i,
                neighbors: others,
            });
        }
        let mean = hood
            .iter()
            .fold(Vector3::zeros(), |acc, &(j, _)| acc + cloud.point(j).coords)
            / hood.len() as f64;
        let cov = hood.iter().fold(Matrix3::zeros(), |acc, &(j, _)| {
            let d = cloud.point(j).coords - mean;
            acc + d * d.transpose()
        });
        let (_, vecs) = sorted_eigen(&cov);
        let mut n = vecs[0];
        if n.dot(&(cfg.viewpoint - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    let mut out = cloud.clone();
    out.set_normals(normals)?;
    Ok(out)
}

/// Voxel-grid keypoints: one per occupied cell of edge `leaf`, namely the
/// point nearest the cell's centroid. Indices come back sorted.
pub fn uniform_sample_keypoints(cloud: &PointCloud, leaf: f64) -> Result<Vec<usize>> {
    if !(leaf > 0.0) {
        return Err(Error::Config(format!("leaf size must be > 0, got {leaf}")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = [0, 1, 2].map(|a| (p[a] / leaf).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut picked: Vec<usize> = cells
        .values()
        .map(|members| {
            let centroid = members
                .iter()
                .fold(Vector3::zeros(), |acc, &i| acc + cloud.point(i).coords)
                / members.len() as f64;
            let mut best = (f64::INFINITY, usize::MAX);
            for &i in members {
                let d = (cloud.point(i).coords - centroid).norm_squared();
                if d < best.0 || (d == best.0 && i < best.1) {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Sphere of `n` nearly uniform points (Fibonacci lattice). Used by tests.
#[doc(hidden)]
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Point3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Point3::new(r * phi.cos() * radius, y * radius, r * phi.sin() * radius)
        })
        .collect()
}
