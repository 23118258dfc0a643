//! Local reference frames and hand-crafted local descriptors.
//!
//! Three descriptors are built in (`lfsh`, `spin_image`, `rcs`). Any other
//! descriptor enters through [`ExternalDescriptor`] tables so it can still be
//! fused.

mod external;
mod lfsh;
mod lrf;
mod rcs;
mod spin_image;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex};

pub use external::ExternalDescriptor;
pub use lfsh::lfsh;
pub use lrf::{compute_lrf, LocalReferenceFrame, MIN_PATCH_NEIGHBORS};
pub use rcs::rcs_signature;
pub use spin_image::spin_image;

pub const LFSH: &str = "lfsh";
pub const SPIN_IMAGE: &str = "spin_image";
pub const RCS: &str = "rcs";

pub const LFSH_DIM: usize = 30;
pub const SPIN_IMAGE_DIM: usize = 153;
pub const RCS_DIM: usize = 72;

/// Support radius in resolution units for object-scale data.
pub const OBJECT_SUPPORT_PR: f64 = 15.0;
/// Support radius in resolution units for indoor scenes.
pub const INDOOR_SUPPORT_PR: f64 = 60.0;

/// A cloud together with its kd-tree.
#[derive(Debug, Clone)]
pub struct IndexedCloud {
    cloud: PointCloud,
    index: SpatialIndex,
}

impl IndexedCloud {
    pub fn new(cloud: PointCloud) -> Self {
        let index = cloud.spatial_index();
        Self { cloud, index }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    /// Neighbors of point `center` within `radius`, the center excluded,
    /// sorted by index.
    pub fn neighbors(&self, center: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut hood = self.index.within_radius(self.cloud.point(center), radius);
        hood.retain(|(j, _)| *j != center);
        hood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorConfig {
    pub support_radius: f64,
    /// (signed distance, normal deviation, tangent radius) bin counts.
    pub lfsh_bins: (usize, usize, usize),
    pub si_radial_bins: usize,
    pub si_elevation_bins: usize,
    pub rcs_views: usize,
    pub rcs_sectors: usize,
}

impl DescriptorConfig {
    pub fn with_support_radius(support_radius: f64) -> Self {
        Self {
            support_radius,
            lfsh_bins: (10, 15, 5),
            si_radial_bins: 9,
            si_elevation_bins: 17,
            rcs_views: 6,
            rcs_sectors: 12,
        }
    }

    /// Object-scale default, 15 pr.
    pub fn for_resolution(pr: f64) -> Self {
        Self::with_support_radius(OBJECT_SUPPORT_PR * pr)
    }

    /// Indoor-scale default, 60 pr.
    pub fn indoor(pr: f64) -> Self {
        Self::with_support_radius(INDOOR_SUPPORT_PR * pr)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.lfsh_bins;
        if !(self.support_radius > 0.0 && self.support_radius.is_finite()) {
            return Err(Error::Config(format!(
                "support radius must be > 0, got {}",
                self.support_radius
            )));
        }
        if a == 0 || b == 0 || c == 0 || a + b + c != LFSH_DIM {
            return Err(Error::Config(format!(
                "lfsh bins ({a}, {b}, {c}) must be positive and sum to {LFSH_DIM}"
            )));
        }
        if self.si_radial_bins * self.si_elevation_bins != SPIN_IMAGE_DIM {
            return Err(Error::Config(format!(
                "spin image grid {}x{} must hold {SPIN_IMAGE_DIM} bins",
                self.si_radial_bins, self.si_elevation_bins
            )));
        }
        if self.rcs_views * self.rcs_sectors != RCS_DIM {
            return Err(Error::Config(format!(
                "rcs layout {}x{} must hold {RCS_DIM} values",
                self.rcs_views, self.rcs_sectors
            )));
        }
        Ok(())
    }
}

/// Uniform bin of `v` over `[lo, hi]`, clamped to the valid range.
pub(crate) fn bin_index(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    let t = (v - lo) / (hi - lo) * n as f64;
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(n - 1)
    }
}

/// One descriptor vector tagged with the descriptor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub descriptor_id: String,
    pub values: Vec<f64>,
}

/// Something that describes the neighborhood of a point as a fixed-length
/// vector.
pub trait LocalDescriptor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn compute(&self, surface: &IndexedCloud, center: usize) -> Result<Vec<f64>>;

    fn describe(&self, surface: &IndexedCloud, center: usize) -> Result<FeatureVector> {
        Ok(FeatureVector {
            descriptor_id: self.id().to_string(),
            values: self.compute(surface, center)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinKind {
    Lfsh,
    SpinImage,
    Rcs,
}

#[derive(Debug, Clone)]
pub struct Builtin {
    kind: BuiltinKind,
    cfg: DescriptorConfig,
}

impl Builtin {
    pub fn new(kind: BuiltinKind, cfg: DescriptorConfig) -> Self {
        Self { kind, cfg }
    }

    pub fn from_name(name: &str, cfg: &DescriptorConfig) -> Option<Self> {
        let kind = match name {
            LFSH => BuiltinKind::Lfsh,
            SPIN_IMAGE | "si" => BuiltinKind::SpinImage,
            RCS => BuiltinKind::Rcs,
            _ => return None,
        };
        Some(Self::new(kind, cfg.clone()))
    }
}

impl LocalDescriptor for Builtin {
    fn id(&self) -> &str {
        match self.kind {
            BuiltinKind::Lfsh => LFSH,
            BuiltinKind::SpinImage => SPIN_IMAGE,
            BuiltinKind::Rcs => RCS,
        }
    }

    fn dim(&self) -> usize {
        match self.kind {
            BuiltinKind::Lfsh => LFSH_DIM,
            BuiltinKind::SpinImage => SPIN_IMAGE_DIM,
            BuiltinKind::Rcs => RCS_DIM,
        }
    }

    fn compute(&self, surface: &IndexedCloud, center: usize) -> Result<Vec<f64>> {
        match self.kind {
            BuiltinKind::Lfsh => lfsh(surface, center, &self.cfg),
            BuiltinKind::SpinImage => spin_image(surface, center, &self.cfg),
            BuiltinKind::Rcs => rcs_signature(surface, center, &self.cfg),
        }
    }
}

impl LocalDescriptor for ExternalDescriptor {
    fn id(&self) -> &str {
        ExternalDescriptor::id(self)
    }

    fn dim(&self) -> usize {
        ExternalDescriptor::dim(self)
    }

    fn compute(&self, _surface: &IndexedCloud, center: usize) -> Result<Vec<f64>> {
        self.get(center)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingExternalRow {
                id: self.id().to_string(),
                index: center,
            })
    }
}

/// Resolves descriptor names for one cloud: built-ins plus any external
/// tables registered for that cloud.
#[derive(Clone)]
pub struct DescriptorRegistry {
    cfg: DescriptorConfig,
    external: BTreeMap<String, Arc<ExternalDescriptor>>,
}

impl DescriptorRegistry {
    pub fn new(cfg: DescriptorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            external: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &DescriptorConfig {
        &self.cfg
    }

    pub fn register_external(&mut self, table: ExternalDescriptor) -> Result<()> {
        if Builtin::from_name(table.id(), &self.cfg).is_some() {
            return Err(Error::Config(format!(
                "external descriptor `{}` shadows a built-in",
                table.id()
            )));
        }
        self.external.insert(table.id().to_string(), Arc::new(table));
        Ok(())
    }

    pub fn resolve(&self, names: &[String]) -> Result<Vec<Arc<dyn LocalDescriptor>>> {
        if names.is_empty() {
            return Err(Error::Config("descriptor list is empty".into()));
        }
        names
            .iter()
            .map(|name| {
                if let Some(b) = Builtin::from_name(name, &self.cfg) {
                    Ok(Arc::new(b) as Arc<dyn LocalDescriptor>)
                } else if let Some(ext) = self.external.get(name) {
                    Ok(ext.clone() as Arc<dyn LocalDescriptor>)
                } else {
                    Err(Error::Config(format!("unknown descriptor `{name}`")))
                }
            })
            .collect()
    }
}

/// Declared width of a descriptor name, if it is a built-in.
pub fn builtin_dim(name: &str) -> Option<usize> {
    match name {
        LFSH => Some(LFSH_DIM),
        SPIN_IMAGE | "si" => Some(SPIN_IMAGE_DIM),
        RCS => Some(RCS_DIM),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorInfo {
    pub id: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub keypoint: usize,
    pub reason: String,
}

/// Per-keypoint descriptor tuples, all built from the same descriptor list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    descriptors: Vec<DescriptorInfo>,
    keypoints: Vec<usize>,
    tuples: Vec<Vec<Vec<f64>>>,
    excluded: Vec<Exclusion>,
}

impl FeatureSet {
    pub fn new(descriptors: Vec<DescriptorInfo>) -> Self {
        Self {
            descriptors,
            keypoints: Vec::new(),
            tuples: Vec::new(),
            excluded: Vec::new(),
        }
    }

    pub fn push(&mut self, keypoint: usize, tuple: Vec<Vec<f64>>) -> Result<()> {
        if tuple.len() != self.descriptors.len() {
            return Err(Error::Shape(format!(
                "tuple holds {} descriptors, expected {}",
                tuple.len(),
                self.descriptors.len()
            )));
        }
        for (i, (v, info)) in tuple.iter().zip(&self.descriptors).enumerate() {
            if v.len() != info.dim {
                return Err(Error::Shape(format!(
                    "descriptor {i} (`{}`) has {} values, expected {}",
                    info.id,
                    v.len(),
                    info.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "descriptor `{}` at keypoint {keypoint} is not finite",
                    info.id
                )));
            }
        }
        self.keypoints.push(keypoint);
        self.tuples.push(tuple);
        Ok(())
    }

    pub fn descriptors(&self) -> &[DescriptorInfo] {
        &self.descriptors
    }

    pub fn dims(&self) -> Vec<usize> {
        self.descriptors.iter().map(|d| d.dim).collect()
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoints(&self) -> &[usize] {
        &self.keypoints
    }

    pub fn tuple(&self, i: usize) -> &[Vec<f64>] {
        &self.tuples[i]
    }

    pub fn tuples(&self) -> &[Vec<Vec<f64>>] {
        &self.tuples
    }

    pub fn feature_vectors(&self, i: usize) -> Vec<FeatureVector> {
        self.descriptors
            .iter()
            .zip(&self.tuples[i])
            .map(|(d, v)| FeatureVector {
                descriptor_id: d.id.clone(),
                values: v.clone(),
            })
            .collect()
    }

    /// Position of a keypoint (point index) within the set.
    pub fn position_of(&self, keypoint: usize) -> Option<usize> {
        self.keypoints.iter().position(|&k| k == keypoint)
    }

    /// Map from point index to row.
    pub fn lookup(&self) -> BTreeMap<usize, usize> {
        self.keypoints
            .iter()
            .enumerate()
            .map(|(row, &k)| (k, row))
            .collect()
    }

    pub fn excluded(&self) -> &[Exclusion] {
        &self.excluded
    }
}

/// Describes every keypoint with every descriptor, in list order.
/// Keypoints where any descriptor fails are left out and reported in
/// [`FeatureSet::excluded`].
pub fn extract_feature_set(
    surface: &IndexedCloud,
    keypoints: &[usize],
    descriptors: &[Arc<dyn LocalDescriptor>],
) -> Result<FeatureSet> {
    if descriptors.is_empty() {
        return Err(Error::Config("descriptor list is empty".into()));
    }
    if let Some(&k) = keypoints.iter().find(|&&k| k >= surface.cloud().len()) {
        return Err(Error::InvalidInput(format!(
            "keypoint {k} out of range for a cloud of {} points",
            surface.cloud().len()
        )));
    }
    let info = descriptors
        .iter()
        .map(|d| DescriptorInfo {
            id: d.id().to_string(),
            dim: d.dim(),
        })
        .collect();
    let results: Vec<Result<Vec<Vec<f64>>>> = keypoints
        .par_iter()
        .map(|&k| descriptors.iter().map(|d| d.compute(surface, k)).collect())
        .collect();
    let mut set = FeatureSet::new(info);
    for (&k, res) in keypoints.iter().zip(results) {
        match res.and_then(|tuple| set.push(k, tuple)) {
            Ok(()) => {}
            Err(e) => set.excluded.push(Exclusion {
                keypoint: k,
                reason: e.to_string(),
            }),
        }
    }
    Ok(set)
}

/// Name-based convenience wrapper over [`extract_feature_set`].
pub fn extract_by_name(
    surface: &IndexedCloud,
    keypoints: &[usize],
    names: &[String],
    registry: &DescriptorRegistry,
) -> Result<FeatureSet> {
    let descriptors = registry.resolve(names)?;
    extract_feature_set(surface, keypoints, &descriptors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{estimate_normals, fibonacci_sphere, RigidTransform};
    use nalgebra::{Point3, Vector3};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bumpy_sphere(n: usize) -> PointCloud {
        let pts = fibonacci_sphere(n, 1.0)
            .into_iter()
            .map(|p| {
                let u = p.coords;
                let r = 1.0 + 0.08 * (4.0 * u.x).sin() * (3.0 * u.y).cos() + 0.05 * (5.0 * u.z).sin();
                Point3::from(u * r)
            })
            .collect();
        estimate_normals(&PointCloud::new(pts), 0.2).unwrap()
    }

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_invariants() {
        let mut cfg = DescriptorConfig::with_support_radius(1.0);
        cfg.validate().unwrap();
        cfg.lfsh_bins = (10, 10, 5);
        assert!(cfg.validate().is_err());
        let mut cfg = DescriptorConfig::with_support_radius(1.0);
        cfg.si_radial_bins = 10;
        assert!(cfg.validate().is_err());
        assert_eq!(DescriptorConfig::for_resolution(0.1).support_radius, 15.0 * 0.1);
        assert_eq!(DescriptorConfig::indoor(0.1).support_radius, 60.0 * 0.1);
    }

    #[test]
    fn lfsh_set_shape() {
        let surface = IndexedCloud::new(bumpy_sphere(1500));
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.4)).unwrap();
        let kps: Vec<usize> = (0..10).map(|i| i * 100).collect();
        let set = extract_by_name(&surface, &kps, &names(&["lfsh"]), &reg).unwrap();
        assert_eq!(set.len(), 10);
        assert!(set.tuples().iter().all(|t| t.len() == 1 && t[0].len() == 30));
    }

    #[test]
    fn descriptor_order_is_kept() {
        let surface = IndexedCloud::new(bumpy_sphere(1500));
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.4)).unwrap();
        let set = extract_by_name(&surface, &[3, 700], &names(&["spin_image", "lfsh"]), &reg).unwrap();
        assert_eq!(set.dims(), vec![153, 30]);
        assert_eq!(set.feature_vectors(1)[0].descriptor_id, "spin_image");
    }

    #[test]
    fn sparse_keypoint_excluded() {
        let mut pts = fibonacci_sphere(800, 1.0);
        // An isolated point far from everything with two close neighbors.
        pts.push(Point3::new(5.0, 0.0, 0.0));
        pts.push(Point3::new(5.01, 0.0, 0.0));
        pts.push(Point3::new(5.0, 0.01, 0.0));
        let n = pts.len();
        let normals = (0..n).map(|_| Vector3::z()).collect();
        let cloud = PointCloud::with_normals(pts, normals).unwrap();
        let surface = IndexedCloud::new(cloud);
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.3)).unwrap();
        let set = extract_by_name(&surface, &[0, 10, n - 3], &names(&["lfsh"]), &reg).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.excluded().len(), 1);
        assert_eq!(set.excluded()[0].keypoint, n - 3);
    }

    #[test]
    fn unknown_name_is_config_error() {
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.3)).unwrap();
        assert!(matches!(reg.resolve(&names(&["shot"])), Err(Error::Config(_))));
    }

    #[test]
    fn external_descriptor_participates() {
        let surface = IndexedCloud::new(bumpy_sphere(600));
        let mut reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.4)).unwrap();
        let mut shot = ExternalDescriptor::new("shot", 4);
        shot.insert(5, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        reg.register_external(shot).unwrap();
        let set = extract_by_name(&surface, &[5, 6], &names(&["lfsh", "shot"]), &reg).unwrap();
        assert_eq!(set.keypoints(), &[5]);
        assert_eq!(set.tuple(0)[1], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(set.excluded()[0].keypoint, 6);
    }

    #[test]
    fn repeated_calls_bit_identical() {
        let surface = IndexedCloud::new(bumpy_sphere(1000));
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.4)).unwrap();
        let list = names(&["lfsh", "spin_image", "rcs"]);
        let a = extract_by_name(&surface, &[1, 2, 300], &list, &reg).unwrap();
        let b = extract_by_name(&surface, &[1, 2, 300], &list, &reg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn storage_order_does_not_matter() {
        let cloud = bumpy_sphere(1000);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let shuffled = cloud.select(&perm);
        let reg = DescriptorRegistry::new(DescriptorConfig::with_support_radius(0.4)).unwrap();
        let list = names(&["lfsh", "spin_image", "rcs"]);
        let a = IndexedCloud::new(cloud);
        let b = IndexedCloud::new(shuffled);
        for k in [0usize, 250, 999] {
            let pos = perm.iter().position(|&p| p == k).unwrap();
            let fa = extract_by_name(&a, &[k], &list, &reg).unwrap();
            let fb = extract_by_name(&b, &[pos], &list, &reg).unwrap();
            for (x, y) in fa.tuple(0).iter().flatten().zip(fb.tuple(0).iter().flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn rigid_invariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = bumpy_sphere(700);
            let t = RigidTransform::from_axis_angle(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rng.random_range(0.0..std::f64::consts::PI),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            );
            let k = rng.random_range(0..cloud.len());
            let cfg = DescriptorConfig::with_support_radius(0.45);
            let a = IndexedCloud::new(cloud.clone());
            let b = IndexedCloud::new(cloud.transformed(&t));
            for (kind, tol) in [(BuiltinKind::Lfsh, 1e-6), (BuiltinKind::SpinImage, 1e-6), (BuiltinKind::Rcs, 1e-3)] {
                let d = Builtin::new(kind, cfg.clone());
                let x = d.compute(&a, k).unwrap();
                let y = d.compute(&b, k).unwrap();
                let err = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                prop_assert!(err < tol, "{kind:?}: {err}");
                prop_assert!(x.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
