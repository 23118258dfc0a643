//! Rigid registration: closed-form fitting, RANSAC and the end-to-end
//! keypoint → descriptor → fusion → matching → RANSAC pipeline.

use std::sync::Arc;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{extract_feature_set, IndexedCloud, LocalDescriptor};
use crate::error::{Error, Result};
use crate::eval::{rmse, Correspondence, RmseMode};
use crate::fusion::Fusion;
use crate::geometry::{sorted_eigen, uniform_sample_keypoints, RigidTransform};

/// Relative spread below which a point set counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub sample_size: usize,
    pub seed: u64,
    /// Consensus size needed to call the registration successful.
    pub min_inliers: usize,
}

impl RansacConfig {
    /// 1000 iterations, 3 pr inlier threshold.
    pub fn from_resolution(pr: f64, seed: u64) -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 3.0 * pr,
            sample_size: 3,
            seed,
            min_inliers: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("RANSAC needs at least one iteration".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::Config("RANSAC inlier threshold must be > 0".into()));
        }
        if self.sample_size < 3 {
            return Err(Error::Config("RANSAC sample size must be >= 3".into()));
        }
        Ok(())
    }
}

fn is_collinear(points: &[Point3<f64>]) -> bool {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let (vals, _) = sorted_eigen(&cov);
    vals[2] <= 0.0 || vals[1] <= COLLINEAR_TOL * vals[2]
}

/// Least-squares rigid motion taking `src[i]` onto `dst[i]` (cross-covariance
/// SVD with reflection correction).
pub fn estimate_rigid(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} source and {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: src.len() });
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(Error::DegenerateSample("correspondences are collinear".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose();
    let t = cd - r * cs;
    Ok(RigidTransform::from_parts_unchecked(r, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub transform: RigidTransform,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn inliers_of(t: &RigidTransform, src: &[Point3<f64>], dst: &[Point3<f64>], thr: f64) -> Vec<usize> {
    (0..src.len())
        .filter(|&i| (t.apply_point(&src[i]) - dst[i]).norm() < thr)
        .collect()
}

/// Seeded sample-consensus fit over point pairs `(src[i], dst[i])`. The
/// best sampled model is refit on its inliers; a refit replaces it only
/// when its consensus is at least as large.
pub fn ransac(src: &[Point3<f64>], dst: &[Point3<f64>], cfg: &RansacConfig) -> Result<RansacOutcome> {
    cfg.validate()?;
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} source and {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: src.len() });
    }
    let k = cfg.sample_size.min(src.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let pick = index::sample(&mut rng, src.len(), k).into_vec();
        let s: Vec<_> = pick.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = pick.iter().map(|&i| dst[i]).collect();
        let Ok(t) = estimate_rigid(&s, &d) else {
            continue;
        };
        let inl = inliers_of(&t, src, dst, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((t, inl));
        }
    }
    let Some((mut transform, mut inliers)) = best else {
        return Ok(RansacOutcome {
            transform: RigidTransform::identity(),
            inliers: Vec::new(),
            iterations: cfg.iterations,
        });
    };
    for _ in 0..10 {
        let s: Vec<_> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = inliers.iter().map(|&i| dst[i]).collect();
        let Ok(refit) = estimate_rigid(&s, &d) else {
            break;
        };
        let next = inliers_of(&refit, src, dst, cfg.inlier_threshold);
        if next.len() < inliers.len() {
            break;
        }
        let stable = next == inliers;
        transform = refit;
        inliers = next;
        if stable {
            break;
        }
    }
    Ok(RansacOutcome {
        transform,
        inliers,
        iterations: cfg.iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub putative: Vec<Correspondence>,
    pub inliers: Vec<Correspondence>,
    pub rmse: Option<f64>,
    pub iterations: usize,
    pub success: bool,
    pub source_keypoints: usize,
    pub target_keypoints: usize,
}

/// RANSAC over feature matches between source and target keypoints.
pub fn ransac_register(
    source_keypoints: &[Point3<f64>],
    target_keypoints: &[Point3<f64>],
    matches: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    if matches.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: matches.len() });
    }
    let src: Vec<_> = matches.iter().map(|c| source_keypoints[c.source]).collect();
    let dst: Vec<_> = matches.iter().map(|c| target_keypoints[c.target]).collect();
    let out = ransac(&src, &dst, cfg)?;
    let inliers: Vec<Correspondence> = out.inliers.iter().map(|&i| matches[i]).collect();
    Ok(RegistrationResult {
        transform: out.transform,
        success: inliers.len() >= cfg.min_inliers.max(3),
        putative: matches.to_vec(),
        inliers,
        rmse: None,
        iterations: out.iterations,
        source_keypoints: source_keypoints.len(),
        target_keypoints: target_keypoints.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub keypoint_leaf: f64,
    pub ratio_threshold: f64,
    pub ransac: RansacConfig,
}

impl PipelineConfig {
    /// Keypoint leaf 4 pr, ratio threshold 0.9.
    pub fn from_resolution(pr: f64, seed: u64) -> Self {
        Self {
            keypoint_leaf: 4.0 * pr,
            ratio_threshold: 0.9,
            ransac: RansacConfig::from_resolution(pr, seed),
        }
    }
}

/// Full pipeline on one pair. `truth` holds ground-truth correspondences
/// `(source index, target index)` for the RMSE of the estimate.
pub fn register_pair(
    source: &IndexedCloud,
    target: &IndexedCloud,
    descriptors: &[Arc<dyn LocalDescriptor>],
    fusion: &Fusion,
    cfg: &PipelineConfig,
    truth: Option<&[(usize, usize)]>,
) -> Result<RegistrationResult> {
    let src_kp = uniform_sample_keypoints(source.cloud(), cfg.keypoint_leaf)?;
    let tgt_kp = uniform_sample_keypoints(target.cloud(), cfg.keypoint_leaf)?;
    let src_set = extract_feature_set(source, &src_kp, descriptors)?;
    let tgt_set = extract_feature_set(target, &tgt_kp, descriptors)?;
    if src_set.is_empty() || tgt_set.is_empty() {
        return Err(Error::InsufficientData {
            needed: 3,
            got: src_set.len().min(tgt_set.len()),
        });
    }
    let matches = fusion.putative_matches(src_set.tuples(), tgt_set.tuples(), cfg.ratio_threshold)?;
    let src_pts: Vec<_> = src_set.keypoints().iter().map(|&k| *source.cloud().point(k)).collect();
    let tgt_pts: Vec<_> = tgt_set.keypoints().iter().map(|&k| *target.cloud().point(k)).collect();
    let mut result = ransac_register(&src_pts, &tgt_pts, &matches, &cfg.ransac)?;
    if let Some(c) = truth {
        result.rmse = Some(rmse(source.cloud(), target.cloud(), &result.transform, c, RmseMode::Root)?);
    }
    Ok(result)
}
