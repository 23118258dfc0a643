//! Ratio-test matching, precision/recall curves, registration metrics and
//! feature coloring.

use nalgebra::{DMatrix, Point3, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SpatialIndex};

/// A putative match of target feature `target` to source feature `source`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub distance: f64,
    /// Nearest over second-nearest distance, in `[0, 1]`.
    pub ratio: f64,
}

fn ratio_of(d1: f64, d2: f64) -> f64 {
    if d2 == 0.0 {
        if d1 == 0.0 {
            0.0
        } else {
            1.0
        }
    } else if d2.is_infinite() {
        0.0
    } else {
        (d1 / d2).min(1.0)
    }
}

/// Nearest source index plus the nearest and second-nearest distance per target.
fn two_nearest<F>(n_source: usize, n_target: usize, dist: F) -> Result<Vec<(usize, f64, f64)>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    if n_source == 0 || n_target == 0 {
        return Err(Error::InvalidInput("matching needs features on both sides".into()));
    }
    (0..n_target)
        .into_par_iter()
        .map(|t| {
            let (mut b1, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
            for s in 0..n_source {
                let d = dist(s, t)?;
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    b1 = s;
                } else if d < d2 {
                    d2 = d;
                }
            }
            Ok((b1, d1, d2))
        })
        .collect()
}

/// For every target item, the nearest source item and the ratio to the
/// second nearest under an arbitrary distance. With a single source item the
/// ratio is 0.
pub fn two_nn_by<F>(n_source: usize, n_target: usize, dist: F) -> Result<Vec<Correspondence>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    Ok(two_nearest(n_source, n_target, dist)?
        .into_iter()
        .enumerate()
        .map(|(target, (source, d1, d2))| Correspondence {
            source,
            target,
            distance: d1,
            ratio: ratio_of(d1, d2),
        })
        .collect())
}

fn check_dims<T: AsRef<[f64]>>(source: &[T], target: &[T]) -> Result<usize> {
    let d = source.first().map_or(0, |v| v.as_ref().len());
    for v in source.iter().chain(target) {
        if v.as_ref().len() != d {
            return Err(Error::Shape(format!(
                "feature of length {} among {d}-d features",
                v.as_ref().len()
            )));
        }
    }
    Ok(d)
}

/// Two-nearest-neighbor search under L2 for every target feature.
pub fn two_nn<T: AsRef<[f64]> + Sync>(source: &[T], target: &[T]) -> Result<Vec<Correspondence>> {
    check_dims(source, target)?;
    let raw = two_nearest(source.len(), target.len(), |s, t| {
        Ok(source[s]
            .as_ref()
            .iter()
            .zip(target[t].as_ref())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
    })?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(target, (source, sq1, sq2))| {
            let (d1, d2) = (sq1.sqrt(), sq2.sqrt());
            Correspondence {
                source,
                target,
                distance: d1,
                ratio: ratio_of(d1, d2),
            }
        })
        .collect())
}

/// Matches with ratio strictly below `threshold`.
pub fn ratio_match<T: AsRef<[f64]> + Sync>(
    source: &[T],
    target: &[T],
    threshold: f64,
) -> Result<Vec<Correspondence>> {
    Ok(two_nn(source, target)?
        .into_iter()
        .filter(|c| c.ratio < threshold)
        .collect())
}

/// Pairs that are each other's nearest neighbor.
pub fn mutual_nearest<F>(n_source: usize, n_target: usize, dist: F) -> Result<Vec<Correspondence>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let forward = two_nn_by(n_source, n_target, &dist)?;
    let backward = two_nn_by(n_target, n_source, |t, s| dist(s, t))?;
    Ok(forward
        .into_iter()
        .filter(|c| backward[c.source].source == c.target)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcConfig {
    pub keypoints: usize,
    /// A match is correct when the matched source keypoint, moved by the
    /// ground truth, lies within this distance of the target keypoint.
    pub tolerance: f64,
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl RpcConfig {
    /// 1000 keypoints, 3 pr tolerance, ratio thresholds 0.05, 0.10, …, 1.0.
    pub fn from_resolution(pr: f64, seed: u64) -> Self {
        Self {
            keypoints: 1000,
            tolerance: 3.0 * pr,
            thresholds: default_thresholds(),
            seed,
        }
    }
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// Keypoints used for one curve: random source points and, for each with a
/// target point within tolerance of its transformed position, that point.
#[derive(Debug, Clone, PartialEq)]
pub struct RpcSample {
    pub source_keypoints: Vec<usize>,
    pub target_keypoints: Vec<usize>,
}

pub fn rpc_sample(
    source: &PointCloud,
    target: &SpatialIndex,
    gt: &RigidTransform,
    cfg: &RpcConfig,
) -> Result<RpcSample> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("RPC needs non-empty clouds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.keypoints.min(source.len());
    let mut source_keypoints = index::sample(&mut rng, source.len(), n).into_vec();
    source_keypoints.sort_unstable();
    let mut target_keypoints: Vec<usize> = source_keypoints
        .iter()
        .filter_map(|&k| {
            let (j, d) = target.nearest(&gt.apply_point(source.point(k)));
            (d <= cfg.tolerance).then_some(j)
        })
        .collect();
    target_keypoints.sort_unstable();
    target_keypoints.dedup();
    if target_keypoints.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    Ok(RpcSample {
        source_keypoints,
        target_keypoints,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcPoint {
    pub threshold: f64,
    pub matches: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcCurve {
    pub points: Vec<RpcPoint>,
    pub auc: f64,
    pub possible: usize,
}

/// Sweeps ratio thresholds over putative matches `nn` (one per target
/// keypoint). Positions are keypoint coordinates with the source already
/// moved by the ground truth. The recall denominator counts target
/// keypoints that have a source keypoint within tolerance.
pub fn rpc_curve(
    source_pos: &[Point3<f64>],
    target_pos: &[Point3<f64>],
    nn: &[Correspondence],
    tolerance: f64,
    thresholds: &[f64],
) -> Result<RpcCurve> {
    let index = SpatialIndex::build(source_pos);
    let possible = if index.is_empty() {
        0
    } else {
        target_pos
            .iter()
            .filter(|t| index.nearest(t).1 <= tolerance)
            .count()
    };
    if possible == 0 {
        return Err(Error::UndefinedRecall);
    }
    let correct: Vec<bool> = nn
        .iter()
        .map(|c| (source_pos[c.source] - target_pos[c.target]).norm() <= tolerance)
        .collect();
    let points = thresholds
        .iter()
        .map(|&th| {
            let (mut m, mut ok) = (0, 0);
            for (c, &good) in nn.iter().zip(&correct) {
                if c.ratio < th {
                    m += 1;
                    ok += good as usize;
                }
            }
            RpcPoint {
                threshold: th,
                matches: m,
                correct: ok,
                precision: if m == 0 { 0.0 } else { ok as f64 / m as f64 },
                recall: ok as f64 / possible as f64,
            }
        })
        .collect::<Vec<_>>();
    let curve: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.matches > 0)
        .map(|p| (p.precision, p.recall))
        .collect();
    Ok(RpcCurve {
        auc: auc(&curve),
        points,
        possible,
    })
}

/// Trapezoidal area under `(precision, recall)` points, integrated over
/// recall after sorting by it.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
    pts.windows(2)
        .map(|w| (w[1].1 - w[0].1) * (w[0].0 + w[1].0) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RmseMode {
    /// Root of the mean squared residual.
    #[default]
    Root,
    /// Mean squared residual without the root.
    MeanSquare,
}

/// Residual of ground-truth correspondences `(source index, target index)`
/// after moving the source by `estimated`.
pub fn rmse(
    source: &PointCloud,
    target: &PointCloud,
    estimated: &RigidTransform,
    correspondences: &[(usize, usize)],
    mode: RmseMode,
) -> Result<f64> {
    if correspondences.is_empty() {
        return Err(Error::InvalidInput("RMSE over an empty correspondence set".into()));
    }
    let mut sum = 0.0;
    for &(s, t) in correspondences {
        if s >= source.len() || t >= target.len() {
            return Err(Error::InvalidInput(format!("correspondence ({s}, {t}) out of range")));
        }
        sum += (estimated.apply_point(source.point(s)) - target.point(t)).norm_squared();
    }
    let ms = sum / correspondences.len() as f64;
    Ok(match mode {
        RmseMode::Root => ms.sqrt(),
        RmseMode::MeanSquare => ms,
    })
}

/// Fraction of values strictly below `alpha`.
pub fn alpha_recall(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("alpha recall over no registrations".into()));
    }
    Ok(values.iter().filter(|&&v| v < alpha).count() as f64 / values.len() as f64)
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Outcome of one candidate pair in a registration benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    /// The pipeline reported success for this pair.
    pub claimed: bool,
    /// RMSE under the estimated transform, when claimed.
    pub rmse: Option<f64>,
    /// The pair truly overlaps.
    pub overlapping: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// A registration is correct when claimed on an overlapping pair with RMSE
/// below `threshold`.
pub fn benchmark_prf(results: &[PairOutcome], threshold: f64) -> Prf {
    let claimed = results.iter().filter(|r| r.claimed).count();
    let truth = results.iter().filter(|r| r.overlapping).count();
    let correct = results
        .iter()
        .filter(|r| r.claimed && r.overlapping && r.rmse.is_some_and(|e| e < threshold))
        .count();
    let precision = if claimed == 0 { 0.0 } else { correct as f64 / claimed as f64 };
    let recall = if truth == 0 { 0.0 } else { correct as f64 / truth as f64 };
    Prf {
        precision,
        recall,
        f_score: f_score(precision, recall),
    }
}

/// Maps per-point features to RGB: the first three principal components,
/// each min-max scaled to `[0, 255]`. Constant components map to 128.
pub fn colorize_features<T: AsRef<[f64]>>(features: &[T]) -> Result<Vec<[u8; 3]>> {
    if features.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "coloring needs at least 4 points, got {}",
            features.len()
        )));
    }
    let d = check_dims(features, &[])?;
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |r, c| features[r].as_ref()[c]);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut colors = vec![[128u8; 3]; n];
    for (channel, &i) in order.iter().take(3).enumerate() {
        if eig.eigenvalues[i] <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            continue;
        }
        let mut axis = eig.eigenvectors.column(i).into_owned();
        let lead = axis.iamax();
        if axis[lead] < 0.0 {
            axis.neg_mut();
        }
        let proj = &centered * axis;
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        if hi - lo <= 0.0 {
            continue;
        }
        for (c, v) in colors.iter_mut().zip(proj.iter()) {
            c[channel] = ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(colors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn identical_sets_match_with_ratio_zero() {
        let f = random_features(20, 5, 1);
        let m = ratio_match(&f, &f, 0.9).unwrap();
        assert_eq!(m.len(), 20);
        for c in &m {
            assert_eq!(c.source, c.target);
            assert_eq!(c.ratio, 0.0);
        }
        assert!(ratio_match(&f, &f, 0.0).unwrap().is_empty());
    }

    #[test]
    fn matches_linear_scan_oracle() {
        let s = random_features(50, 6, 2);
        let t = random_features(40, 6, 3);
        let got = ratio_match(&s, &t, 0.8).unwrap();
        let mut want = Vec::new();
        for (ti, tv) in t.iter().enumerate() {
            let mut d: Vec<(f64, usize)> = s
                .iter()
                .enumerate()
                .map(|(si, sv)| {
                    (sv.iter().zip(tv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), si)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            if d[0].0 / d[1].0 < 0.8 {
                want.push((d[0].1, ti, d[0].0 / d[1].0));
            }
        }
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.source, g.target), (w.0, w.1));
            assert!((g.ratio - w.2).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(ratio_of(0.0, 0.0), 0.0);
        assert_eq!(ratio_of(1.0, 0.0), 1.0);
        assert_eq!(ratio_of(1.0, 2.0), 0.5);
        // Two identical source features at distance 1 from the target.
        let m = two_nn(&[vec![1.0], vec![1.0]], &[vec![0.0]]).unwrap();
        assert_eq!(m[0].ratio, 1.0);
        assert!(matches!(two_nn(&[vec![1.0]], &[vec![0.0, 1.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn mutual_nearest_filters_asymmetric() {
        let s = [vec![0.0], vec![10.0]];
        let t = [vec![0.1], vec![0.2], vec![9.0]];
        let d = |a: usize, b: usize| Ok((s[a][0] - t[b][0] as f64).abs());
        let m = mutual_nearest(2, 3, d).unwrap();
        let pairs: Vec<_> = m.iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 2)]);
    }

    #[test]
    fn auc_of_rectangle() {
        let pts: Vec<(f64, f64)> = (0..=10).map(|i| (1.0, i as f64 / 10.0)).collect();
        assert!((auc(&pts) - 1.0).abs() < 1e-12);
        assert_eq!(auc(&[(0.7, 0.3)]), 0.0);
    }

    #[test]
    fn coordinate_features_are_perfect() {
        let pts: Vec<Point3<f64>> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Point3::new(i as f64, j as f64, 0.0)))
            .collect();
        let feats: Vec<Vec<f64>> = pts.iter().map(|p| p.coords.as_slice().to_vec()).collect();
        let nn = two_nn(&feats, &feats).unwrap();
        let curve = rpc_curve(&pts, &pts, &nn, 0.3, &default_thresholds()).unwrap();
        assert!(curve.points.iter().all(|p| p.matches == 0 || p.precision == 1.0));
        assert_eq!(curve.points.last().unwrap().recall, 1.0);
        assert_eq!(curve.possible, 100);
    }

    #[test]
    fn constant_features_hit_base_rate() {
        // Every target matches source 0; only target 0 sits on it.
        let pts: Vec<Point3<f64>> = (0..8).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let feats = vec![vec![0.5]; 8];
        let nn = two_nn(&feats, &feats).unwrap();
        let curve = rpc_curve(&pts, &pts, &nn, 0.1, &[0.5]).unwrap();
        assert_eq!(curve.points[0].matches, 8);
        assert!((curve.points[0].precision - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_match_count() {
        let s = random_features(30, 3, 4);
        let t = random_features(30, 3, 5);
        let pts: Vec<Point3<f64>> = (0..30).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let nn = two_nn(&s, &t).unwrap();
        let c = rpc_curve(&pts, &pts, &nn, 0.5, &default_thresholds()).unwrap();
        for w in c.points.windows(2) {
            assert!(w[0].matches <= w[1].matches);
        }
    }

    #[test]
    fn rpc_sample_needs_overlap() {
        let a = PointCloud::new((0..20).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect());
        let b = PointCloud::new((0..20).map(|i| Point3::new(i as f64 + 500.0, 0.0, 0.0)).collect());
        let cfg = RpcConfig::from_resolution(1.0, 0);
        assert!(matches!(
            rpc_sample(&a, &b.spatial_index(), &RigidTransform::identity(), &cfg),
            Err(Error::UndefinedRecall)
        ));
        let s = rpc_sample(&a, &a.spatial_index(), &RigidTransform::identity(), &cfg).unwrap();
        assert_eq!(s.source_keypoints, s.target_keypoints);
    }

    #[test]
    fn rmse_cases() {
        let s = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let t = s.clone();
        let id = RigidTransform::identity();
        assert_eq!(rmse(&s, &t, &id, &[(0, 0), (1, 1)], RmseMode::Root).unwrap(), 0.0);
        let shifted = PointCloud::new(vec![Point3::new(0.3, 0.0, 0.0)]);
        let e = rmse(&s, &shifted, &id, &[(0, 0)], RmseMode::Root).unwrap();
        assert!((e - 0.3).abs() < 1e-15);
        assert!(rmse(&s, &t, &id, &[], RmseMode::Root).is_err());
    }

    #[test]
    fn rmse_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = || Point3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let s = PointCloud::new((0..30).map(|_| p()).collect());
        let t = PointCloud::new((0..30).map(|_| p()).collect());
        let est = RigidTransform::from_axis_angle(Vector3::x(), 0.4, Vector3::new(0.1, 0.0, 0.2));
        let pairs: Vec<(usize, usize)> = (0..30).map(|i| (i, 29 - i)).collect();
        let mut sum = 0.0;
        for &(a, b) in &pairs {
            let q = est.rotation() * s.point(a).coords + est.translation();
            sum += (q - t.point(b).coords).norm_squared();
        }
        let ms = rmse(&s, &t, &est, &pairs, RmseMode::MeanSquare).unwrap();
        assert!((ms - sum / 30.0).abs() < 1e-12);
        let r = rmse(&s, &t, &est, &pairs, RmseMode::Root).unwrap();
        assert!((r - (sum / 30.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn alpha_recall_examples() {
        assert_eq!(alpha_recall(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(alpha_recall(&[0.1, 0.3], 0.2).unwrap(), 0.5);
        assert_eq!(alpha_recall(&[0.0, 0.3], 0.0).unwrap(), 0.0);
        assert!(alpha_recall(&[], 1.0).is_err());
    }

    #[test]
    fn prf_examples() {
        let ok = PairOutcome {
            claimed: true,
            rmse: Some(0.1),
            overlapping: true,
        };
        let p = benchmark_prf(&[ok, ok], 0.2);
        assert_eq!((p.precision, p.recall, p.f_score), (1.0, 1.0, 1.0));
        assert_eq!(f_score(0.5, 0.5), 0.5);
        assert!((f_score(25.2, 65.1) - 36.3).abs() < 0.1);
        assert_eq!(f_score(0.0, 0.0), 0.0);
        let bad = PairOutcome {
            rmse: Some(0.5),
            ..ok
        };
        let missed = PairOutcome {
            claimed: false,
            rmse: None,
            overlapping: true,
        };
        let p = benchmark_prf(&[ok, bad, missed], 0.2);
        assert_eq!((p.precision, p.recall), (0.5, 1.0 / 3.0));
    }

    #[test]
    fn colorize_cases() {
        let constant = vec![vec![0.3, 0.3]; 10];
        let c = colorize_features(&constant).unwrap();
        assert!(c.iter().all(|rgb| *rgb == c[0]));
        let coords: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let c = colorize_features(&coords).unwrap();
        for w in c.windows(2) {
            assert!(w[0][0] <= w[1][0]);
        }
        assert_eq!((c[0][0], c[19][0]), (0, 255));
        assert!(colorize_features(&coords[..3]).is_err());
    }
}
