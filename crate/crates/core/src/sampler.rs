//! Training triplet mining from ground-truth registered shape pairs.

use std::collections::HashSet;

use nalgebra::Point3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SpatialIndex};

/// Distances in length units; the defaults scale with the point cloud resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub tau_anc: f64,
    pub tau_pos: f64,
    pub tau_hard: f64,
    pub n_neg: usize,
    pub n_hard_neg: usize,
    pub seed: u64,
    /// Draw a fresh positive for every triplet instead of one per anchor.
    pub redraw_positive: bool,
    /// Keep at most this many anchors per pair (uniform random subset).
    pub max_anchors: Option<usize>,
}

impl SamplerConfig {
    /// τ_anc = 1.5 pr, τ+ = 3 pr, τ_hard = 6 pr, 25 far and 15 hard negatives.
    pub fn from_resolution(pr: f64, seed: u64) -> Self {
        Self {
            tau_anc: 1.5 * pr,
            tau_pos: 3.0 * pr,
            tau_hard: 6.0 * pr,
            n_neg: 25,
            n_hard_neg: 15,
            seed,
            redraw_positive: true,
            max_anchors: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_anc > 0.0
            && self.tau_anc <= self.tau_pos
            && self.tau_pos < self.tau_hard
            && self.tau_hard.is_finite();
        if !ok {
            return Err(Error::Config(format!(
                "sampler radii must satisfy 0 < tau_anc <= tau_pos < tau_hard, got {} {} {}",
                self.tau_anc, self.tau_pos, self.tau_hard
            )));
        }
        Ok(())
    }

    pub fn triplets_per_anchor(&self) -> usize {
        self.n_neg + self.n_hard_neg
    }
}

/// Indices into the source (anchor) and target (positive, negative) clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub transform: RigidTransform,
    /// Anchors for which a negative pool was smaller than requested.
    pub short_pool_anchors: Vec<usize>,
    /// Anchors dropped because no target point lay within τ+.
    pub dropped_anchors: Vec<usize>,
}

/// Source points whose transformed position has a target neighbor closer
/// than `tau_anc`.
pub fn select_anchors(
    source: &PointCloud,
    target: &SpatialIndex,
    gt: &RigidTransform,
    tau_anc: f64,
) -> Vec<usize> {
    if target.is_empty() {
        return Vec::new();
    }
    source
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| target.nearest(&gt.apply_point(p)).1 < tau_anc)
        .map(|(k, _)| k)
        .collect()
}

/// Seed for pair `pair` derived from a run seed.
pub fn pair_seed(seed: u64, pair: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ pair.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` items from `pool` uniformly, without replacement when the pool
/// is large enough. Returns whether replacement was needed.
fn draw<R: Rng>(rng: &mut R, pool: &[usize], n: usize, out: &mut Vec<usize>) -> bool {
    if n == 0 {
        return false;
    }
    if pool.is_empty() {
        return true;
    }
    if pool.len() >= n {
        out.extend(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]));
        false
    } else {
        out.extend((0..n).map(|_| pool[rng.random_range(0..pool.len())]));
        true
    }
}

/// Far negatives: target points at least `tau_hard` from `q`.
fn draw_far<R: Rng>(
    rng: &mut R,
    target: &SpatialIndex,
    q: &Point3<f64>,
    tau_hard: f64,
    n: usize,
) -> (Vec<usize>, bool) {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, false);
    }
    let total = target.len();
    let near = target
        .within_radius(q, tau_hard)
        .iter()
        .filter(|(_, d)| *d < tau_hard)
        .count();
    let far = total - near;
    let is_far = |j: usize| (target.points()[j] - q).norm() >= tau_hard;
    if far >= n && far * 4 >= total {
        // Rejection sampling without replacement.
        let mut seen = HashSet::with_capacity(n);
        while out.len() < n {
            let j = rng.random_range(0..total);
            if is_far(j) && seen.insert(j) {
                out.push(j);
            }
        }
        (out, false)
    } else {
        let pool: Vec<usize> = (0..total).filter(|&j| is_far(j)).collect();
        let short = draw(rng, &pool, n, &mut out);
        (out, short)
    }
}

/// Mines triplets for one source/target pair under the ground-truth motion.
pub fn sample_triplets(
    source: &PointCloud,
    target: &SpatialIndex,
    gt: &RigidTransform,
    cfg: &SamplerConfig,
) -> Result<TripletBatch> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anchors = select_anchors(source, target, gt, cfg.tau_anc);
    if anchors.is_empty() {
        return Err(Error::EmptyBatch("no anchors satisfy the overlap condition".into()));
    }
    if let Some(max) = cfg.max_anchors {
        if anchors.len() > max {
            let mut keep: Vec<usize> = index::sample(&mut rng, anchors.len(), max)
                .into_iter()
                .map(|i| anchors[i])
                .collect();
            keep.sort_unstable();
            anchors = keep;
        }
    }
    let mut batch = TripletBatch {
        triplets: Vec::with_capacity(anchors.len() * cfg.triplets_per_anchor()),
        transform: *gt,
        short_pool_anchors: Vec::new(),
        dropped_anchors: Vec::new(),
    };
    for &k in &anchors {
        let q = gt.apply_point(source.point(k));
        let hood = target.within_radius(&q, cfg.tau_hard);
        let positives: Vec<usize> = hood
            .iter()
            .filter(|(_, d)| *d < cfg.tau_pos)
            .map(|(j, _)| *j)
            .collect();
        if positives.is_empty() {
            batch.dropped_anchors.push(k);
            continue;
        }
        let hard_pool: Vec<usize> = hood
            .iter()
            .filter(|(_, d)| *d >= cfg.tau_pos && *d < cfg.tau_hard)
            .map(|(j, _)| *j)
            .collect();
        let mut negatives = Vec::with_capacity(cfg.triplets_per_anchor());
        let mut short = draw(&mut rng, &hard_pool, cfg.n_hard_neg, &mut negatives);
        let (far, far_short) = draw_far(&mut rng, target, &q, cfg.tau_hard, cfg.n_neg);
        negatives.extend(far);
        short |= far_short;
        if short {
            batch.short_pool_anchors.push(k);
        }
        let fixed = positives[rng.random_range(0..positives.len())];
        for negative in negatives {
            let positive = if cfg.redraw_positive {
                positives[rng.random_range(0..positives.len())]
            } else {
                fixed
            };
            batch.triplets.push(Triplet {
                anchor: k,
                positive,
                negative,
            });
        }
    }
    if batch.triplets.is_empty() {
        return Err(Error::EmptyBatch("every anchor was dropped".into()));
    }
    Ok(batch)
}

/// Seeded permutation split into consecutive batches of `batch_size`.
pub fn shuffle_and_batch<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| items[i].clone()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn grid(n: usize, step: f64, offset: Vector3<f64>) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * step, j as f64 * step, 0.0) + offset);
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn identical_clouds_all_anchors() {
        let c = grid(10, 1.0, Vector3::zeros());
        let idx = c.spatial_index();
        let a = select_anchors(&c, &idx, &RigidTransform::identity(), 1.5);
        assert_eq!(a, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn disjoint_clouds_no_anchors() {
        let s = grid(5, 1.0, Vector3::zeros());
        let t = grid(5, 1.0, Vector3::new(100.0, 0.0, 0.0));
        assert!(select_anchors(&s, &t.spatial_index(), &RigidTransform::identity(), 1.5).is_empty());
        let cfg = SamplerConfig::from_resolution(1.0, 0);
        assert!(matches!(
            sample_triplets(&s, &t.spatial_index(), &RigidTransform::identity(), &cfg),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn fully_pooled_anchor_yields_forty() {
        let c = grid(30, 1.0, Vector3::zeros());
        let idx = c.spatial_index();
        let mut cfg = SamplerConfig::from_resolution(1.0, 5);
        cfg.max_anchors = Some(1);
        let b = sample_triplets(&c, &idx, &RigidTransform::identity(), &cfg).unwrap();
        let a = b.triplets[0].anchor;
        let count = b.triplets.iter().filter(|t| t.anchor == a).count();
        if b.short_pool_anchors.is_empty() {
            assert_eq!(count, 40);
        }
        // Interior anchor on a 30x30 grid always has full pools.
        let mut cfg = SamplerConfig::from_resolution(1.0, 5);
        cfg.max_anchors = None;
        let b = sample_triplets(&c, &idx, &RigidTransform::identity(), &cfg).unwrap();
        let center = 15 * 30 + 15;
        assert_eq!(b.triplets.iter().filter(|t| t.anchor == center).count(), 40);
        assert!(!b.short_pool_anchors.contains(&center));
    }

    #[test]
    fn empty_hard_pool_gives_far_only() {
        // Target: one point at the anchor and a far cluster.
        let s = PointCloud::new(vec![Point3::origin()]);
        let mut pts = vec![Point3::origin()];
        for i in 0..40 {
            pts.push(Point3::new(50.0 + i as f64, 0.0, 0.0));
        }
        let t = PointCloud::new(pts);
        let cfg = SamplerConfig::from_resolution(1.0, 1);
        let b = sample_triplets(&s, &t.spatial_index(), &RigidTransform::identity(), &cfg).unwrap();
        assert_eq!(b.triplets.len(), 25);
        assert_eq!(b.short_pool_anchors, vec![0]);
        let distinct: HashSet<_> = b.triplets.iter().map(|t| t.negative).collect();
        assert_eq!(distinct.len(), 25);
    }

    #[test]
    fn bands_hold_under_motion() {
        let s = grid(25, 1.0, Vector3::zeros());
        let gt = RigidTransform::from_axis_angle(Vector3::z(), 0.3, Vector3::new(1.0, 2.0, 0.5));
        let t = s.transformed(&gt);
        let idx = t.spatial_index();
        let cfg = SamplerConfig::from_resolution(1.0, 9);
        let b = sample_triplets(&s, &idx, &gt, &cfg).unwrap();
        // Count of hard negatives per anchor is the first n_hard_neg entries.
        let mut per_anchor = std::collections::BTreeMap::<usize, Vec<&Triplet>>::new();
        for tr in &b.triplets {
            per_anchor.entry(tr.anchor).or_default().push(tr);
        }
        for (a, trs) in per_anchor {
            let q = gt.apply_point(s.point(a));
            let nn = t.points().iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(nn < cfg.tau_anc);
            for (i, tr) in trs.iter().enumerate() {
                assert!((t.point(tr.positive) - q).norm() < cfg.tau_pos);
                let dn = (t.point(tr.negative) - q).norm();
                if trs.len() == 40 && i < cfg.n_hard_neg {
                    assert!(dn >= cfg.tau_pos && dn < cfg.tau_hard);
                } else if trs.len() == 40 {
                    assert!(dn >= cfg.tau_hard);
                } else {
                    assert!(dn >= cfg.tau_pos);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let s = grid(20, 1.0, Vector3::zeros());
        let idx = s.spatial_index();
        let cfg = SamplerConfig::from_resolution(1.0, 77);
        let a = sample_triplets(&s, &idx, &RigidTransform::identity(), &cfg).unwrap();
        let b = sample_triplets(&s, &idx, &RigidTransform::identity(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batching() {
        let items: Vec<usize> = (0..1024).collect();
        let b = shuffle_and_batch(&items, 512, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![512, 512]);
        let items: Vec<usize> = (0..1000).collect();
        let b = shuffle_and_batch(&items, 512, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![512, 488]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(b, shuffle_and_batch(&items, 512, 3).unwrap());
        assert_ne!(b, shuffle_and_batch(&items, 512, 4).unwrap());
        assert!(shuffle_and_batch(&items, 0, 3).is_err());
    }
}
