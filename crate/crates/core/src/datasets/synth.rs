use nalgebra::{Point3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{compute_resolution, estimate_normals_with, fibonacci_sphere, NormalConfig, PointCloud, RigidTransform};

const MAX_ATTEMPTS: usize = 100;
const OVERLAP_TOL: f64 = 0.05;
/// Normal estimation radius in resolution units.
const NORMAL_RADIUS_PR: f64 = 4.0;
const SPHERE_BUMPS: usize = 150;
const FIELD_BUMPS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceKind {
    /// Closed surface: a unit sphere with random radial bumps.
    #[default]
    BumpySphere,
    /// Open surface: a bumpy height field over a square.
    HeightField,
}

impl std::str::FromStr for SurfaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bumpy-sphere" | "bumpy_sphere" | "sphere" => Ok(Self::BumpySphere),
            "height-field" | "height_field" | "heightfield" => Ok(Self::HeightField),
            other => Err(Error::Config(format!(
                "unknown surface `{other}` (expected bumpy-sphere or height-field)"
            ))),
        }
    }
}

impl SurfaceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::BumpySphere => "bumpy-sphere",
            Self::HeightField => "height-field",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub surface: SurfaceKind,
    /// Points on the full surface before cropping.
    pub points: usize,
    /// Noise standard deviation as a fraction of the resolution.
    pub noise: f64,
    /// Target fraction of source points with a target counterpart.
    pub overlap: f64,
    /// Largest rotation angle in radians.
    pub max_rotation: f64,
    /// Largest translation in resolution units.
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            surface: SurfaceKind::BumpySphere,
            points: 3000,
            noise: 0.0,
            overlap: 0.6,
            max_rotation: std::f64::consts::PI,
            max_translation: 50.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 100 {
            return Err(Error::Config(format!("point count must be >= 100, got {}", self.points)));
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::Config(format!("overlap must be in (0, 1], got {}", self.overlap)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.max_rotation) {
            return Err(Error::Config(format!(
                "rotation bound must be in [0, pi], got {}",
                self.max_rotation
            )));
        }
        if !(self.max_translation >= 0.0 && self.max_translation.is_finite()) {
            return Err(Error::Config(format!(
                "translation bound must be >= 0, got {}",
                self.max_translation
            )));
        }
        Ok(())
    }
}

/// A generated pair. `gt` maps source coordinates onto the target.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    /// (source index, target index) of points sampled from the same
    /// surface location, captured before noise.
    pub correspondences: Vec<(usize, usize)>,
    /// Resolution of the noise-free source.
    pub pr: f64,
}

impl SyntheticPair {
    /// |C*| / |source|.
    pub fn overlap(&self) -> f64 {
        self.correspondences.len() as f64 / self.source.len() as f64
    }
}

struct Bump {
    center: Vector3<f64>,
    amplitude: f64,
    width: f64,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn bumpy_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let bumps: Vec<Bump> = (0..SPHERE_BUMPS)
        .map(|_| Bump {
            center: random_unit(rng),
            amplitude: rng.random_range(-0.06..0.08),
            width: rng.random_range(0.05..0.15),
        })
        .collect();
    fibonacci_sphere(n, 1.0)
        .into_iter()
        .map(|p| {
            let u = p.coords;
            let r = 1.0
                + bumps
                    .iter()
                    .map(|b| {
                        let a = u.dot(&b.center).clamp(-1.0, 1.0).acos();
                        b.amplitude * (-a * a / (2.0 * b.width * b.width)).exp()
                    })
                    .sum::<f64>();
            Point3::from(u * r)
        })
        .collect()
}

fn height_field(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let bumps: Vec<Bump> = (0..FIELD_BUMPS)
        .map(|_| Bump {
            center: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
            amplitude: rng.random_range(-0.06..0.06),
            width: rng.random_range(0.04..0.12),
        })
        .collect();
    // Additive recurrence on the plastic number: even coverage for any n.
    let g = 1.324_717_957_244_746_f64;
    let (a1, a2) = (1.0 / g, 1.0 / (g * g));
    (0..n)
        .map(|i| {
            let x = 2.0 * (0.5 + a1 * i as f64).fract() - 1.0;
            let y = 2.0 * (0.5 + a2 * i as f64).fract() - 1.0;
            let z = bumps
                .iter()
                .map(|b| {
                    let d2 = (x - b.center.x).powi(2) + (y - b.center.y).powi(2);
                    b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
                })
                .sum::<f64>();
            Point3::new(x, y, z - 2.0)
        })
        .collect()
}

/// Crop direction: any direction for the sphere, in-plane for the field.
fn crop_direction(kind: SurfaceKind, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match kind {
        SurfaceKind::BumpySphere => random_unit(rng),
        SurfaceKind::HeightField => {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Vector3::new(t.cos(), t.sin(), 0.0)
        }
    }
}

fn random_motion(cfg: &SynthConfig, pr: f64, rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = random_unit(rng);
    let angle = if cfg.max_rotation > 0.0 {
        rng.random_range(0.0..=cfg.max_rotation)
    } else {
        0.0
    };
    let dir = random_unit(rng);
    let mag = if cfg.max_translation > 0.0 {
        rng.random_range(0.0..=cfg.max_translation * pr)
    } else {
        0.0
    };
    if angle == 0.0 && mag == 0.0 {
        return RigidTransform::identity();
    }
    RigidTransform::from_axis_angle(axis, angle, dir * mag)
}

fn add_noise(points: &mut [Point3<f64>], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for p in points {
        for c in p.coords.iter_mut() {
            *c += normal.sample(rng);
        }
    }
}

/// Samples a surface, crops two overlapping views along a random
/// direction, moves the target by a random rigid motion and adds noise
/// to both views. Normals are estimated on each noisy view.
pub fn generate_pair(cfg: &SynthConfig) -> Result<SyntheticPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = match cfg.surface {
        SurfaceKind::BumpySphere => bumpy_sphere(cfg.points, &mut rng),
        SurfaceKind::HeightField => height_field(cfg.points, &mut rng),
    };
    let n = base.len();
    // Views of size m sharing 2m - n points have overlap (2m - n) / m.
    let m = ((n as f64 / (2.0 - cfg.overlap)).round() as usize).clamp(1, n);
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let u = Unit::new_normalize(crop_direction(cfg.surface, &mut rng));
        let mut order: Vec<usize> = (0..n).collect();
        let proj: Vec<f64> = base.iter().map(|p| p.coords.dot(&u)).collect();
        order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
        let mut src_ids = order[..m].to_vec();
        let mut tgt_ids = order[n - m..].to_vec();
        src_ids.sort_unstable();
        tgt_ids.sort_unstable();

        let mut correspondences = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < src_ids.len() && j < tgt_ids.len() {
            match src_ids[i].cmp(&tgt_ids[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    correspondences.push((i, j));
                    i += 1;
                    j += 1;
                }
            }
        }
        let measured = correspondences.len() as f64 / m as f64;
        if (measured - cfg.overlap).abs() > OVERLAP_TOL {
            last = format!("overlap {measured:.3} for target {}", cfg.overlap);
            continue;
        }

        let mut src_pts: Vec<Point3<f64>> = src_ids.iter().map(|&k| base[k]).collect();
        let mut tgt_pts: Vec<Point3<f64>> = tgt_ids.iter().map(|&k| base[k]).collect();
        let pr = compute_resolution(&PointCloud::new(src_pts.clone()))?;
        let gt = random_motion(cfg, pr, &mut rng);
        add_noise(&mut src_pts, cfg.noise * pr, &mut rng);
        add_noise(&mut tgt_pts, cfg.noise * pr, &mut rng);

        let normals = NormalConfig::new(NORMAL_RADIUS_PR * pr);
        let views = estimate_normals_with(&PointCloud::new(src_pts), &normals)
            .and_then(|s| Ok((s, estimate_normals_with(&PointCloud::new(tgt_pts), &normals)?)));
        let (source, target) = match views {
            Ok(v) => v,
            Err(e) => {
                last = e.to_string();
                log::debug!("crop attempt {attempt} rejected: {e}");
                continue;
            }
        };
        let target = target.transformed(&gt);
        return Ok(SyntheticPair {
            source,
            target,
            gt,
            correspondences,
            pr,
        });
    }
    Err(Error::Generation(format!(
        "no acceptable crop after {MAX_ATTEMPTS} attempts (last: {last})"
    )))
}
