//! File formats (PLY, transforms, manifests, correspondence lists) and the
//! synthetic registered-pair generator.

mod ply;
mod synth;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{check_rotation, project_to_rotation, PointCloud, RigidTransform};

pub use ply::{parse_ply, ply_bytes, read_ply, write_ply, PlyCloud, PlyEncoding};
pub use synth::{generate_pair, SurfaceKind, SynthConfig, SyntheticPair};

/// Largest orthonormality defect that a transform file may carry before it
/// is rejected.
pub const TRANSFORM_TOL: f64 = 1e-6;

fn parse_err(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

/// Parses a 4×4 row-major homogeneous matrix. A rotation block that is
/// orthonormal within [`TRANSFORM_TOL`] but not exactly is projected to the
/// nearest rotation.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let mut vals = Vec::with_capacity(16);
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.is_empty() {
            continue;
        }
        if row.len() != 4 {
            return Err(parse_err(
                format!("line {}", ln + 1),
                format!("expected 4 values, found {}", row.len()),
            ));
        }
        for tok in row {
            let v: f64 = tok
                .parse()
                .map_err(|e| parse_err(format!("line {}", ln + 1), format!("`{tok}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("line {}", ln + 1), "non-finite value"));
            }
            vals.push(v);
        }
    }
    if vals.len() != 16 {
        return Err(parse_err(
            "end of input".into(),
            format!("expected 16 values in 4 rows, found {}", vals.len()),
        ));
    }
    let bottom = &vals[12..16];
    if bottom[..3].iter().any(|v| v.abs() > TRANSFORM_TOL) || (bottom[3] - 1.0).abs() > TRANSFORM_TOL {
        return Err(Error::Validation(format!(
            "last row {bottom:?} is not (0, 0, 0, 1)"
        )));
    }
    let r = Matrix3::from_fn(|i, j| vals[4 * i + j]);
    let t = Vector3::new(vals[3], vals[7], vals[11]);
    check_rotation(&r, TRANSFORM_TOL)?;
    if check_rotation(&r, 1e-12).is_err() {
        let fixed = project_to_rotation(&r);
        log::info!(
            "re-projected rotation block onto SO(3) (max correction {:.3e})",
            (fixed - r).abs().max()
        );
        return RigidTransform::new(fixed, t);
    }
    RigidTransform::new(r, t)
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_transform(&text)
}

/// Four whitespace-separated rows, exact decimal round trip.
pub fn transform_text(t: &RigidTransform) -> String {
    let m = t.to_homogeneous();
    let mut out = String::new();
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:?}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_transform(path: impl AsRef<Path>, t: &RigidTransform) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, transform_text(t)).map_err(|e| Error::file(path, e))
}

/// Ground-truth correspondences as `source target` index lines.
pub fn parse_correspondences(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("line {}", ln + 1);
        let mut f = line.split_whitespace();
        let mut idx = || -> Result<usize> {
            f.next()
                .ok_or_else(|| parse_err(loc(), "expected two indices"))?
                .parse()
                .map_err(|e| parse_err(loc(), format!("bad index: {e}")))
        };
        let pair = (idx()?, idx()?);
        if f.next().is_some() {
            return Err(parse_err(loc(), "expected two indices"));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn correspondences_text(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(s, t)| format!("{s} {t}\n")).collect()
}

pub fn read_correspondences(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_correspondences(&text)
}

pub fn write_correspondences(path: impl AsRef<Path>, pairs: &[(usize, usize)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, correspondences_text(pairs)).map_err(|e| Error::file(path, e))
}

/// One registered pair. Paths are relative to the manifest directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub transform: PathBuf,
    /// Fraction of source points with a counterpart in the target.
    pub overlap: f64,
    pub correspondences: Option<PathBuf>,
}

/// Line-oriented pair table:
///
/// ```text
/// # comment
/// pr 0.0125
/// source.ply target.ply gt.txt 0.62 [corr.txt]
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    /// Dataset-level point-cloud resolution, when known.
    pub pr: Option<f64>,
    pub pairs: Vec<PairEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

/// A pair with clouds and ground truth in memory.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    pub overlap: f64,
    pub correspondences: Option<Vec<(usize, usize)>>,
}

impl PairManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m = PairManifest {
            root: root.into(),
            ..Default::default()
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = || format!("line {}", ln + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f[0] == "pr" {
                let pr: f64 = f
                    .get(1)
                    .filter(|_| f.len() == 2)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| parse_err(loc(), "expected `pr <value>`"))?;
                if !(pr > 0.0 && pr.is_finite()) {
                    return Err(Error::Validation(format!("{}: pr must be > 0, got {pr}", loc())));
                }
                m.pr = Some(pr);
                continue;
            }
            if !(4..=5).contains(&f.len()) {
                return Err(parse_err(
                    loc(),
                    format!("expected `source target transform overlap [correspondences]`, found {} fields", f.len()),
                ));
            }
            let overlap: f64 = f[3]
                .parse()
                .map_err(|e| parse_err(loc(), format!("bad overlap `{}`: {e}", f[3])))?;
            if !(0.0..=1.0).contains(&overlap) {
                return Err(Error::Validation(format!(
                    "{}: overlap {overlap} outside [0, 1]",
                    loc()
                )));
            }
            m.pairs.push(PairEntry {
                source: f[0].into(),
                target: f[1].into(),
                transform: f[2].into(),
                overlap,
                correspondences: f.get(4).map(PathBuf::from),
            });
        }
        Ok(m)
    }

    /// Reads the manifest and checks that every path exists and every
    /// transform is rigid.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for entry in &m.pairs {
            for p in [&entry.source, &entry.target, &entry.transform]
                .into_iter()
                .chain(entry.correspondences.as_ref())
            {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::file(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
            read_transform(m.resolve(&entry.transform))?;
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# source target transform overlap [correspondences]\n");
        if let Some(pr) = self.pr {
            out.push_str(&format!("pr {pr:?}\n"));
        }
        for e in &self.pairs {
            out.push_str(&format!(
                "{} {} {} {:.6}",
                e.source.display(),
                e.target.display(),
                e.transform.display(),
                e.overlap
            ));
            if let Some(c) = &e.correspondences {
                out.push_str(&format!(" {}", c.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load_pair(&self, i: usize) -> Result<LoadedPair> {
        let e = self
            .pairs
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("pair {i} not in manifest of {}", self.pairs.len())))?;
        let source = read_ply(self.resolve(&e.source))?.cloud;
        let target = read_ply(self.resolve(&e.target))?.cloud;
        let gt = read_transform(self.resolve(&e.transform))?;
        let correspondences = match &e.correspondences {
            Some(c) => {
                let pairs = read_correspondences(self.resolve(c))?;
                if let Some(&(s, t)) = pairs.iter().find(|(s, t)| *s >= source.len() || *t >= target.len()) {
                    return Err(Error::Validation(format!(
                        "correspondence ({s}, {t}) out of range for pair {i}"
                    )));
                }
                Some(pairs)
            }
            None => None,
        };
        Ok(LoadedPair {
            source,
            target,
            gt,
            overlap: e.overlap,
            correspondences,
        })
    }
}
