//! Linear fusion baselines: concatenation, PCA projection and min pooling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::net::{write_header, Reader};

const PCA_MAGIC: &[u8; 4] = b"GFPC";
const PCA_VERSION: u32 = 1;

/// Relative eigenvalue below which a principal direction counts as null.
const RANK_TOL: f64 = 1e-12;

pub fn concatenate<T: AsRef<[f64]>>(tuple: &[T]) -> Vec<f64> {
    tuple.iter().flat_map(|v| v.as_ref().iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// `k × D`, orthonormal rows in descending eigenvalue order.
    projection: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    whiten: bool,
}

impl PcaModel {
    pub fn fit<T: AsRef<[f64]>>(vectors: &[T], k: usize) -> Result<Self> {
        Self::fit_with(vectors, k, false)
    }

    /// `whiten` scales each output coordinate by the inverse root of its eigenvalue.
    pub fn fit_with<T: AsRef<[f64]>>(vectors: &[T], k: usize, whiten: bool) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("PCA target dimension must be >= 1".into()));
        }
        let d = vectors.first().map_or(0, |v| v.as_ref().len());
        if d == 0 {
            return Err(Error::InsufficientData { needed: k + 1, got: vectors.len() });
        }
        if k > d {
            return Err(Error::Config(format!("PCA target dimension {k} exceeds input dimension {d}")));
        }
        if vectors.len() < k + 1 {
            return Err(Error::InsufficientData { needed: k + 1, got: vectors.len() });
        }
        if let Some(v) = vectors.iter().find(|v| v.as_ref().len() != d) {
            return Err(Error::Shape(format!("PCA input of length {} among {d}-d vectors", v.as_ref().len())));
        }
        let n = vectors.len() as f64;
        let mut mean = DVector::zeros(d);
        for v in vectors {
            mean += DVector::from_column_slice(v.as_ref());
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for v in vectors {
            let c = DVector::from_column_slice(v.as_ref()) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top && eig.eigenvalues[i] > 0.0)
            .count();
        if k > rank {
            return Err(Error::Rank { requested: k, rank });
        }
        let mut projection = DMatrix::zeros(k, d);
        let mut eigenvalues = Vec::with_capacity(k);
        for (row, &i) in order.iter().take(k).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // Largest-magnitude entry positive; first such entry on ties.
            let mut lead = 0;
            for j in 1..d {
                if v[j].abs() > v[lead].abs() {
                    lead = j;
                }
            }
            if v[lead] < 0.0 {
                v.neg_mut();
            }
            projection.row_mut(row).copy_from(&v.transpose());
            eigenvalues.push(eig.eigenvalues[i]);
        }
        Ok(Self {
            mean,
            projection,
            eigenvalues,
            whiten,
        })
    }

    pub fn source_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.source_dim() {
            return Err(Error::Shape(format!(
                "PCA model expects {} values, got {}",
                self.source_dim(),
                v.len()
            )));
        }
        let c = DVector::from_column_slice(v) - &self.mean;
        let mut out = &self.projection * c;
        if self.whiten {
            for (o, e) in out.iter_mut().zip(&self.eigenvalues) {
                *o /= e.sqrt();
            }
        }
        Ok(out.iter().copied().collect())
    }

    pub fn project_batch<T: AsRef<[f64]>>(&self, vectors: &[T]) -> Result<Vec<Vec<f64>>> {
        vectors.iter().map(|v| self.project(v.as_ref())).collect()
    }

    /// Container layout, little-endian: "GFPC", u32 version, u32 D, u32 k,
    /// u8 whiten, D f64 mean, k f64 eigenvalues, k×D f64 projection (row-major).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = write_header(PCA_MAGIC, PCA_VERSION);
        out.extend_from_slice(&(self.source_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.target_dim() as u32).to_le_bytes());
        out.push(self.whiten as u8);
        let values = self
            .mean
            .iter()
            .chain(&self.eigenvalues)
            .copied()
            .chain((0..self.target_dim()).flat_map(|r| {
                (0..self.source_dim()).map(move |c| self.projection[(r, c)])
            }));
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PCA_MAGIC, PCA_VERSION)?;
        let d = r.u32("source dimension")? as usize;
        let k = r.u32("target dimension")? as usize;
        let at = r.pos();
        let whiten = match r.u8("whiten flag")? {
            0 => false,
            1 => true,
            v => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("whiten flag must be 0 or 1, got {v}"),
                })
            }
        };
        if k == 0 || k > d {
            return Err(Error::Format {
                offset: at,
                message: format!("invalid PCA dimensions {k} of {d}"),
            });
        }
        let mean = DVector::from_iterator(d, (0..d).map(|_| r.f64("mean")).collect::<Result<Vec<_>>>()?);
        let eigenvalues = (0..k).map(|_| r.f64("eigenvalues")).collect::<Result<Vec<_>>>()?;
        let mut projection = DMatrix::zeros(k, d);
        for row in 0..k {
            for col in 0..d {
                projection[(row, col)] = r.f64("projection")?;
            }
        }
        r.finish()?;
        Ok(Self {
            mean,
            projection,
            eigenvalues,
            whiten,
        })
    }
}

/// Smallest per-descriptor distance after normalizing each descriptor to
/// unit length. Descriptors with zero norm on either side are skipped.
pub fn min_pool_distance<T: AsRef<[f64]>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "min pooling over {} and {} descriptors",
            a.len(),
            b.len()
        )));
    }
    let mut best: Option<f64> = None;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let (x, y) = (x.as_ref(), y.as_ref());
        if x.len() != y.len() {
            return Err(Error::Shape(format!("descriptor {i} lengths {} and {}", x.len(), y.len())));
        }
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let d = x
            .iter()
            .zip(y)
            .map(|(u, v)| (u / nx - v / ny).powi(2))
            .sum::<f64>()
            .sqrt();
        best = Some(best.map_or(d, |b| b.min(d)));
    }
    best.ok_or(Error::UndefinedDistance)
}
