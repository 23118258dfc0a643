//! Uniform handle over the fusion methods used for matching.

use rayon::prelude::*;

use crate::baselines::{concatenate, min_pool_distance, PcaModel};
use crate::error::{Error, Result};
use crate::eval::{mutual_nearest, two_nn, two_nn_by, Correspondence};
use crate::net::NetworkParams;

pub type Tuple = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub enum Fusion {
    Network(NetworkParams),
    Concat,
    Pca(PcaModel),
    /// Matching by the smallest per-descriptor normalized distance.
    MinPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Network,
    Concat,
    Pca,
    MinPool,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" | "network" => Ok(Self::Network),
            "concat" => Ok(Self::Concat),
            "pca" => Ok(Self::Pca),
            "min_pool" | "min-pool" | "minpool" => Ok(Self::MinPool),
            other => Err(Error::Config(format!(
                "unknown fusion method `{other}` (expected nn, concat, pca or min_pool)"
            ))),
        }
    }
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Network => "nn",
            Self::Concat => "concat",
            Self::Pca => "pca",
            Self::MinPool => "min_pool",
        }
    }
}

impl Fusion {
    pub fn kind(&self) -> FusionKind {
        match self {
            Self::Network(_) => FusionKind::Network,
            Self::Concat => FusionKind::Concat,
            Self::Pca(_) => FusionKind::Pca,
            Self::MinPool => FusionKind::MinPool,
        }
    }

    /// PCA over concatenated training tuples.
    pub fn fit_pca(training: &[Tuple], k: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = training.iter().map(|t| concatenate(t)).collect();
        Ok(Self::Pca(PcaModel::fit(&rows, k)?))
    }

    /// One fused vector per tuple. Min pooling has none.
    pub fn fuse(&self, tuples: &[Tuple]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Network(params) => {
                let chunks: Vec<Result<Vec<Vec<f64>>>> = tuples
                    .par_chunks(256)
                    .map(|chunk| {
                        let refs: Vec<&[Vec<f64>]> = chunk.iter().map(|t| &t[..]).collect();
                        params.forward_batch(&refs)
                    })
                    .collect();
                let mut out = Vec::with_capacity(tuples.len());
                for c in chunks {
                    out.extend(c?);
                }
                Ok(out)
            }
            Self::Concat => Ok(tuples.iter().map(|t| concatenate(t)).collect()),
            Self::Pca(model) => tuples.iter().map(|t| model.project(&concatenate(t))).collect(),
            Self::MinPool => Err(Error::Config("min pooling produces no fused vector".into())),
        }
    }

    /// Nearest source tuple and ratio for every target tuple.
    pub fn two_nn(&self, source: &[Tuple], target: &[Tuple]) -> Result<Vec<Correspondence>> {
        match self {
            Self::MinPool => two_nn_by(source.len(), target.len(), |s, t| {
                min_pool_distance(&source[s], &target[t])
            }),
            _ => two_nn(&self.fuse(source)?, &self.fuse(target)?),
        }
    }

    /// Putative matches for registration: the ratio test on fused features,
    /// mutual nearest neighbors for min pooling.
    pub fn putative_matches(
        &self,
        source: &[Tuple],
        target: &[Tuple],
        ratio_threshold: f64,
    ) -> Result<Vec<Correspondence>> {
        match self {
            Self::MinPool => mutual_nearest(source.len(), target.len(), |s, t| {
                min_pool_distance(&source[s], &target[t])
            }),
            _ => Ok(self
                .two_nn(source, target)?
                .into_iter()
                .filter(|c| c.ratio < ratio_threshold)
                .collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    fn tuples() -> Vec<Tuple> {
        (0..12)
            .map(|i| {
                let x = i as f64;
                vec![vec![x, 0.5 * x, 1.0], vec![(x * 0.3).sin(), 2.0]]
            })
            .collect()
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("min-pool".parse::<FusionKind>().unwrap(), FusionKind::MinPool);
        assert!("sum".parse::<FusionKind>().is_err());
    }

    #[test]
    fn full_pca_matches_concat() {
        let t = tuples();
        let concat = Fusion::Concat.two_nn(&t, &t).unwrap();
        // The tuples span a 2-d affine subspace.
        let pca = Fusion::fit_pca(&t, 2).unwrap();
        assert_eq!(pca.fuse(&t).unwrap()[0].len(), 2);
        let nn = pca.two_nn(&t, &t).unwrap();
        for (a, b) in nn.iter().zip(&concat) {
            assert_eq!((a.source, a.target), (b.source, b.target));
            assert!((a.distance - b.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn network_fuse_matches_forward() {
        let params = NetworkParams::init(NetworkConfig::new(vec![3, 2], 4, 6, 3), 0).unwrap();
        let t = tuples();
        let fused = Fusion::Network(params.clone()).fuse(&t).unwrap();
        for (tuple, f) in t.iter().zip(&fused) {
            assert_eq!(&params.forward(tuple).unwrap(), f);
        }
    }

    #[test]
    fn min_pool_matching() {
        let t = tuples();
        assert!(Fusion::MinPool.fuse(&t).is_err());
        let m = Fusion::MinPool.putative_matches(&t, &t, 0.8).unwrap();
        assert!(m.iter().all(|c| c.source == c.target));
    }
}
