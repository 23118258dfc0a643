//! Dataset-level glue between the library modules: loading manifests,
//! mining training triplets, RPC evaluation and registration over pairs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use geofuse::datasets::{LoadedPair, PairManifest};
use geofuse::descriptors::{
    builtin_dim, extract_feature_set, DescriptorConfig, DescriptorRegistry, ExternalDescriptor, IndexedCloud,
    LocalDescriptor,
};
use geofuse::eval::{rpc_curve, rpc_sample, RpcConfig, RpcCurve};
use geofuse::fusion::{Fusion, Tuple};
use geofuse::geometry::dataset_resolution;
use geofuse::registration::{register_pair, PipelineConfig, RegistrationResult};
use geofuse::sampler::{pair_seed, sample_triplets, SamplerConfig};
use geofuse::trainer::TrainingSet;
use geofuse::{Error, Result};

/// A pair ready for description: both clouds indexed, plus where they came
/// from so external descriptor tables can be found.
pub struct PreparedPair {
    pub source: IndexedCloud,
    pub target: IndexedCloud,
    pub pair: LoadedPair,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
}

impl PreparedPair {
    pub fn new(pair: LoadedPair) -> Self {
        Self {
            source: IndexedCloud::new(pair.source.clone()),
            target: IndexedCloud::new(pair.target.clone()),
            pair,
            source_path: None,
            target_path: None,
        }
    }
}

pub struct Dataset {
    pub manifest: PairManifest,
    pub pr: f64,
    pub pairs: Vec<PreparedPair>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let manifest = PairManifest::load(path)?;
        if manifest.pairs.is_empty() {
            return Err(Error::InvalidInput("manifest lists no pairs".into()));
        }
        let mut pairs = Vec::with_capacity(manifest.pairs.len());
        for (i, entry) in manifest.pairs.iter().enumerate() {
            let mut p = PreparedPair::new(manifest.load_pair(i)?);
            p.source_path = Some(manifest.resolve(&entry.source));
            p.target_path = Some(manifest.resolve(&entry.target));
            pairs.push(p);
        }
        let pr = match manifest.pr {
            Some(pr) => pr,
            None => dataset_resolution(pairs.iter().flat_map(|p| [&p.pair.source, &p.pair.target]))?,
        };
        Ok(Self { manifest, pr, pairs })
    }

    pub fn from_pairs(pairs: Vec<LoadedPair>, pr: f64) -> Self {
        Self {
            manifest: PairManifest::default(),
            pr,
            pairs: pairs.into_iter().map(PreparedPair::new).collect(),
        }
    }
}

/// Table file holding descriptor `name` for the cloud at `cloud`:
/// `scan.ply` → `scan.<name>.desc`.
pub fn external_table_path(cloud: &Path, name: &str) -> PathBuf {
    cloud.with_extension(format!("{name}.desc"))
}

/// Checks every name is a built-in or could come from a table file.
pub fn check_descriptor_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Config("descriptor list is empty".into()));
    }
    for n in names {
        let ok = builtin_dim(n).is_some()
            || (!n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'));
        if !ok {
            return Err(Error::Config(format!("unknown descriptor `{n}`")));
        }
    }
    Ok(())
}

/// Descriptors for one cloud. Names that are not built in are read from
/// table files next to the cloud.
pub fn descriptors_for(
    cloud_path: Option<&Path>,
    names: &[String],
    cfg: &DescriptorConfig,
) -> Result<Vec<Arc<dyn LocalDescriptor>>> {
    let mut reg = DescriptorRegistry::new(cfg.clone())?;
    for n in names.iter().filter(|n| builtin_dim(n).is_none()) {
        let Some(cloud) = cloud_path else {
            return Err(Error::Config(format!("unknown descriptor `{n}`")));
        };
        let table = external_table_path(cloud, n);
        if !table.is_file() {
            return Err(Error::Config(format!(
                "unknown descriptor `{n}`: not built in and no table at {}",
                table.display()
            )));
        }
        let t = ExternalDescriptor::read(&table)?;
        if t.id() != n {
            return Err(Error::Validation(format!(
                "{} holds descriptor `{}`, expected `{n}`",
                table.display(),
                t.id()
            )));
        }
        reg.register_external(t)?;
    }
    reg.resolve(names)
}

/// Widths of the named descriptors on this dataset.
pub fn descriptor_dims(data: &Dataset, names: &[String], cfg: &DescriptorConfig) -> Result<Vec<usize>> {
    let first = data
        .pairs
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset holds no pairs".into()))?;
    Ok(descriptors_for(first.source_path.as_deref(), names, cfg)?
        .iter()
        .map(|d| d.dim())
        .collect())
}

/// Mines triplets on every pair and describes the points they touch.
pub fn build_training_set(
    data: &Dataset,
    names: &[String],
    desc: &DescriptorConfig,
    sampler: &SamplerConfig,
) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    for (i, p) in data.pairs.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: pair_seed(sampler.seed, i as u64),
            ..sampler.clone()
        };
        let batch = match sample_triplets(p.source.cloud(), p.target.index(), &p.pair.gt, &cfg) {
            Ok(b) => b,
            Err(Error::EmptyBatch(m)) => {
                log::warn!("pair {i}: no triplets ({m})");
                continue;
            }
            Err(e) => return Err(e),
        };
        if !batch.short_pool_anchors.is_empty() {
            log::debug!("pair {i}: {} anchors with short negative pools", batch.short_pool_anchors.len());
        }
        let src_desc = descriptors_for(p.source_path.as_deref(), names, desc)?;
        let tgt_desc = descriptors_for(p.target_path.as_deref(), names, desc)?;
        let added = add_pair_split(&mut set, p, &batch, &src_desc, &tgt_desc)?;
        log::info!("pair {i}: {added} triplets");
    }
    if set.is_empty() {
        return Err(Error::EmptyBatch("no pair produced any triplet".into()));
    }
    Ok(set)
}

fn add_pair_split(
    set: &mut TrainingSet,
    p: &PreparedPair,
    batch: &geofuse::sampler::TripletBatch,
    src_desc: &[Arc<dyn LocalDescriptor>],
    tgt_desc: &[Arc<dyn LocalDescriptor>],
) -> Result<usize> {
    if src_desc.iter().zip(tgt_desc).all(|(a, b)| Arc::ptr_eq(a, b) || a.id() == b.id())
        && src_desc.iter().all(|d| builtin_dim(d.id()).is_some())
    {
        return set.add_pair(&p.source, &p.target, batch, src_desc);
    }
    // Tables differ per cloud: describe each side with its own tables.
    let mut src: Vec<usize> = batch.triplets.iter().map(|t| t.anchor).collect();
    src.sort_unstable();
    src.dedup();
    let mut tgt: Vec<usize> = batch.triplets.iter().flat_map(|t| [t.positive, t.negative]).collect();
    tgt.sort_unstable();
    tgt.dedup();
    let s = extract_feature_set(&p.source, &src, src_desc)?;
    let t = extract_feature_set(&p.target, &tgt, tgt_desc)?;
    let base = set.tuples.len();
    let s_map = s.lookup();
    let t_map = t.lookup();
    set.tuples.extend(s.tuples().iter().cloned());
    set.tuples.extend(t.tuples().iter().cloned());
    let before = set.triplets.len();
    for tr in &batch.triplets {
        if let (Some(&a), Some(&pp), Some(&n)) = (s_map.get(&tr.anchor), t_map.get(&tr.positive), t_map.get(&tr.negative)) {
            set.triplets.push([base + a, base + s.len() + pp, base + s.len() + n]);
        }
    }
    Ok(set.triplets.len() - before)
}

/// Descriptor tuples of one pair's RPC keypoints.
pub struct RpcFeatures {
    pub source: Vec<Tuple>,
    pub target: Vec<Tuple>,
    /// Source keypoint positions moved by the ground truth.
    pub source_pos: Vec<nalgebra::Point3<f64>>,
    pub target_pos: Vec<nalgebra::Point3<f64>>,
}

pub fn rpc_features(
    p: &PreparedPair,
    names: &[String],
    desc: &DescriptorConfig,
    rpc: &RpcConfig,
) -> Result<RpcFeatures> {
    let sample = rpc_sample(p.source.cloud(), p.target.index(), &p.pair.gt, rpc)?;
    let s = extract_feature_set(
        &p.source,
        &sample.source_keypoints,
        &descriptors_for(p.source_path.as_deref(), names, desc)?,
    )?;
    let t = extract_feature_set(
        &p.target,
        &sample.target_keypoints,
        &descriptors_for(p.target_path.as_deref(), names, desc)?,
    )?;
    Ok(RpcFeatures {
        source_pos: s
            .keypoints()
            .iter()
            .map(|&k| p.pair.gt.apply_point(p.source.cloud().point(k)))
            .collect(),
        target_pos: t.keypoints().iter().map(|&k| *p.target.cloud().point(k)).collect(),
        source: s.tuples().to_vec(),
        target: t.tuples().to_vec(),
    })
}

pub fn rpc_for(features: &RpcFeatures, fusion: &Fusion, rpc: &RpcConfig) -> Result<RpcCurve> {
    if features.source.is_empty() || features.target.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    let nn = fusion.two_nn(&features.source, &features.target)?;
    rpc_curve(&features.source_pos, &features.target_pos, &nn, rpc.tolerance, &rpc.thresholds)
}

/// Every tuple of a set of RPC features, for fitting PCA.
pub fn pooled_tuples(features: &[RpcFeatures]) -> Vec<Tuple> {
    features
        .iter()
        .flat_map(|f| f.source.iter().chain(&f.target).cloned())
        .collect()
}

/// Ground-truth correspondences of a pair: the listed ones, else each
/// source point paired with the nearest target point to its moved position
/// when that lies within `tolerance`.
pub fn truth_for(p: &PreparedPair, tolerance: f64) -> Vec<(usize, usize)> {
    if let Some(c) = &p.pair.correspondences {
        return c.clone();
    }
    p.source
        .cloud()
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let (j, d) = p.target.index().nearest(&p.pair.gt.apply_point(q));
            (d <= tolerance).then_some((i, j))
        })
        .collect()
}

/// Registers one pair; the RMSE is taken over [`truth_for`].
pub fn register(
    p: &PreparedPair,
    names: &[String],
    desc: &DescriptorConfig,
    fusion: &Fusion,
    cfg: &PipelineConfig,
    gt_tolerance: f64,
) -> Result<RegistrationResult> {
    let d = descriptors_for(p.source_path.as_deref(), names, desc)?;
    if names.iter().any(|n| builtin_dim(n).is_none()) {
        return Err(Error::Config(
            "registration with table descriptors needs tables covering every keypoint; use built-ins".into(),
        ));
    }
    let truth = truth_for(p, gt_tolerance);
    register_pair(&p.source, &p.target, &d, fusion, cfg, Some(&truth))
}
