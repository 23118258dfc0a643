//! Subcommand bodies. Each writes its outputs, the resolved configuration
//! and a version file into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use geofuse::datasets::{
    generate_pair, read_ply, write_correspondences, write_ply, write_transform, PairEntry, PairManifest, PlyEncoding,
    SynthConfig,
};
use geofuse::descriptors::{builtin_dim, extract_feature_set, ExternalDescriptor, IndexedCloud};
use geofuse::eval::{alpha_recall, auc, colorize_features, RpcCurve, RpcPoint};
use geofuse::fusion::{Fusion, FusionKind, Tuple};
use geofuse::geometry::{compute_resolution, dataset_resolution, estimate_normals, PointCloud};
use geofuse::net::{load_model, save_model, NetworkParams};
use geofuse::sampler::pair_seed;
use geofuse::trainer::{train, TrainReport};
use geofuse::{Error, Result};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::pipeline::{
    build_training_set, check_descriptor_names, descriptor_dims, descriptors_for, pooled_tuples, register,
    rpc_features, rpc_for, Dataset, RpcFeatures,
};

pub const VERSION_FILE: &str = "VERSION";
pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Normals of clouds read without them are estimated over this many pr.
const NORMAL_RADIUS_PR: f64 = 4.0;

pub fn version_string() -> String {
    format!("geofuse {}", env!("CARGO_PKG_VERSION"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Creates `out` and writes the resolved config, the version string and
/// digests of the named input files.
pub fn prepare_output(out: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_text())?;
    write_file(&out.join(VERSION_FILE), version_string() + "\n")?;
    if !inputs.is_empty() {
        let mut text = String::new();
        for p in inputs {
            let _ = writeln!(text, "{}  {}", sha256_hex(&read_file(p)?), p.display());
        }
        write_file(&out.join("inputs.sha256"), text)?;
    }
    Ok(())
}

fn resolution_of(cfg: &RunConfig, data: &Dataset) -> f64 {
    cfg.data.pr.unwrap_or(data.pr)
}

fn load_dataset(cfg: &RunConfig, manifest: &Path) -> Result<(Dataset, f64)> {
    let data = Dataset::load(manifest)?;
    let pr = resolution_of(cfg, &data);
    Ok((data, pr))
}

pub struct SynthSummary {
    pub manifest: PathBuf,
    pub pairs: usize,
    pub pr: f64,
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let s = &cfg.synth;
    let configs: Vec<SynthConfig> = (0..s.pairs)
        .map(|i| SynthConfig {
            surface: s.surface.for_pair(i),
            points: s.points,
            noise: s.noise_pr,
            overlap: s.overlap,
            max_rotation: s.max_rotation,
            max_translation: s.max_translation_pr,
            seed: pair_seed(cfg.run.seed, i as u64),
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    prepare_output(out, cfg, &[])?;
    let generated: Vec<_> = configs.par_iter().map(generate_pair).collect::<Result<_>>()?;
    let pr = dataset_resolution(generated.iter().flat_map(|p| [&p.source, &p.target]))?;
    let mut manifest = PairManifest {
        pr: Some(pr),
        ..Default::default()
    };
    for (i, p) in generated.iter().enumerate() {
        let stem = format!("pair_{i:03}");
        let entry = PairEntry {
            source: format!("{stem}_source.ply").into(),
            target: format!("{stem}_target.ply").into(),
            transform: format!("{stem}_gt.txt").into(),
            overlap: p.overlap(),
            correspondences: Some(format!("{stem}_corr.txt").into()),
        };
        write_ply(out.join(&entry.source), &p.source, None, PlyEncoding::BinaryLittleEndian)?;
        write_ply(out.join(&entry.target), &p.target, None, PlyEncoding::BinaryLittleEndian)?;
        write_transform(out.join(&entry.transform), &p.gt)?;
        if let Some(c) = &entry.correspondences {
            write_correspondences(out.join(c), &p.correspondences)?;
        }
        manifest.pairs.push(entry);
    }
    let path = out.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(SynthSummary {
        manifest: path,
        pairs: generated.len(),
        pr,
    })
}

pub struct TrainSummary {
    pub model: PathBuf,
    pub report: TrainReport,
    pub triplets: usize,
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let names = &cfg.descriptors.names;
    check_descriptor_names(names)?;
    let (data, pr) = load_dataset(cfg, manifest)?;
    let desc = cfg.descriptor_config(pr);
    let dims = descriptor_dims(&data, names, &desc)?;
    let net = cfg.network_config(&dims);
    net.validate()?;
    let epochs = cfg.preset(&dims).epochs;
    prepare_output(out, cfg, &[manifest])?;
    let set = build_training_set(&data, names, &desc, &cfg.sampler_config(pr))?;
    log::info!("training on {} triplets over {} tuples", set.triplets.len(), set.tuples.len());
    let (params, report) = train(&set, net, &cfg.train_config(epochs), None)?;
    let model = out.join(MODEL_FILE);
    write_file(&model, save_model(&params))?;
    write_file(&out.join("train_report.csv"), report.to_csv())?;
    write_file(&out.join("model.sha256"), format!("{}\n", report.digest))?;
    Ok(TrainSummary {
        model,
        report,
        triplets: set.triplets.len(),
    })
}

pub fn read_model(path: &Path) -> Result<NetworkParams> {
    load_model(&read_file(path)?)
}

/// The fusion named by `eval.method`. PCA is fitted on `fit` tuples unless a
/// fit manifest is configured.
fn resolve_fusion(cfg: &RunConfig, dims: &[usize], fit: impl FnOnce() -> Result<Vec<Tuple>>) -> Result<Fusion> {
    match cfg.eval.method {
        FusionKind::Network => {
            let path = cfg
                .eval
                .model
                .as_ref()
                .ok_or_else(|| Error::Config("method nn needs eval.model (or --model)".into()))?;
            let params = read_model(path)?;
            if params.config().descriptor_dims != dims {
                return Err(Error::Config(format!(
                    "model expects descriptor widths {:?}, the descriptor list gives {dims:?}",
                    params.config().descriptor_dims
                )));
            }
            Ok(Fusion::Network(params))
        }
        FusionKind::Concat => Ok(Fusion::Concat),
        FusionKind::MinPool => Ok(Fusion::MinPool),
        FusionKind::Pca => {
            let k = cfg.eval.dims.unwrap_or(dims.iter().sum());
            let tuples = match &cfg.eval.fit_manifest {
                Some(m) => {
                    let (data, pr) = load_dataset(cfg, m)?;
                    let features = features_of(cfg, &data, pr)?;
                    pooled_tuples(&features)
                }
                None => fit()?,
            };
            Fusion::fit_pca(&tuples, k)
        }
    }
}

fn features_of(cfg: &RunConfig, data: &Dataset, pr: f64) -> Result<Vec<RpcFeatures>> {
    let desc = cfg.descriptor_config(pr);
    let rpc = cfg.rpc_config(pr);
    let names = &cfg.descriptors.names;
    data.pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let r = geofuse::eval::RpcConfig {
                seed: pair_seed(rpc.seed, i as u64),
                ..rpc.clone()
            };
            rpc_features(p, names, &desc, &r)
        })
        .collect()
}

/// Output width of a fusion on tuples of the given descriptor widths.
pub fn fused_dims(fusion: &Fusion, dims: &[usize]) -> usize {
    match fusion {
        Fusion::Network(p) => p.config().n_out,
        Fusion::Pca(m) => m.target_dim(),
        Fusion::Concat | Fusion::MinPool => dims.iter().sum(),
    }
}

/// Sums match counts over pairs at each threshold.
pub fn aggregate_rpc(curves: &[RpcCurve]) -> Option<RpcCurve> {
    let first = curves.first()?;
    let possible: usize = curves.iter().map(|c| c.possible).sum();
    let points: Vec<RpcPoint> = (0..first.points.len())
        .map(|j| {
            let matches: usize = curves.iter().map(|c| c.points[j].matches).sum();
            let correct: usize = curves.iter().map(|c| c.points[j].correct).sum();
            RpcPoint {
                threshold: first.points[j].threshold,
                matches,
                correct,
                precision: if matches == 0 { 0.0 } else { correct as f64 / matches as f64 },
                recall: correct as f64 / possible as f64,
            }
        })
        .collect();
    let pr: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.matches > 0)
        .map(|p| (p.precision, p.recall))
        .collect();
    Some(RpcCurve {
        auc: auc(&pr),
        points,
        possible,
    })
}

pub struct EvalSummary {
    pub method: FusionKind,
    pub dims: usize,
    pub curves: Vec<RpcCurve>,
    pub aggregate: RpcCurve,
}

impl EvalSummary {
    pub fn mean_auc(&self) -> f64 {
        self.curves.iter().map(|c| c.auc).sum::<f64>() / self.curves.len() as f64
    }
}

pub fn cmd_eval(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let names = &cfg.descriptors.names;
    check_descriptor_names(names)?;
    let (data, pr) = load_dataset(cfg, manifest)?;
    let dims = descriptor_dims(&data, names, &cfg.descriptor_config(pr))?;
    let mut inputs = vec![manifest];
    if let (FusionKind::Network, Some(m)) = (cfg.eval.method, &cfg.eval.model) {
        inputs.push(m);
    }
    // Fail on a missing model before describing anything.
    if cfg.eval.method == FusionKind::Network {
        resolve_fusion(cfg, &dims, || Ok(Vec::new()))?;
    }
    prepare_output(out, cfg, &inputs)?;
    let features = features_of(cfg, &data, pr)?;
    let fusion = resolve_fusion(cfg, &dims, || Ok(pooled_tuples(&features)))?;
    let rpc = cfg.rpc_config(pr);
    let curves: Vec<RpcCurve> = features
        .par_iter()
        .map(|f| rpc_for(f, &fusion, &rpc))
        .collect::<Result<_>>()?;
    let aggregate = aggregate_rpc(&curves).ok_or(Error::UndefinedRecall)?;
    let summary = EvalSummary {
        method: fusion.kind(),
        dims: fused_dims(&fusion, &dims),
        curves,
        aggregate,
    };
    write_file(&out.join("rpc.csv"), rpc_csv(&summary))?;
    write_file(&out.join("auc.csv"), auc_csv(&summary))?;
    Ok(summary)
}

fn rpc_csv(s: &EvalSummary) -> String {
    let mut out = String::from("pair,method,dims,threshold,matches,correct,precision,recall\n");
    let rows = s
        .curves
        .iter()
        .enumerate()
        .map(|(i, c)| (i.to_string(), c))
        .chain(std::iter::once(("all".to_string(), &s.aggregate)));
    for (id, c) in rows {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{}",
                s.method.name(),
                s.dims,
                p.threshold,
                p.matches,
                p.correct,
                p.precision,
                p.recall
            );
        }
    }
    out
}

fn auc_csv(s: &EvalSummary) -> String {
    let mut out = String::from("pair,method,dims,possible,auc\n");
    for (i, c) in s.curves.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{},{}", s.method.name(), s.dims, c.possible, c.auc);
    }
    let _ = writeln!(
        out,
        "all,{},{},{},{}",
        s.method.name(),
        s.dims,
        s.aggregate.possible,
        s.aggregate.auc
    );
    let _ = writeln!(out, "mean,{},{},,{}", s.method.name(), s.dims, s.mean_auc());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterRow {
    pub pair: usize,
    pub source_keypoints: usize,
    pub target_keypoints: usize,
    pub putative: usize,
    pub inliers: usize,
    /// RMSE in pr units; `None` when the pipeline produced no estimate.
    pub rmse_pr: Option<f64>,
    pub success: bool,
    pub error: Option<String>,
}

pub struct RegisterSummary {
    pub method: FusionKind,
    pub rows: Vec<RegisterRow>,
    /// (α in pr, α-recall)
    pub alpha_recall: Vec<(f64, f64)>,
}

pub fn cmd_register(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<RegisterSummary> {
    cfg.validate()?;
    let names = &cfg.descriptors.names;
    check_descriptor_names(names)?;
    if let Some(n) = names.iter().find(|n| builtin_dim(n).is_none()) {
        return Err(Error::Config(format!(
            "registration describes every keypoint, so `{n}` must be a built-in descriptor"
        )));
    }
    let (data, pr) = load_dataset(cfg, manifest)?;
    let desc = cfg.descriptor_config(pr);
    let dims = descriptor_dims(&data, names, &desc)?;
    if cfg.eval.method == FusionKind::Network {
        resolve_fusion(cfg, &dims, || Ok(Vec::new()))?;
    }
    let mut inputs = vec![manifest];
    if let (FusionKind::Network, Some(m)) = (cfg.eval.method, &cfg.eval.model) {
        inputs.push(m);
    }
    prepare_output(out, cfg, &inputs)?;
    let fusion = resolve_fusion(cfg, &dims, || Ok(pooled_tuples(&features_of(cfg, &data, pr)?)))?;
    let pipe = cfg.pipeline_config(pr);
    let gt_tol = cfg.register.gt_tolerance_pr * pr;
    let results: Vec<(RegisterRow, Option<geofuse::geometry::RigidTransform>)> = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| match register(p, names, &desc, &fusion, &pipe, gt_tol) {
            Ok(r) => Ok((
                RegisterRow {
                    pair: i,
                    source_keypoints: r.source_keypoints,
                    target_keypoints: r.target_keypoints,
                    putative: r.putative.len(),
                    inliers: r.inliers.len(),
                    rmse_pr: r.rmse.map(|e| e / pr),
                    success: r.success,
                    error: None,
                },
                Some(r.transform),
            )),
            Err(e @ (Error::InsufficientData { .. } | Error::DegenerateSample(_))) => Ok((
                RegisterRow {
                    pair: i,
                    source_keypoints: 0,
                    target_keypoints: 0,
                    putative: 0,
                    inliers: 0,
                    rmse_pr: None,
                    success: false,
                    error: Some(e.to_string()),
                },
                None,
            )),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    if cfg.register.write_aligned {
        for ((row, t), p) in results.iter().zip(&data.pairs) {
            if let Some(t) = t {
                let aligned = p.pair.source.transformed(t);
                write_ply(
                    out.join(format!("aligned_{:03}.ply", row.pair)),
                    &aligned,
                    None,
                    PlyEncoding::BinaryLittleEndian,
                )?;
            }
        }
    }
    let rows: Vec<RegisterRow> = results.into_iter().map(|(r, _)| r).collect();
    let rmses: Vec<f64> = rows.iter().map(|r| r.rmse_pr.unwrap_or(f64::INFINITY)).collect();
    let alpha = cfg
        .register
        .alphas_pr
        .iter()
        .map(|&a| alpha_recall(&rmses, a).map(|r| (a, r)))
        .collect::<Result<Vec<_>>>()?;
    let summary = RegisterSummary {
        method: fusion.kind(),
        rows,
        alpha_recall: alpha,
    };
    write_file(&out.join("registration.csv"), register_csv(cfg, &summary))?;
    let mut text = String::from("method,iterations,alpha_pr,alpha_recall\n");
    for (a, r) in &summary.alpha_recall {
        let _ = writeln!(text, "{},{},{a},{r}", summary.method.name(), cfg.register.iterations);
    }
    write_file(&out.join("alpha_recall.csv"), text)?;
    Ok(summary)
}

fn register_csv(cfg: &RunConfig, s: &RegisterSummary) -> String {
    let mut out = String::from(
        "pair,method,iterations,keypoint_leaf_pr,source_keypoints,target_keypoints,putative,inliers,rmse_pr,success,error\n",
    );
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.pair,
            s.method.name(),
            cfg.register.iterations,
            cfg.register.keypoint_leaf_pr,
            r.source_keypoints,
            r.target_keypoints,
            r.putative,
            r.inliers,
            r.rmse_pr.map(|e| e.to_string()).unwrap_or_default(),
            r.success,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out
}

/// Reads a cloud, estimating normals when the file has none.
fn read_cloud(cfg: &RunConfig, path: &Path) -> Result<(PointCloud, f64)> {
    let mut cloud = read_ply(path)?.cloud;
    let pr = match cfg.data.pr {
        Some(pr) => pr,
        None => compute_resolution(&cloud)?,
    };
    if !cloud.has_normals() {
        log::info!("{}: estimating normals", path.display());
        cloud = estimate_normals(&cloud, NORMAL_RADIUS_PR * pr)?;
    }
    Ok((cloud, pr))
}

fn describe_all(cfg: &RunConfig, path: &Path) -> Result<(PointCloud, geofuse::descriptors::FeatureSet)> {
    let names = &cfg.descriptors.names;
    check_descriptor_names(names)?;
    let (cloud, pr) = read_cloud(cfg, path)?;
    let surface = IndexedCloud::new(cloud.clone());
    let all: Vec<usize> = (0..cloud.len()).collect();
    let set = extract_feature_set(&surface, &all, &descriptors_for(Some(path), names, &cfg.descriptor_config(pr))?)?;
    if !set.excluded().is_empty() {
        log::warn!("{} of {} points could not be described", set.excluded().len(), cloud.len());
    }
    Ok((cloud, set))
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or("cloud".into(), |s| s.to_string_lossy().into_owned())
}

pub struct ColorizeSummary {
    pub output: PathBuf,
    pub vertices: usize,
    pub described: usize,
}

/// Colors each point by its fused feature; points that could not be
/// described stay mid-gray.
pub fn cmd_colorize(cfg: &RunConfig, cloud_path: &Path, out: &Path) -> Result<ColorizeSummary> {
    cfg.validate()?;
    let names = &cfg.descriptors.names;
    check_descriptor_names(names)?;
    if cfg.eval.method == FusionKind::MinPool {
        return Err(Error::Config("min_pool produces no feature to color by".into()));
    }
    // Reject a bad model before the expensive description pass.
    let dims_hint: Vec<usize> = names.iter().filter_map(|n| builtin_dim(n)).collect();
    if cfg.eval.method == FusionKind::Network && dims_hint.len() == names.len() {
        resolve_fusion(cfg, &dims_hint, || Ok(Vec::new()))?;
    }
    let mut inputs = vec![cloud_path];
    if let (FusionKind::Network, Some(m)) = (cfg.eval.method, &cfg.eval.model) {
        inputs.push(m);
    }
    prepare_output(out, cfg, &inputs)?;
    let (cloud, set) = describe_all(cfg, cloud_path)?;
    let fusion = resolve_fusion(cfg, &set.dims(), || Ok(set.tuples().to_vec()))?;
    let features = fusion.fuse(set.tuples())?;
    let mut colors = vec![[128u8; 3]; cloud.len()];
    for (&k, c) in set.keypoints().iter().zip(colorize_features(&features)?) {
        colors[k] = c;
    }
    let output = out.join(format!("{}_colored.ply", stem_of(cloud_path)));
    write_ply(&output, &cloud, Some(&colors), PlyEncoding::BinaryLittleEndian)?;
    Ok(ColorizeSummary {
        output,
        vertices: cloud.len(),
        described: set.len(),
    })
}

/// Writes one descriptor table per name, rows for every describable point.
pub fn cmd_describe(cfg: &RunConfig, cloud_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_output(out, cfg, &[cloud_path])?;
    let (_, set) = describe_all(cfg, cloud_path)?;
    let stem = stem_of(cloud_path);
    let mut written = Vec::new();
    for (j, info) in set.descriptors().iter().enumerate() {
        let mut table = ExternalDescriptor::new(info.id.clone(), info.dim);
        for (i, &k) in set.keypoints().iter().enumerate() {
            table.insert(k, set.tuple(i)[j].clone())?;
        }
        let path = out.join(format!("{stem}.{}.desc", info.id));
        table.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Resolution of a PLY file, or the dataset resolution of a manifest.
pub fn cmd_resolution(path: &Path) -> Result<f64> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        return compute_resolution(&read_ply(path)?.cloud);
    }
    let m = PairManifest::load(path)?;
    let mut clouds = Vec::new();
    for e in &m.pairs {
        clouds.push(read_ply(m.resolve(&e.source))?.cloud);
        clouds.push(read_ply(m.resolve(&e.target))?.cloud);
    }
    dataset_resolution(&clouds)
}
