//! Run configuration: `section.key = value` text, one key per line.
//!
//! Lengths ending in `_pr` are multiples of the dataset point-cloud
//! resolution. `auto` leaves a value to be derived at run time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geofuse::datasets::SurfaceKind;
use geofuse::descriptors::{DescriptorConfig, OBJECT_SUPPORT_PR};
use geofuse::eval::{default_thresholds, RpcConfig};
use geofuse::fusion::FusionKind;
use geofuse::losses::{LossConfig, LossKind};
use geofuse::net::{NetworkConfig, NetworkPreset};
use geofuse::registration::{PipelineConfig, RansacConfig};
use geofuse::sampler::SamplerConfig;
use geofuse::trainer::TrainConfig;
use geofuse::{Error, Result};

/// File name of the resolved configuration in every output directory.
pub const CONFIG_FILE: &str = "config.txt";

/// Surfaces drawn by the generator: one kind, or both in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceChoice {
    Alternate,
    Only(SurfaceKind),
}

impl FromStr for SurfaceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "alternate" {
            return Ok(Self::Alternate);
        }
        s.parse().map(Self::Only)
    }
}

impl SurfaceChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alternate => "alternate",
            Self::Only(k) => k.name(),
        }
    }

    pub fn for_pair(self, i: usize) -> SurfaceKind {
        match self {
            Self::Only(k) => k,
            Self::Alternate if i.is_multiple_of(2) => SurfaceKind::BumpySphere,
            Self::Alternate => SurfaceKind::HeightField,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub pairs: usize,
    pub surface: SurfaceChoice,
    pub points: usize,
    pub noise_pr: f64,
    pub overlap: f64,
    pub max_rotation: f64,
    pub max_translation_pr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Resolution override; `None` takes the manifest value or estimates it.
    pub pr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSection {
    pub names: Vec<String>,
    pub support_radius_pr: f64,
    pub lfsh_bins: (usize, usize, usize),
    pub si_radial_bins: usize,
    pub si_elevation_bins: usize,
    pub rcs_views: usize,
    pub rcs_sectors: usize,
}

/// Architecture overrides; `None` takes the preset for the descriptor list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSection {
    pub n_intra: Option<usize>,
    pub n_inter: Option<usize>,
    pub n_out: Option<usize>,
    pub use_intra: bool,
    pub relu_on_output: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub loss: LossKind,
    pub tau_tri: f64,
    pub tau_pair: f64,
    pub contrastive_margin: f64,
    pub squared_distances: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub tau_anc_pr: f64,
    pub tau_pos_pr: f64,
    pub tau_hard_pr: f64,
    pub n_neg: usize,
    pub n_hard_neg: usize,
    pub redraw_positive: bool,
    pub max_anchors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub method: FusionKind,
    pub model: Option<PathBuf>,
    /// PCA output width; `None` keeps the full concatenated width.
    pub dims: Option<usize>,
    /// Manifest whose features fit PCA; `None` fits on the evaluated pairs.
    pub fit_manifest: Option<PathBuf>,
    pub keypoints: usize,
    pub tolerance_pr: f64,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterSection {
    pub iterations: usize,
    pub inlier_threshold_pr: f64,
    pub min_inliers: usize,
    pub keypoint_leaf_pr: f64,
    pub ratio_threshold: f64,
    pub alphas_pr: Vec<f64>,
    pub gt_tolerance_pr: f64,
    pub write_aligned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub synth: SynthSection,
    pub data: DataSection,
    pub descriptors: DescriptorSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub register: RegisterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desc = DescriptorConfig::with_support_radius(1.0);
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let sampler = SamplerConfig::from_resolution(1.0, 0);
        let rpc = RpcConfig::from_resolution(1.0, 0);
        let pipe = PipelineConfig::from_resolution(1.0, 0);
        Self {
            run: RunSection { seed: 0, jobs: 0 },
            synth: SynthSection {
                pairs: 10,
                surface: SurfaceChoice::Alternate,
                points: 20_000,
                noise_pr: 0.0,
                overlap: 0.6,
                max_rotation: std::f64::consts::PI,
                max_translation_pr: 50.0,
            },
            data: DataSection { pr: None },
            descriptors: DescriptorSection {
                names: vec!["lfsh".into()],
                support_radius_pr: OBJECT_SUPPORT_PR,
                lfsh_bins: desc.lfsh_bins,
                si_radial_bins: desc.si_radial_bins,
                si_elevation_bins: desc.si_elevation_bins,
                rcs_views: desc.rcs_views,
                rcs_sectors: desc.rcs_sectors,
            },
            net: NetSection {
                n_intra: None,
                n_inter: None,
                n_out: None,
                use_intra: true,
                relu_on_output: true,
            },
            train: TrainSection {
                learning_rate: train.learning_rate,
                beta1: train.beta1,
                beta2: train.beta2,
                epsilon: train.epsilon,
                batch_size: train.batch_size,
                epochs: None,
                loss: loss.kind,
                tau_tri: loss.tau_tri,
                tau_pair: loss.tau_pair,
                contrastive_margin: loss.contrastive_margin,
                squared_distances: loss.squared_distances,
            },
            sampler: SamplerSection {
                tau_anc_pr: sampler.tau_anc,
                tau_pos_pr: sampler.tau_pos,
                tau_hard_pr: sampler.tau_hard,
                n_neg: sampler.n_neg,
                n_hard_neg: sampler.n_hard_neg,
                redraw_positive: sampler.redraw_positive,
                max_anchors: Some(300),
            },
            eval: EvalSection {
                method: FusionKind::Network,
                model: None,
                dims: None,
                fit_manifest: None,
                keypoints: rpc.keypoints,
                tolerance_pr: rpc.tolerance,
                thresholds: default_thresholds(),
            },
            register: RegisterSection {
                iterations: pipe.ransac.iterations,
                inlier_threshold_pr: pipe.ransac.inlier_threshold,
                min_inliers: pipe.ransac.min_inliers,
                keypoint_leaf_pr: pipe.keypoint_leaf,
                ratio_threshold: pipe.ratio_threshold,
                alphas_pr: vec![1.0, 2.0, 3.0, 5.0],
                gt_tolerance_pr: 1.0,
                write_aligned: false,
            },
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("`{key}`: cannot read `{value}` as {want}"))
}

fn num<T: FromStr>(key: &str, v: &str, want: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, want))
}

fn float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v, "a number")?;
    if !x.is_finite() {
        return Err(bad(key, v, "a finite number"));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn auto<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect::<Result<Vec<T>>>()
        .and_then(|l| {
            if l.is_empty() {
                Err(bad(key, v, "a non-empty list"))
            } else {
                Ok(l)
            }
        })
}

fn show_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), |x| x.to_string())
}

fn show_f(v: f64) -> String {
    format!("{v:?}")
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(|x| show_f(*x)).collect::<Vec<_>>().join(",")
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Reads configuration text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("line {}", n + 1),
                message: format!("expected `section.key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run.seed" => self.run.seed = num(key, v, "an unsigned integer")?,
            "run.jobs" => self.run.jobs = num(key, v, "a thread count")?,
            "synth.pairs" => self.synth.pairs = num(key, v, "a count")?,
            "synth.surface" => self.synth.surface = v.parse().map_err(|_| bad(key, v, "a surface kind"))?,
            "synth.points" => self.synth.points = num(key, v, "a count")?,
            "synth.noise_pr" => self.synth.noise_pr = float(key, v)?,
            "synth.overlap" => self.synth.overlap = float(key, v)?,
            "synth.max_rotation" => self.synth.max_rotation = float(key, v)?,
            "synth.max_translation_pr" => self.synth.max_translation_pr = float(key, v)?,
            "data.pr" => self.data.pr = auto(v, |s| float(key, s))?,
            "descriptors.names" => self.descriptors.names = list(key, v, |_, s| Ok(s.to_string()))?,
            "descriptors.support_radius_pr" => self.descriptors.support_radius_pr = float(key, v)?,
            "descriptors.lfsh_bins" => {
                let b: Vec<usize> = list(key, v, |k, s| num(k, s, "a bin count"))?;
                let [a, b, c] = b[..] else {
                    return Err(bad(key, v, "three bin counts"));
                };
                self.descriptors.lfsh_bins = (a, b, c);
            }
            "descriptors.si_radial_bins" => self.descriptors.si_radial_bins = num(key, v, "a bin count")?,
            "descriptors.si_elevation_bins" => self.descriptors.si_elevation_bins = num(key, v, "a bin count")?,
            "descriptors.rcs_views" => self.descriptors.rcs_views = num(key, v, "a count")?,
            "descriptors.rcs_sectors" => self.descriptors.rcs_sectors = num(key, v, "a count")?,
            "net.n_intra" => self.net.n_intra = auto(v, |s| num(key, s, "a width"))?,
            "net.n_inter" => self.net.n_inter = auto(v, |s| num(key, s, "a width"))?,
            "net.n_out" => self.net.n_out = auto(v, |s| num(key, s, "a width"))?,
            "net.use_intra" => self.net.use_intra = boolean(key, v)?,
            "net.relu_on_output" => self.net.relu_on_output = boolean(key, v)?,
            "train.learning_rate" => self.train.learning_rate = float(key, v)?,
            "train.beta1" => self.train.beta1 = float(key, v)?,
            "train.beta2" => self.train.beta2 = float(key, v)?,
            "train.epsilon" => self.train.epsilon = float(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v, "a count")?,
            "train.epochs" => self.train.epochs = auto(v, |s| num(key, s, "a count"))?,
            "train.loss" => self.train.loss = v.parse().map_err(|_| bad(key, v, "triplet, improved or contrastive"))?,
            "train.tau_tri" => self.train.tau_tri = float(key, v)?,
            "train.tau_pair" => self.train.tau_pair = float(key, v)?,
            "train.contrastive_margin" => self.train.contrastive_margin = float(key, v)?,
            "train.squared_distances" => self.train.squared_distances = boolean(key, v)?,
            "sampler.tau_anc_pr" => self.sampler.tau_anc_pr = float(key, v)?,
            "sampler.tau_pos_pr" => self.sampler.tau_pos_pr = float(key, v)?,
            "sampler.tau_hard_pr" => self.sampler.tau_hard_pr = float(key, v)?,
            "sampler.n_neg" => self.sampler.n_neg = num(key, v, "a count")?,
            "sampler.n_hard_neg" => self.sampler.n_hard_neg = num(key, v, "a count")?,
            "sampler.redraw_positive" => self.sampler.redraw_positive = boolean(key, v)?,
            "sampler.max_anchors" => self.sampler.max_anchors = auto(v, |s| num(key, s, "a count"))?,
            "eval.method" => self.eval.method = v.parse()?,
            "eval.model" => self.eval.model = auto(v, |s| Ok(PathBuf::from(s)))?,
            "eval.dims" => self.eval.dims = auto(v, |s| num(key, s, "a width"))?,
            "eval.fit_manifest" => self.eval.fit_manifest = auto(v, |s| Ok(PathBuf::from(s)))?,
            "eval.keypoints" => self.eval.keypoints = num(key, v, "a count")?,
            "eval.tolerance_pr" => self.eval.tolerance_pr = float(key, v)?,
            "eval.thresholds" => self.eval.thresholds = list(key, v, float)?,
            "register.iterations" => self.register.iterations = num(key, v, "a count")?,
            "register.inlier_threshold_pr" => self.register.inlier_threshold_pr = float(key, v)?,
            "register.min_inliers" => self.register.min_inliers = num(key, v, "a count")?,
            "register.keypoint_leaf_pr" => self.register.keypoint_leaf_pr = float(key, v)?,
            "register.ratio_threshold" => self.register.ratio_threshold = float(key, v)?,
            "register.alphas_pr" => self.register.alphas_pr = list(key, v, float)?,
            "register.gt_tolerance_pr" => self.register.gt_tolerance_pr = float(key, v)?,
            "register.write_aligned" => self.register.write_aligned = boolean(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.descriptors;
        let (a, b, c) = d.lfsh_bins;
        vec![
            ("run.seed", self.run.seed.to_string()),
            ("run.jobs", self.run.jobs.to_string()),
            ("synth.pairs", self.synth.pairs.to_string()),
            ("synth.surface", self.synth.surface.name().into()),
            ("synth.points", self.synth.points.to_string()),
            ("synth.noise_pr", show_f(self.synth.noise_pr)),
            ("synth.overlap", show_f(self.synth.overlap)),
            ("synth.max_rotation", show_f(self.synth.max_rotation)),
            ("synth.max_translation_pr", show_f(self.synth.max_translation_pr)),
            ("data.pr", self.data.pr.map_or("auto".into(), show_f)),
            ("descriptors.names", d.names.join(",")),
            ("descriptors.support_radius_pr", show_f(d.support_radius_pr)),
            ("descriptors.lfsh_bins", format!("{a},{b},{c}")),
            ("descriptors.si_radial_bins", d.si_radial_bins.to_string()),
            ("descriptors.si_elevation_bins", d.si_elevation_bins.to_string()),
            ("descriptors.rcs_views", d.rcs_views.to_string()),
            ("descriptors.rcs_sectors", d.rcs_sectors.to_string()),
            ("net.n_intra", show_opt(&self.net.n_intra)),
            ("net.n_inter", show_opt(&self.net.n_inter)),
            ("net.n_out", show_opt(&self.net.n_out)),
            ("net.use_intra", self.net.use_intra.to_string()),
            ("net.relu_on_output", self.net.relu_on_output.to_string()),
            ("train.learning_rate", show_f(self.train.learning_rate)),
            ("train.beta1", show_f(self.train.beta1)),
            ("train.beta2", show_f(self.train.beta2)),
            ("train.epsilon", show_f(self.train.epsilon)),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", show_opt(&self.train.epochs)),
            ("train.loss", loss_name(self.train.loss).into()),
            ("train.tau_tri", show_f(self.train.tau_tri)),
            ("train.tau_pair", show_f(self.train.tau_pair)),
            ("train.contrastive_margin", show_f(self.train.contrastive_margin)),
            ("train.squared_distances", self.train.squared_distances.to_string()),
            ("sampler.tau_anc_pr", show_f(self.sampler.tau_anc_pr)),
            ("sampler.tau_pos_pr", show_f(self.sampler.tau_pos_pr)),
            ("sampler.tau_hard_pr", show_f(self.sampler.tau_hard_pr)),
            ("sampler.n_neg", self.sampler.n_neg.to_string()),
            ("sampler.n_hard_neg", self.sampler.n_hard_neg.to_string()),
            ("sampler.redraw_positive", self.sampler.redraw_positive.to_string()),
            ("sampler.max_anchors", self.sampler.max_anchors.map_or("none".into(), |m| m.to_string())),
            ("eval.method", self.eval.method.name().into()),
            ("eval.model", show_path(&self.eval.model)),
            ("eval.dims", show_opt(&self.eval.dims)),
            ("eval.fit_manifest", show_path(&self.eval.fit_manifest)),
            ("eval.keypoints", self.eval.keypoints.to_string()),
            ("eval.tolerance_pr", show_f(self.eval.tolerance_pr)),
            ("eval.thresholds", show_list(&self.eval.thresholds)),
            ("register.iterations", self.register.iterations.to_string()),
            ("register.inlier_threshold_pr", show_f(self.register.inlier_threshold_pr)),
            ("register.min_inliers", self.register.min_inliers.to_string()),
            ("register.keypoint_leaf_pr", show_f(self.register.keypoint_leaf_pr)),
            ("register.ratio_threshold", show_f(self.register.ratio_threshold)),
            ("register.alphas_pr", show_list(&self.register.alphas_pr)),
            ("register.gt_tolerance_pr", show_f(self.register.gt_tolerance_pr)),
            ("register.write_aligned", self.register.write_aligned.to_string()),
        ]
    }

    /// Resolved configuration text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {s}");
                section = s;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Range checks that do not depend on any data.
    pub fn validate(&self) -> Result<()> {
        if self.synth.pairs == 0 {
            return Err(Error::Config("synth.pairs must be at least 1".into()));
        }
        if let Some(pr) = self.data.pr {
            if pr <= 0.0 {
                return Err(Error::Config("data.pr must be positive".into()));
            }
        }
        if self.descriptors.support_radius_pr <= 0.0 {
            return Err(Error::Config("descriptors.support_radius_pr must be positive".into()));
        }
        self.descriptor_config(1.0).validate()?;
        self.train_config(1).validate()?;
        self.sampler_config(1.0).validate()?;
        if self.eval.keypoints == 0 {
            return Err(Error::Config("eval.keypoints must be at least 1".into()));
        }
        if self.eval.tolerance_pr <= 0.0 {
            return Err(Error::Config("eval.tolerance_pr must be positive".into()));
        }
        if self.eval.dims == Some(0) {
            return Err(Error::Config("eval.dims must be at least 1".into()));
        }
        self.ransac_config(1.0).validate()?;
        if self.register.keypoint_leaf_pr <= 0.0 {
            return Err(Error::Config("register.keypoint_leaf_pr must be positive".into()));
        }
        if self.register.ratio_threshold <= 0.0 {
            return Err(Error::Config("register.ratio_threshold must be positive".into()));
        }
        if self.register.gt_tolerance_pr <= 0.0 {
            return Err(Error::Config("register.gt_tolerance_pr must be positive".into()));
        }
        if self.register.alphas_pr.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config("register.alphas_pr must be positive".into()));
        }
        Ok(())
    }

    pub fn descriptor_config(&self, pr: f64) -> DescriptorConfig {
        let d = &self.descriptors;
        DescriptorConfig {
            support_radius: d.support_radius_pr * pr,
            lfsh_bins: d.lfsh_bins,
            si_radial_bins: d.si_radial_bins,
            si_elevation_bins: d.si_elevation_bins,
            rcs_views: d.rcs_views,
            rcs_sectors: d.rcs_sectors,
        }
    }

    /// Preset for the descriptor list with the section's overrides applied.
    pub fn preset(&self, dims: &[usize]) -> NetworkPreset {
        let mut p = NetworkPreset::for_descriptors(&self.descriptors.names, dims);
        p.n_intra = self.net.n_intra.unwrap_or(p.n_intra);
        p.n_inter = self.net.n_inter.unwrap_or(p.n_inter);
        p.n_out = self.net.n_out.unwrap_or(p.n_out);
        p.epochs = self.train.epochs.unwrap_or(p.epochs);
        p
    }

    pub fn network_config(&self, dims: &[usize]) -> NetworkConfig {
        let mut n = NetworkConfig::from_preset(dims.to_vec(), self.preset(dims));
        n.use_intra = self.net.use_intra;
        n.relu_on_output = self.net.relu_on_output;
        n
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs,
            seed: self.run.seed,
            loss: LossConfig {
                kind: t.loss,
                tau_tri: t.tau_tri,
                tau_pair: t.tau_pair,
                contrastive_margin: t.contrastive_margin,
                squared_distances: t.squared_distances,
            },
        }
    }

    pub fn sampler_config(&self, pr: f64) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            tau_anc: s.tau_anc_pr * pr,
            tau_pos: s.tau_pos_pr * pr,
            tau_hard: s.tau_hard_pr * pr,
            n_neg: s.n_neg,
            n_hard_neg: s.n_hard_neg,
            seed: self.run.seed,
            redraw_positive: s.redraw_positive,
            max_anchors: s.max_anchors,
        }
    }

    pub fn rpc_config(&self, pr: f64) -> RpcConfig {
        RpcConfig {
            keypoints: self.eval.keypoints,
            tolerance: self.eval.tolerance_pr * pr,
            thresholds: self.eval.thresholds.clone(),
            seed: self.run.seed,
        }
    }

    pub fn ransac_config(&self, pr: f64) -> RansacConfig {
        RansacConfig {
            iterations: self.register.iterations,
            inlier_threshold: self.register.inlier_threshold_pr * pr,
            sample_size: 3,
            seed: self.run.seed,
            min_inliers: self.register.min_inliers,
        }
    }

    pub fn pipeline_config(&self, pr: f64) -> PipelineConfig {
        PipelineConfig {
            keypoint_leaf: self.register.keypoint_leaf_pr * pr,
            ratio_threshold: self.register.ratio_threshold,
            ransac: self.ransac_config(pr),
        }
    }
}

fn loss_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Triplet => "triplet",
        LossKind::Improved => "improved",
        LossKind::Contrastive => "contrastive",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.beta1, 0.99);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.sampler.tau_anc_pr, 1.5);
        assert_eq!(c.sampler.n_neg, 25);
        assert_eq!(c.descriptors.support_radius_pr, 15.0);
        assert_eq!(c.register.iterations, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn default_text_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::parse("train.learning_rat = 0.1").unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("learning_rat")));
        assert!(RunConfig::parse("seed = 1").is_err());
    }

    #[test]
    fn malformed_line_reports_position() {
        let e = RunConfig::parse("# header\nrun.seed 4\n").unwrap_err();
        assert!(matches!(e, Error::Parse { location, .. } if location == "line 2"));
    }

    #[test]
    fn bad_values_rejected() {
        for text in [
            "run.seed = -1",
            "train.loss = hinge",
            "eval.method = median",
            "descriptors.lfsh_bins = 10,20",
            "net.use_intra = yes",
            "synth.noise_pr = nan",
            "eval.thresholds = ,",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn zero_pairs_is_config_error() {
        let c = RunConfig::parse("synth.pairs = 0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_comments() {
        let mut c = RunConfig::parse("train.epochs = 7 # more\nnet.n_out = auto\n").unwrap();
        assert_eq!(c.train.epochs, Some(7));
        c.apply_override("register.iterations=200").unwrap();
        assert_eq!(c.register.iterations, 200);
        assert!(c.apply_override("register.iterations").is_err());
    }

    #[test]
    fn preset_overrides() {
        let mut c = RunConfig::default();
        let p = c.preset(&[30]);
        assert_eq!((p.n_intra, p.n_inter, p.n_out, p.epochs), (48, 256, 16, 3));
        c.net.n_out = Some(8);
        c.train.epochs = Some(1);
        let p = c.preset(&[30]);
        assert_eq!((p.n_out, p.epochs), (8, 1));
    }

    #[test]
    fn lengths_scale_with_resolution() {
        let c = RunConfig::default();
        assert_eq!(c.descriptor_config(0.5).support_radius, 7.5);
        assert_eq!(c.sampler_config(2.0).tau_hard, 12.0);
        assert_eq!(c.pipeline_config(0.1).keypoint_leaf, 4.0 * 0.1);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, 1e-12..1e-3f64]
    }

    proptest! {
        #[test]
        fn resolved_text_round_trips(
            seed in any::<u64>(),
            noise in finite(),
            lr in finite(),
            epochs in proptest::option::of(1usize..50),
            anchors in proptest::option::of(1usize..5000),
            pr in proptest::option::of(1e-6..10.0f64),
            alphas in proptest::collection::vec(finite(), 1..5),
            aligned in any::<bool>(),
        ) {
            let mut c = RunConfig::default();
            c.run.seed = seed;
            c.synth.noise_pr = noise;
            c.train.learning_rate = lr;
            c.train.epochs = epochs;
            c.sampler.max_anchors = anchors;
            c.data.pr = pr;
            c.register.alphas_pr = alphas;
            c.register.write_aligned = aligned;
            c.eval.model = Some(PathBuf::from("models/m.bin"));
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
