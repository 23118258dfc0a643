//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use geofuse::{Error, ErrorClass, Result};

use crate::commands::{
    cmd_colorize, cmd_describe, cmd_eval, cmd_register, cmd_resolution, cmd_synth, cmd_train,
};
use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "geofuse", version, about = "Learned fusion of 3D local geometric descriptors")]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "geofuse-out")]
    pub out: PathBuf,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DescriptorArgs {
    /// Comma-separated descriptor list, e.g. `lfsh` or `spin_image,rcs`.
    #[arg(long)]
    pub descriptors: Option<String>,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Fusion method: nn, concat, pca or min_pool.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output width for PCA.
    #[arg(long)]
    pub dims: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic registered pairs and a manifest.
    Synth {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        /// Noise standard deviation in pr.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        overlap: Option<f64>,
        /// bumpy-sphere, height-field or alternate.
        #[arg(long)]
        surface: Option<String>,
    },
    /// Train a fusion network on a manifest.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        desc: DescriptorArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recall-precision curves of ratio-test matching.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        desc: DescriptorArgs,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Register every manifest pair with RANSAC.
    Register {
        manifest: PathBuf,
        #[command(flatten)]
        desc: DescriptorArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        iterations: Option<usize>,
        /// Comma-separated α values in pr.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Color a cloud by its fused features.
    Colorize {
        cloud: PathBuf,
        #[command(flatten)]
        desc: DescriptorArgs,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Write descriptor tables for every point of a cloud.
    Describe {
        cloud: PathBuf,
        #[command(flatten)]
        desc: DescriptorArgs,
    },
    /// Print the resolution of PLY files or manifests.
    Resolution { paths: Vec<PathBuf> },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_desc(cfg: &mut RunConfig, d: &DescriptorArgs) -> Result<()> {
    set_opt(cfg, "descriptors.names", &d.descriptors)
}

fn apply_method(cfg: &mut RunConfig, m: &MethodArgs) -> Result<()> {
    set_opt(cfg, "eval.method", &m.method)?;
    set_opt(cfg, "eval.model", &m.model.as_ref().map(|p| p.display().to_string()))?;
    set_opt(cfg, "eval.dims", &m.dims)
}

/// Config file, then flags, then `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg, "run.seed", &cli.seed)?;
    set_opt(&mut cfg, "run.jobs", &cli.jobs)?;
    match &cli.command {
        Command::Synth {
            pairs,
            points,
            noise,
            overlap,
            surface,
        } => {
            set_opt(&mut cfg, "synth.pairs", pairs)?;
            set_opt(&mut cfg, "synth.points", points)?;
            set_opt(&mut cfg, "synth.noise_pr", noise)?;
            set_opt(&mut cfg, "synth.overlap", overlap)?;
            set_opt(&mut cfg, "synth.surface", surface)?;
        }
        Command::Train { desc, epochs, .. } => {
            apply_desc(&mut cfg, desc)?;
            set_opt(&mut cfg, "train.epochs", epochs)?;
        }
        Command::Eval { desc, method, .. } | Command::Colorize { desc, method, .. } => {
            apply_desc(&mut cfg, desc)?;
            apply_method(&mut cfg, method)?;
        }
        Command::Register {
            desc,
            method,
            iterations,
            alphas,
            ..
        } => {
            apply_desc(&mut cfg, desc)?;
            apply_method(&mut cfg, method)?;
            set_opt(&mut cfg, "register.iterations", iterations)?;
            set_opt(&mut cfg, "register.alphas_pr", alphas)?;
        }
        Command::Describe { desc, .. } => apply_desc(&mut cfg, desc)?,
        Command::Resolution { .. } => {}
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Synth { .. } => {
            let s = cmd_synth(cfg, out)?;
            println!("wrote {} pairs to {} (pr {:.6})", s.pairs, s.manifest.display(), s.pr);
        }
        Command::Train { manifest, .. } => {
            let s = cmd_train(cfg, manifest, out)?;
            println!(
                "trained on {} triplets: loss {:.6} -> {:.6}, model {} sha256 {}",
                s.triplets,
                s.report.initial_loss,
                s.report.final_loss,
                s.model.display(),
                s.report.digest
            );
        }
        Command::Eval { manifest, .. } => {
            let s = cmd_eval(cfg, manifest, out)?;
            println!(
                "{} ({} dims): pooled AUC {:.6}, mean AUC {:.6} over {} pairs",
                s.method.name(),
                s.dims,
                s.aggregate.auc,
                s.mean_auc(),
                s.curves.len()
            );
        }
        Command::Register { manifest, .. } => {
            let s = cmd_register(cfg, manifest, out)?;
            for (a, r) in &s.alpha_recall {
                println!("alpha {a} pr: recall {r:.3}");
            }
        }
        Command::Colorize { cloud, .. } => {
            let s = cmd_colorize(cfg, cloud, out)?;
            println!("{}: {} vertices, {} described", s.output.display(), s.vertices, s.described);
        }
        Command::Describe { cloud, .. } => {
            for p in cmd_describe(cfg, cloud, out)? {
                println!("{}", p.display());
            }
        }
        Command::Resolution { paths } => {
            if paths.is_empty() {
                return Err(Error::Config("resolution needs at least one path".into()));
            }
            for p in paths {
                println!("{} {:.9}", p.display(), cmd_resolution(p)?);
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cli, &cfg))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
