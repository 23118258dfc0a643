use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use geofuse::datasets::{read_ply, PairManifest};
use geofuse::descriptors::ExternalDescriptor;
use geofuse_cli::app::{run, EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use geofuse_cli::commands::{MANIFEST_FILE, VERSION_FILE};
use geofuse_cli::config::{RunConfig, CONFIG_FILE};

fn geofuse(args: &[&str]) -> i32 {
    let mut all = vec!["geofuse"];
    all.extend_from_slice(args);
    run(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset of `pairs` pairs; returns the manifest path.
fn synth(dir: &Path, pairs: usize, seed: u64) -> PathBuf {
    let pairs = pairs.to_string();
    let seed = seed.to_string();
    let code = geofuse(&[
        "--out", s(dir), "--seed", &seed, "synth", "--pairs", &pairs, "--points", "2000", "--noise", "0.1",
    ]);
    assert_eq!(code, EXIT_OK);
    dir.join(MANIFEST_FILE)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn assert_run_files(dir: &Path) {
    assert!(dir.join(CONFIG_FILE).is_file(), "{} lacks the resolved config", dir.display());
    let v = fs::read_to_string(dir.join(VERSION_FILE)).unwrap();
    assert!(v.starts_with("geofuse "));
}

/// Writes a random table for every cloud of the manifest.
fn write_tables(manifest: &Path, name: &str, dim: usize, seed: u64, constant: bool) {
    let m = PairManifest::load(manifest).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in &m.pairs {
        for cloud in [m.resolve(&e.source), m.resolve(&e.target)] {
            let n = read_ply(&cloud).unwrap().cloud.len();
            let mut t = ExternalDescriptor::new(name, dim);
            for i in 0..n {
                let row = if constant { vec![0.5; dim] } else { (0..dim).map(|_| rng.random::<f64>()).collect() };
                t.insert(i, row).unwrap();
            }
            t.write(geofuse_cli::pipeline::external_table_path(&cloud, name)).unwrap();
        }
    }
}

fn train_small(manifest: &Path, out: &Path) -> PathBuf {
    let code = geofuse(&[
        "--out",
        s(out),
        "--set",
        "sampler.max_anchors=20",
        "train",
        s(manifest),
        "--epochs",
        "1",
    ]);
    assert_eq!(code, EXIT_OK);
    out.join("model.bin")
}

#[test]
fn synth_writes_requested_pairs_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let m = synth(&a, 5, 3);
    synth(&b, 5, 3);
    assert_eq!(PairManifest::load(&m).unwrap().pairs.len(), 5);
    assert_run_files(&a);
    let files: BTreeSet<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 5 * 4 + 3);
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f:?} differs");
    }
}

#[test]
fn zero_pairs_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(geofuse(&["--out", s(tmp.path()), "synth", "--pairs", "0"]), EXIT_CONFIG);
}

#[test]
fn bad_arguments_exit_with_config_code() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 1, 0);
    let out = tmp.path().join("out");
    assert_eq!(geofuse(&["--out", s(&out), "eval", s(&m), "--descriptors", "no such"]), EXIT_CONFIG);
    assert_eq!(geofuse(&["--out", s(&out), "eval", s(&m), "--descriptors", "missing_table"]), EXIT_CONFIG);
    assert_eq!(geofuse(&["--out", s(&out), "eval", s(&m), "--method", "median"]), EXIT_CONFIG);
    assert_eq!(geofuse(&["--out", s(&out), "--set", "register.nonsense=1", "register", s(&m)]), EXIT_CONFIG);
    assert_eq!(geofuse(&["--out", s(&out), "frobnicate"]), EXIT_CONFIG);
}

#[test]
fn missing_or_invalid_model_exits_with_data_code() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 1, 0);
    let out = tmp.path().join("out");
    let missing = tmp.path().join("absent.bin");
    assert_eq!(geofuse(&["--out", s(&out), "eval", s(&m), "--method", "nn", "--model", s(&missing)]), EXIT_DATA);
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a model").unwrap();
    let cloud = tmp.path().join("data/pair_000_source.ply");
    assert_eq!(
        geofuse(&["--out", s(&out), "colorize", s(&cloud), "--method", "nn", "--model", s(&junk)]),
        EXIT_DATA
    );
}

#[test]
fn binary_reports_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_geofuse");
    let st = std::process::Command::new(bin)
        .args(["--out", s(tmp.path()), "synth", "--pairs", "0"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_CONFIG));
    let st = std::process::Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&st.stdout).contains("register"));
}

#[test]
fn concat_and_full_pca_agree_on_full_rank_tables() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 2, 4);
    write_tables(&m, "noise6", 6, 1, false);
    let mut auc = Vec::new();
    for method in ["concat", "pca"] {
        let out = tmp.path().join(method);
        let code = geofuse(&[
            "--out",
            s(&out),
            "--set",
            "eval.keypoints=300",
            "eval",
            s(&m),
            "--descriptors",
            "noise6",
            "--method",
            method,
        ]);
        assert_eq!(code, EXIT_OK);
        assert_run_files(&out);
        let rows = csv_rows(&out.join("auc.csv"));
        assert_eq!(rows[0], ["pair", "method", "dims", "possible", "auc"]);
        assert_eq!(rows.len(), 1 + 2 + 2);
        assert!(rows[1..].iter().all(|r| r[2] == "6"));
        auc.push(rows[1..].iter().map(|r| r[4].parse::<f64>().unwrap()).collect::<Vec<_>>());
    }
    for (a, b) in auc[0].iter().zip(&auc[1]) {
        assert!((a - b).abs() < 1e-9, "concat {a} vs pca {b}");
    }
}

#[test]
fn trained_model_evaluates_with_expected_csv_shape() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 2, 5);
    let model = train_small(&m, &tmp.path().join("train"));
    assert_run_files(&tmp.path().join("train"));
    assert!(tmp.path().join("train/train_report.csv").is_file());
    let out = tmp.path().join("eval");
    let code = geofuse(&[
        "--out",
        s(&out),
        "--set",
        "eval.keypoints=200",
        "eval",
        s(&m),
        "--method",
        "nn",
        "--model",
        s(&model),
    ]);
    assert_eq!(code, EXIT_OK);
    let rpc = csv_rows(&out.join("rpc.csv"));
    let thresholds = RunConfig::default().eval.thresholds.len();
    assert_eq!(rpc[0].len(), 8);
    assert_eq!(rpc.len(), 1 + 3 * thresholds);
    assert!(rpc[1..].iter().all(|r| r[1] == "nn" && r[2] == "16"));
    let digests = fs::read_to_string(out.join("inputs.sha256")).unwrap();
    assert_eq!(digests.lines().count(), 2);
}

#[test]
fn register_writes_one_row_per_pair() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 3, 6);
    for iters in ["200", "1000"] {
        let out = tmp.path().join(iters);
        let code = geofuse(&[
            "--out",
            s(&out),
            "--set",
            "register.write_aligned=true",
            "register",
            s(&m),
            "--method",
            "concat",
            "--iterations",
            iters,
            "--alphas",
            "1,2,5",
        ]);
        assert_eq!(code, EXIT_OK);
        assert_run_files(&out);
        let rows = csv_rows(&out.join("registration.csv"));
        assert_eq!(rows.len(), 1 + 3);
        assert!(rows[1..].iter().all(|r| r[2] == iters && r.len() == 11));
        let alpha = csv_rows(&out.join("alpha_recall.csv"));
        assert_eq!(alpha.len(), 1 + 3);
        let recalls: Vec<f64> = alpha[1..].iter().map(|r| r[3].parse().unwrap()).collect();
        assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 3, 7);
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = tmp.path().join(jobs);
        let code = geofuse(&[
            "--out", s(&out), "--jobs", jobs, "register", s(&m), "--method", "concat", "--iterations", "200",
        ]);
        assert_eq!(code, EXIT_OK);
        outputs.push(fs::read(out.join("registration.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn colorize_keeps_vertices_and_constant_features_give_one_color() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 1, 8);
    let cloud = tmp.path().join("data/pair_000_source.ply");
    let n = read_ply(&cloud).unwrap().cloud.len();

    let out = tmp.path().join("lfsh");
    assert_eq!(geofuse(&["--out", s(&out), "colorize", s(&cloud), "--method", "concat"]), EXIT_OK);
    let colored = read_ply(out.join("pair_000_source_colored.ply")).unwrap();
    assert_eq!(colored.cloud.len(), n);
    let colors: BTreeSet<_> = colored.colors.unwrap().into_iter().collect();
    assert!(colors.len() > 1);

    write_tables(&m, "flat", 4, 0, true);
    let out = tmp.path().join("flat");
    let code = geofuse(&["--out", s(&out), "colorize", s(&cloud), "--descriptors", "flat", "--method", "concat"]);
    assert_eq!(code, EXIT_OK);
    let colored = read_ply(out.join("pair_000_source_colored.ply")).unwrap();
    let colors: BTreeSet<_> = colored.colors.unwrap().into_iter().collect();
    assert_eq!(colors.len(), 1);
}

#[test]
fn describe_tables_feed_back_as_external_descriptors() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("data"), 1, 9);
    let cloud = tmp.path().join("data/pair_000_source.ply");
    let out = tmp.path().join("desc");
    assert_eq!(geofuse(&["--out", s(&out), "describe", s(&cloud), "--descriptors", "lfsh,spin_image"]), EXIT_OK);
    let lfsh = ExternalDescriptor::read(out.join("pair_000_source.lfsh.desc")).unwrap();
    assert_eq!(lfsh.dim(), 30);
    assert!(!lfsh.is_empty());
    let si = ExternalDescriptor::read(out.join("pair_000_source.spin_image.desc")).unwrap();
    assert_eq!(si.len(), lfsh.len());
}

#[test]
fn resolved_config_reloads_to_the_same_text() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 1, 10);
    let first = tmp.path().join("first");
    let code = geofuse(&[
        "--out",
        s(&first),
        "--seed",
        "42",
        "--set",
        "register.ratio_threshold=0.8",
        "register",
        s(&m),
        "--method",
        "concat",
        "--iterations",
        "100",
    ]);
    assert_eq!(code, EXIT_OK);
    let text = fs::read_to_string(first.join(CONFIG_FILE)).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.run.seed, 42);
    assert_eq!(cfg.register.iterations, 100);
    let second = tmp.path().join("second");
    let cfg_path = first.join(CONFIG_FILE);
    assert_eq!(geofuse(&["--out", s(&second), "--config", s(&cfg_path), "register", s(&m)]), EXIT_OK);
    assert_eq!(text, fs::read_to_string(second.join(CONFIG_FILE)).unwrap());
    assert_eq!(
        fs::read(first.join("registration.csv")).unwrap(),
        fs::read(second.join("registration.csv")).unwrap()
    );
}

#[test]
fn resolution_of_manifest_matches_synth() {
    let tmp = TempDir::new().unwrap();
    let m = synth(&tmp.path().join("data"), 2, 11);
    let pr = geofuse_cli::commands::cmd_resolution(&m).unwrap();
    let stated = PairManifest::load(&m).unwrap().pr.unwrap();
    assert!((pr - stated).abs() < 1e-9 * stated);
    assert_eq!(geofuse(&["resolution", s(&m)]), EXIT_OK);
}
