use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use glt::interpret::{subject_group_counts, Heatmap};
use glt::model::{GltConfig, GltModel};
use glt::nn::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use glt::nn::ParamStore;
use glt::patch::read_patch_csv;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

/// 48³ volumes, 16-pixel training patches, two folds, one epoch.
const SMALL: &[&str] = &[
    "--set", "dims=48x48x48",
    "--set", "signal_lo=10,20,14",
    "--set", "signal_hi=26,36,30",
    "--set", "patch_size=16",
    "--set", "eval_patch_size=16",
    "--set", "batch_size=4",
    "--set", "folds=2",
];

fn glt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glt"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = glt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

fn cohort(n: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth", "--n", n, "--cohort", "c"]));
    dir
}

fn csv_value(path: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing in {}", path.display()))
        .parse()
        .unwrap()
}

#[test]
fn synth_rejects_zero_subjects_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = glt(dir.path(), &["synth", "--n", "0", "--cohort", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("c").exists());
}

#[test]
fn synth_is_byte_reproducible_and_writes_volumes() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["a", "b"] {
        ok(dir.path(), &with_small(&["synth", "--n", "4", "--seed", "7", "--cohort", c, "--set", "save_volumes=true"]));
    }
    let files = |c: &str| {
        let mut v: Vec<_> = walk(&dir.path().join(c)).into_iter().filter(|p| !p.ends_with("synth.config")).collect();
        v.sort();
        v
    };
    let (a, b) = (files("a"), files("b"));
    assert_eq!(a.len(), 1 + 4 + 4 * 3, "{a:?}");
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(dir.path().join("a")).unwrap(), y.strip_prefix(dir.path().join("b")).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let manifest = fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert!(dir.path().join("a/synth.config").exists());
}

fn walk(p: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn config_file_is_overridden_by_flags_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "n = 3\ndims = 32x32x32\n# comment\nsignal_lo = 4,4,4\nsignal_hi = 20,20,20\n").unwrap();
    ok(dir.path(), &["synth", "--config", "run.cfg", "--n", "2", "--cohort", "c"]);
    assert_eq!(fs::read_to_string(dir.path().join("c/manifest.csv")).unwrap().lines().count(), 3);
    let echoed = fs::read_to_string(dir.path().join("c/synth.config")).unwrap();
    assert!(echoed.contains("n = 2\n") && echoed.contains("dims = 32x32x32\n"), "{echoed}");

    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nlearning_rate = 1\n").unwrap();
    let out = glt(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert_eq!(glt(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn train_without_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glt(dir.path(), &["train", "--cohort", "missing"]).status.code(), Some(2));
}

#[test]
fn train_writes_loadable_checkpoints_and_loss_curves() {
    let dir = cohort("8");
    let args = with_small(&["train", "--mode", "glt", "--epochs", "2", "--cohort", "c", "--out", "r", "--set", "planes=axial"]);
    ok(dir.path(), &args);
    let ck = dir.path().join("r/axial/checkpoint");
    let mut store = ParamStore::<f32>::new();
    GltModel::new(&mut store, GltConfig::desk(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    load_checkpoint(&mut store, &ck).unwrap();
    let loss = fs::read_to_string(dir.path().join("r/axial/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,loss\n"));
    assert_eq!(loss.lines().count(), 1 + 2);
    assert!(dir.path().join("r/train.config").exists());
    assert_eq!(fs::read_to_string(dir.path().join("r/split.csv")).unwrap().lines().count(), 9);

    ok(dir.path(), &with_small(&["train", "--mode", "local_only", "--epochs", "1", "--cohort", "c", "--out", "l", "--set", "planes=axial"]));
    let names: Vec<String> = read_manifest(&dir.path().join("l/axial/checkpoint")).unwrap().into_iter().map(|e| e.name).collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.contains("attention") && !n.starts_with("global")), "{names:?}");
}

#[test]
fn identical_seeds_give_identical_double_precision_losses() {
    let dir = cohort("8");
    for out in ["a", "b"] {
        ok(dir.path(), &with_small(&["train", "--epochs", "2", "--precision", "f64", "--cohort", "c", "--out", out, "--set", "planes=coronal"]));
    }
    let a = fs::read_to_string(dir.path().join("a/coronal/loss.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/coronal/loss.csv")).unwrap());
}

#[test]
fn constant_model_eval_and_fused_report() {
    let dir = cohort("8");
    ok(dir.path(), &with_small(&["train", "--epochs", "1", "--cohort", "c", "--out", "r"]));
    let b = 40.0f32;
    for plane in ["axial", "coronal", "sagittal"] {
        let ck = dir.path().join(format!("r/{plane}/checkpoint"));
        let mut store = ParamStore::<f32>::new();
        let m = GltModel::new(&mut store, GltConfig::desk(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        load_checkpoint(&mut store, &ck).unwrap();
        m.set_constant_heads(&mut store, b);
        save_checkpoint(&store, &ck).unwrap();
    }
    ok(dir.path(), &with_small(&["eval", "--cohort", "c", "--out", "r"]));
    let eval = dir.path().join("r/eval");

    let estimates = fs::read_to_string(eval.join("estimates.csv")).unwrap();
    let mut ages = Vec::new();
    for l in estimates.lines().skip(1) {
        let c: Vec<&str> = l.split(',').collect();
        assert_eq!(c[5].parse::<f64>().unwrap(), b as f64, "{l}");
        assert_eq!(c[6].parse::<f64>().unwrap(), 0.0, "{l}");
        if c[1] == "axial" {
            ages.push(c[2].parse::<f64>().unwrap());
        }
    }
    assert!(!ages.is_empty());
    let expect = ages.iter().map(|a| (a - b as f64).abs()).sum::<f64>() / ages.len() as f64;
    for plane in ["axial", "coronal", "sagittal", "fused"] {
        let report = eval.join(format!("report_{plane}.csv"));
        assert!((csv_value(&report, "mae") - expect).abs() < 1e-9, "{plane}");
        let cs: Vec<f64> = (0..=10).map(|i| csv_value(&report, &format!("cs_{:.1}", i as f64 * 0.5))).collect();
        assert!(cs.windows(2).all(|w| w[0] <= w[1]), "{cs:?}");
    }
    let fused = fs::read_to_string(eval.join("fused.csv")).unwrap();
    assert!(fused.lines().skip(1).all(|l| l.ends_with(",40")), "{fused}");

    let out = glt(dir.path(), &with_small(&["eval", "--cohort", "c", "--out", "r", "--set", "blocks=3"]));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn heatmaps_from_multi_size_predictions() {
    let dir = cohort("10");
    let out = glt(dir.path(), &["heatmap", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("glt eval"));

    ok(dir.path(), &with_small(&["train", "--epochs", "1", "--cohort", "c", "--out", "r", "--set", "planes=axial"]));
    ok(dir.path(), &with_small(&["eval", "--cohort", "c", "--out", "r", "--inference", "multi", "--set", "eval_patches=40", "--set", "planes=axial"]));
    ok(dir.path(), &["heatmap", "--out", "r", "--set", "bin_width=2.5"]);
    let maps = dir.path().join("r/heatmaps/axial");
    assert!(maps.join("sigma.csv").exists());
    let pgms: Vec<_> = walk(&maps).into_iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).collect();
    assert!(!pgms.is_empty());
    for p in &pgms {
        assert!(fs::read(p).unwrap().starts_with(b"P5\n48 48\n255\n"), "{}", p.display());
    }

    // A bin holding one subject reproduces that subject's size-restricted map.
    let estimates = fs::read_to_string(dir.path().join("r/eval/estimates.csv")).unwrap();
    let rows: Vec<(String, f64)> = estimates
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[2].parse().unwrap())
        })
        .collect();
    let bin = |a: f64| (a / 2.5).floor();
    let (id, age) = rows
        .iter()
        .find(|(_, a)| rows.iter().filter(|(_, b)| bin(*b) == bin(*a)).count() == 1)
        .expect("some bin has a single subject")
        .clone();
    let patches = read_patch_csv(&fs::read_to_string(dir.path().join("r/eval/patches.csv")).unwrap()).unwrap();
    let errors: Vec<_> = patches
        .iter()
        .filter(|p| p.subject == id)
        .map(|p| (p.patch, (p.predicted - age).abs()))
        .collect();
    let expect = Heatmap::normalized(48, 48, subject_group_counts(48, 48, &errors).unwrap());
    let mut csv = Vec::new();
    expect.write_csv(&mut csv).unwrap();
    let lo = bin(age) * 2.5;
    let file = maps.join(format!("group_{}_{}.csv", lo, lo + 2.5));
    assert_eq!(fs::read(&file).unwrap(), csv, "{}", file.display());
}

#[test]
fn gradcheck_passes_and_fault_injection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--out", "g"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report = fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    for group in ["conv2d", "batchnorm_train", "batchnorm_eval", "linear", "relu_pooling", "attention", "glt_block", "backbone", "model_glt", "model_local_only"] {
        assert!(stdout.contains(group) && report.contains(&format!("\n{group},")), "{group}");
    }
    assert!(report.contains("model_glt,blocks.0.attention.query.weight,"), "{report}");
    assert!(report.lines().skip(1).all(|l| l.ends_with(",true")));

    let out = glt(dir.path(), &["gradcheck", "--out", "g", "--set", "analytic_scale=1.01"]);
    assert_eq!(out.status.code(), Some(3));
}
