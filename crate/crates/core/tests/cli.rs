use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pimms::cli::{dataset_manifest_path, parse_grid_csv, probability_path};
use pimms::eval::evaluate_subsets;
use pimms::io::read_rawt;
use pimms::synth::{read_split, Split};
use pimms::training::load_model;
use tempfile::TempDir;

const DATA_CFG: &str = "n=60\nholdout_n=4\nheight=16\nwidth=16\np_no_lesion=0\nlesion_min_frac=0.02\n";
const MODEL_CFG: &str = "patch_h=16\npatch_w=16\nfmod_base_filters=2\nfmod_blocks_per_stage=1\nbackend_filters=4\nfrontend_filters=4\noutput_kernel=5\nbatch=2\nmax_iters=6\nval_every=3\nfmod_iters=20\nfmod_batch=4\n";

fn pimms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimms")).args(args).env("PIMMS_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pimms(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: TempDir::new().unwrap() };
        fs::write(f.path("data.cfg"), DATA_CFG).unwrap();
        fs::write(f.path("model.cfg"), MODEL_CFG).unwrap();
        ok(&["gen-data", "--config", s(&f.path("data.cfg")), "--out", s(&f.path("data"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train_fmod(&self, out: &str) -> PathBuf {
        ok(&["train-fmod", "--config", s(&self.path("model.cfg")), "--data", s(&self.path("data")), "--out", s(&self.path(out))]);
        self.path(out).join("fmod.ckpt")
    }

    fn train(&self, variant: &str, fmod: Option<&Path>, out: &str) -> PathBuf {
        let (cfg, data, dir) = (self.path("model.cfg"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--variant", variant, "--config", s(&cfg), "--data", s(&data), "--out", s(&dir)];
        if let Some(f) = fmod {
            args.extend(["--fmod-checkpoint", s(f)]);
        }
        ok(&args);
        dir.join("model.ckpt")
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_reports_split_sizes() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-data", "--out", s(&a), "--seed", "7"]);
    assert_eq!(out.trim(), "train:80 val:10 test:10 holdout:20");
    ok(&["gen-data", "--out", s(&b), "--seed", "7"]);
    assert!(tree(&a) == tree(&b));
    assert!(dataset_manifest_path(&a).exists());
    let manifest = fs::read_to_string(dataset_manifest_path(&a)).unwrap();
    assert!(manifest.contains("seed=7"), "{manifest}");
    let c = dir.path().join("c");
    ok(&["gen-data", "--out", s(&c), "--seed", "8"]);
    assert!(tree(&a) != tree(&c));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(pimms(&["gen-data"]).status.code(), Some(2));
    assert_eq!(pimms(&["frobnicate"]).status.code(), Some(2));
    let data = dir.path().join("d");
    let out = pimms(&["train", "--variant", "soft", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("soft requires pretrained f_mod"));
    let out = pimms(&["train", "--variant", "bogus", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(pimms(&["verify", "--level", "loud"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let dir = TempDir::new().unwrap();
    let out = pimms(&["train", "--variant", "hemis", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_infer_pipeline() {
    let f = Fixture::new();
    let fmod = f.train_fmod("fmod");
    let acc = fs::read_to_string(f.path("fmod/accuracy.txt")).unwrap();
    assert!(acc.contains("train=") && acc.contains("holdout="), "{acc}");
    let again = f.train_fmod("fmod2");
    assert!(fs::read(&fmod).unwrap() == fs::read(&again).unwrap());

    let hemis = f.train("hemis", None, "hemis");
    let manifest = fs::read_to_string(f.path("hemis/manifest.txt")).unwrap();
    assert!(!manifest.contains("input.fmod"), "{manifest}");
    let soft = f.train("soft", Some(&fmod), "soft");
    let hard = f.train("hard", Some(&fmod), "hard");
    let online = f.train("online", None, "online");
    assert!(fs::read_to_string(f.path("soft/manifest.txt")).unwrap().contains("input.fmod_checkpoint="));
    let trace = fs::read_to_string(f.path("online/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);

    // Four-variant grid.
    let data = f.path("data");
    let grid_dir = f.path("grid");
    let specs: Vec<String> = [("hemis", &hemis), ("soft", &soft), ("hard", &hard), ("online", &online)]
        .iter()
        .map(|(v, p)| format!("{v}={}", p.display()))
        .collect();
    let mut args = vec!["eval", "--data", s(&data), "--out", s(&grid_dir), "--checkpoints"];
    args.extend(specs.iter().map(String::as_str));
    ok(&args);
    let csv = fs::read_to_string(grid_dir.join("grid.csv")).unwrap();
    let rows = parse_grid_csv(&csv).unwrap();
    assert_eq!(rows.len(), 28);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert_eq!(r[2], "6");
        assert_eq!(r[5].is_empty(), r[1] == "hemis", "{r:?}");
    }
    let models: Vec<_> = [&hemis, &soft, &hard, &online].iter().map(|p| load_model(p).unwrap()).collect();
    let samples = read_split(&data, Split::Test).unwrap();
    assert_eq!(evaluate_subsets(&models, &samples, 2).unwrap().to_csv(), csv);

    // Single-variant grid carries no test statistics.
    let single = f.path("single");
    ok(&["eval", "--data", s(&data), "--out", s(&single), "--checkpoints", &format!("soft={}", soft.display())]);
    let rows = parse_grid_csv(&fs::read_to_string(single.join("grid.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[5].is_empty() && r[6].is_empty()));
    assert!(!fs::read_to_string(single.join("grid.txt")).unwrap().contains("Wilcoxon"));

    // A checkpoint under the wrong variant name is a usage error.
    let out = pimms(&["eval", "--data", s(&data), "--out", s(&f.path("x")), "--checkpoints", &format!("hard={}", soft.display())]);
    assert_eq!(out.status.code(), Some(2));

    // Inference ignores scan order.
    let subject = data.join("test").join(&samples[0].id);
    let scans: Vec<PathBuf> = (0..3).map(|k| subject.join(format!("scan_{k}.rawt"))).collect();
    let (m1, m2) = (f.path("m1.rawt"), f.path("m2.rawt"));
    ok(&["infer", "--checkpoint", s(&soft), "--out", s(&m1), "--scans", s(&scans[0]), s(&scans[1]), s(&scans[2])]);
    ok(&["infer", "--checkpoint", s(&soft), "--out", s(&m2), "--scans", s(&scans[2]), s(&scans[1]), s(&scans[0])]);
    assert_eq!(read_rawt(&m1).unwrap(), read_rawt(&m2).unwrap());
    let (p1, p2) = (read_rawt(&probability_path(&m1)).unwrap(), read_rawt(&probability_path(&m2)).unwrap());
    assert_eq!(p1.shape(), &[16, 16, 2]);
    assert!(p1.max_abs_diff(&p2) < 1e-6);
    for px in p1.data().chunks(2) {
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((px[0] + px[1] - 1.0).abs() < 1e-6);
    }

    // A lone FLAIR-like scan, whichever slot it is routed to.
    let flair = samples[0].labels.iter().position(|l| l.0 == 2).unwrap();
    let m3 = f.path("m3.rawt");
    ok(&["infer", "--checkpoint", s(&online), "--out", s(&m3), "--scans", s(&scans[flair])]);
    assert_eq!(read_rawt(&m3).unwrap().shape(), &[16, 16]);

    // Labels only for the label-routed variant.
    let m4 = f.path("m4.rawt");
    assert_eq!(pimms(&["infer", "--checkpoint", s(&soft), "--out", s(&m4), "--labels", "T1", "--scans", s(&scans[0])]).status.code(), Some(2));
    assert_eq!(pimms(&["infer", "--checkpoint", s(&hemis), "--out", s(&m4), "--scans", s(&scans[0])]).status.code(), Some(2));
    let label = samples[0].labels[0].name();
    ok(&["infer", "--checkpoint", s(&hemis), "--out", s(&m4), "--labels", &label, "--scans", s(&scans[0])]);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let f = Fixture::new();
    f.train("online", None, "a");
    f.train("online", None, "b");
    for name in ["model.ckpt", "trace.csv", "state.bin"] {
        assert!(fs::read(f.path("a").join(name)).unwrap() == fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn resume_continues_a_run_exactly() {
    let f = Fixture::new();
    let full = f.train("hemis", None, "full");
    fs::write(f.path("short.cfg"), MODEL_CFG.replace("max_iters=6", "max_iters=3")).unwrap();
    let (cfg, data, short) = (f.path("short.cfg"), f.path("data"), f.path("short"));
    ok(&["train", "--variant", "hemis", "--config", s(&cfg), "--data", s(&data), "--out", s(&short)]);
    let state = short.join("state.bin");
    let resumed = f.path("resumed");
    ok(&["train", "--variant", "hemis", "--config", s(&f.path("model.cfg")), "--data", s(&data), "--out", s(&resumed), "--resume", s(&state)]);
    assert!(fs::read(&full).unwrap() == fs::read(resumed.join("model.ckpt")).unwrap());
    assert!(fs::read(f.path("full/state.bin")).unwrap() == fs::read(resumed.join("state.bin")).unwrap());
}

#[test]
fn verify_quick_passes_within_a_minute() {
    let t = Instant::now();
    let out = ok(&["verify"]);
    assert!(t.elapsed().as_secs() < 60);
    assert!(out.contains("0 failed"), "{out}");
    assert!(!out.contains("FAIL "));
}
