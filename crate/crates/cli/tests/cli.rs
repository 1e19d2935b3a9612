use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ebm_cli::main_with_args;
use ebm_core::checkpoint::Checkpoint;
use ebm_core::langevin::latent_init;
use ebm_core::pgm::GrayImage;
use ebm_core::rng::seeded;
use ebm_core::train::{read_metrics, METRICS_HEADER};

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Outcome {
    let mut argv = vec!["bridge-ebm"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with_args(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(o.code, 0, "{args:?}\nstdout: {}\nstderr: {}", o.stdout, o.stderr);
    o.stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&["gen-dataset", "--out", p(&dir), "--per-subtype", "1", "--seed", "3"]);
    dir
}

/// One cheap epoch over the 8-image dataset; `extra` flag pairs override.
fn quick_train(data: &Path, out: &Path, extra: &[(&str, &str)]) -> String {
    let mut pairs = vec![
        ("--data", p(data)),
        ("--out", p(out)),
        ("--epochs", "1"),
        ("--batch", "8"),
        ("--langevin-steps", "2"),
        ("--seed", "5"),
    ];
    for &(k, v) in extra {
        match pairs.iter_mut().find(|(pk, _)| *pk == k) {
            Some(slot) => slot.1 = v,
            None => pairs.push((k, v)),
        }
    }
    let mut args = vec!["train"];
    for (k, v) in pairs {
        args.push(k);
        args.push(v);
    }
    ok(&args)
}

fn pgms(dir: &Path, prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(prefix) && n.ends_with(".pgm"))
        .collect();
    v.sort();
    v
}

#[test]
fn info_prints_table_and_totals() {
    let out = ok(&["info"]);
    assert!(out.contains("Total params: 832257 (831553 trainable, 704 non-trainable)"), "{out}");
    assert!(out.contains("conv2d"), "{out}");
    assert!(out.contains("(None, 1)"), "{out}");
}

#[test]
fn help_documents_exit_codes() {
    let o = run(&["--help"]);
    assert_eq!(o.code, 0);
    for line in ["2  I/O", "3  training", "4  checkpoint", "5  verification"] {
        assert!(o.stdout.contains(line), "{}", o.stdout);
    }
}

#[test]
fn gen_dataset_small_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let out = ok(&["gen-dataset", "--out", p(&dir), "--per-subtype", "1", "--seed", "9"]);
    assert!(out.contains("8 images written"), "{out}");
    assert_eq!(pgms(&dir, "").len(), 8);
    assert!(dir.join("effective-config.txt").exists());

    let out = ok(&["gen-dataset", "--out", p(&dir), "--per-subtype", "1", "--seed", "9", "--verify"]);
    assert!(out.contains("dataset unchanged (bitwise)"), "{out}");

    let o = run(&["gen-dataset", "--out", p(&dir), "--per-subtype", "1", "--seed", "10", "--verify"]);
    assert_eq!(o.code, 5, "{}", o.stderr);
}

#[test]
fn gen_dataset_unwritable_target_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    let o = run(&["gen-dataset", "--out", p(&file.join("sub")), "--per-subtype", "1"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn train_writes_metrics_checkpoint_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run_dir = tmp.path().join("run");
    let out = quick_train(&data, &run_dir, &[]);
    assert!(out.contains("epoch    1"), "{out}");

    let text = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(METRICS_HEADER, "epoch,loss,reg,cdiv,real,fake");
    let rows = read_metrics(&run_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].loss, rows[0].cdiv + rows[0].reg);

    let model = run_dir.join("model.ebm");
    assert_eq!(Checkpoint::load(&model).unwrap().epoch, 1);
    quick_train(&data, &run_dir, &[("--resume", p(&model)), ("--epochs", "2")]);
    let epochs: Vec<u64> = read_metrics(&run_dir.join("metrics.csv")).unwrap().iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert_eq!(Checkpoint::load(&model).unwrap().epoch, 3);
}

#[test]
fn zero_reg_weight_logs_zero_reg() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run_dir = tmp.path().join("run");
    quick_train(&data, &run_dir, &[("--reg-weight", "0"), ("--epochs", "2")]);
    let rows = read_metrics(&run_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.reg, 0.0);
        assert_eq!(r.loss, r.cdiv);
    }
}

#[test]
fn train_subtype_filter_and_bad_names() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = quick_train(&data, &tmp.path().join("r"), &[("--subtypes", "beam-constant-section,suspension-vertical-sling")]);
    assert!(out.contains("training on 2 images"), "{out}");
    let o = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("x")), "--subtypes", "pontoon"]);
    assert_eq!(o.code, 1, "{}", o.stderr);
}

#[test]
fn exploding_training_exits_with_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run_dir = tmp.path().join("run");
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--epochs",
        "40",
        "--batch",
        "8",
        "--langevin-steps",
        "1",
        "--lr",
        "1e30",
        "--reg-weight",
        "0",
    ]);
    assert_eq!(o.code, 3, "stdout: {}\nstderr: {}", o.stdout, o.stderr);
    assert!(run_dir.join("divergence.txt").exists());
}

#[test]
fn sample_and_trace_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run_dir = tmp.path().join("run");
    quick_train(&data, &run_dir, &[]);
    let model = run_dir.join("model.ebm");

    let s = tmp.path().join("s");
    ok(&["sample", "--model", p(&model), "--count", "16", "--steps", "3", "--out", p(&s)]);
    assert_eq!(pgms(&s, "sample-").len(), 16);
    let grid = GrayImage::read(&s.join("grid.pgm")).unwrap();
    assert_eq!((grid.width, grid.height), (4 * 192 + 3 * 2, 4 * 48 + 3 * 2));

    // Zero steps: the outputs are the initial noise itself.
    let z = tmp.path().join("z");
    ok(&["sample", "--model", p(&model), "--count", "3", "--steps", "0", "--seed", "4", "--out", p(&z)]);
    let noise = latent_init(3, &[48, 192, 1], &mut seeded(4)).unwrap();
    for i in 0..3 {
        let img = GrayImage::read(&z.join(format!("sample-{i:03}.pgm"))).unwrap();
        let want = GrayImage::from_unit(192, 48, noise.row(i).iter().map(|&v| v as f64));
        assert_eq!(img, want);
    }

    let t = tmp.path().join("t");
    let out = ok(&["trace", "--model", p(&model), "--steps", "2000", "--trace-every", "100", "--out", p(&t)]);
    assert!(out.contains("21 frames"), "{out}");
    let frames = pgms(&t, "frame-");
    assert_eq!(frames.len(), 21);
    assert_eq!(frames[0], "frame-00000.pgm");
    assert_eq!(frames[20], "frame-01999.pgm");
    assert!(t.join("filmstrip.pgm").exists());
}

#[test]
fn missing_or_corrupt_model_is_checkpoint_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["sample", "--model", p(&tmp.path().join("nope.ebm")), "--out", p(tmp.path())]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    let bad = tmp.path().join("bad.ebm");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = run(&["trace", "--model", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    let o = run(&["info", "--model", p(&bad)]);
    assert_eq!(o.code, 4, "{}", o.stderr);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["train"]).code, 1);
    assert_eq!(run(&["frobnicate"]).code, 1);
    assert_eq!(run(&["info", "--threads", "zero"]).code, 1);
    assert_eq!(run(&["verify", "--suite", "everything"]).code, 1);
}

#[test]
fn config_file_unknown_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "seed = 1\nlearning-rate = 0.1\n").unwrap();
    let o = run(&["info", "--config", p(&cfg)]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("learning-rate"), "{}", o.stderr);
}

#[test]
fn snapshot_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let a = tmp.path().join("a");
    quick_train(&data, &a, &[("--reg-weight", "0.3"), ("--lr", "0.001")]);
    let snap = fs::read_to_string(a.join("effective-config.txt")).unwrap();
    assert!(snap.contains("command = train"), "{snap}");
    assert!(snap.contains("reg-weight = 0.3"), "{snap}");

    let b = tmp.path().join("b");
    ok(&["train", "--config", p(&a.join("effective-config.txt")), "--out", p(&b)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ebm")).unwrap(), fs::read(b.join("model.ebm")).unwrap());

    let o = run(&["sample", "--config", p(&a.join("effective-config.txt"))]);
    assert_eq!(o.code, 1, "a train snapshot is not a sample config");
}

#[test]
fn thread_override_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_bridge-ebm");
    let status = Command::new(bin)
        .args(["gen-dataset", "--out", p(&tmp.path().join("d")), "--per-subtype", "1"])
        .env("EBM_THREADS", "3")
        .status()
        .unwrap();
    assert!(status.success());
    let snap = fs::read_to_string(tmp.path().join("d/effective-config.txt")).unwrap();
    assert!(snap.contains("threads = 3"), "{snap}");

    let o = Command::new(bin).args(["info"]).env("EBM_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_toy_suite_reports_quadratic_tv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["verify", "--suite", "toy", "--out", p(tmp.path())]);
    let line = out.lines().find(|l| l.contains("toy/quadratic-tv")).expect("quadratic line");
    assert!(line.starts_with("PASS"), "{line}");
    let tv: f64 = line.split("tv_distance ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(tv <= 0.05, "{tv}");
    assert!(tmp.path().join("toy-report.csv").exists());
    assert!(tmp.path().join("verify-report.txt").exists());
}
