use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "[geometry]\nheight = 32\nwidth = 32\nviews = 64\n[dataset]\nrate = 2\nmetal_px = [12, 5]\n[solver]\nstages = 3\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ct-mepnet"));
    c.env_remove("CT_MEPNET_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Simulates the small config into `dir/data`.
fn small_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, SMALL);
    let data = dir.join("data");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    (cfg, data)
}

#[test]
fn minimal_config_gives_four_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("ds");
    let stdout = ok(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert!(stdout.contains("wrote 4 records"), "{stdout}");
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"id\"").count(), 4);
    assert!(manifest.contains("\"config_hash\": \""));
}

#[test]
fn indivisible_rate_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dataset]\nrate = 3\n");
    let out = run(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("ds"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate must divide views"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nstagez = 3\n");
    let out = run(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("ds"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stagez"));
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a), "--seed", "7", "--threads", "1"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&b), "--seed", "7", "--threads", "3"]);
    let out = bin().args(["simulate", "--config", p(&cfg), "--out", p(&c), "--seed", "8"]).env("CT_MEPNET_THREADS", "2").output().unwrap();
    assert!(out.status.success());
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn identity_reconstruction_improves_a_clean_record() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}[corruption]\nalpha = 0.0\ni0 = 0.0\n");
    let cfg = write_config(dir.path(), &text);
    let data = dir.path().join("data");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    let out = dir.path().join("rec");
    ok(&["reconstruct", "--input", p(&data.join("rec_0000")), "--prox", "identity", "--config", p(&cfg), "--out", p(&out), "--png"]);
    let json = fs::read_to_string(out.join("reconstruct.json")).unwrap();
    let field = |name: &str| -> f64 {
        let line = json.lines().find(|l| l.contains(&format!("\"{name}\""))).unwrap();
        line.split(':').nth(1).unwrap().trim().trim_end_matches(',').parse().unwrap()
    };
    assert!(field("psnr_final") >= field("psnr_x0"), "{json}");
    for f in ["x0.ctt", "x_final.ctt", "s_final.ctt", "x_final.png", "x_gt.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let png = fs::read(out.join("x_final.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn ten_stage_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = small_dataset(dir.path());
    let out = dir.path().join("rec");
    let stdout = ok(&["reconstruct", "--input", p(&data.join("rec_0001")), "--prox", "identity", "--stages", "10", "--dump-stages", "--out", p(&out)]);
    assert!(stdout.contains("X_10"), "{stdout}");
    let names: Vec<String> = fs::read_dir(out.join("stages")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("_x.ctt")).count(), 10);
    assert_eq!(names.iter().filter(|n| n.ends_with("_s.ctt")).count(), 10);
}

#[test]
fn learned_prox_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = small_dataset(dir.path());
    let rec = data.join("rec_0000");
    let out = dir.path().join("rec");
    assert!(!run(&["reconstruct", "--input", p(&rec), "--prox", "learned-equivariant", "--out", p(&out)]).status.success());
    let missing = dir.path().join("no_such_checkpoint");
    let r = run(&["reconstruct", "--input", p(&rec), "--checkpoint", p(&missing), "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("does not exist"));
}

#[test]
fn ground_truth_scores_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_dataset(dir.path());
    let out = dir.path().join("eval");
    let stdout = ok(&["evaluate", "--data", p(&data), "--config", p(&cfg), "--method", "ground-truth", "--method", "input", "--out", p(&out)]);
    assert!(stdout.contains("ground-truth") && stdout.contains("input"), "{stdout}");
    let csv = fs::read_to_string(out.join("ground-truth.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample,rate,metal_px,psnr,ssim"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",99.000000,1.000000")), "{csv}");
    assert!(fs::read_to_string(out.join("input.json")).unwrap().contains("\"config_hash\""));
}

#[test]
fn untrained_checkpoint_evaluates_like_the_identity_solver() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("stages = 3", "stages = 2\nprox = \"learned-equivariant\"\nwidth = 2\neq_channels = 1\ngroup = 4\np = 3");
    let cfg = write_config(dir.path(), &text);
    let data = dir.path().join("data");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    let ck = dir.path().join("ck");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck), "--epochs", "0"]);
    assert!(ck.join("loss_curve.csv").exists() && ck.join("run_config.toml").exists());
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(&["evaluate", "--data", p(&data), "--config", p(&cfg), "--checkpoint", p(&ck), "--out", p(&e1)]);
    ok(&["evaluate", "--data", p(&data), "--config", p(&cfg), "--method", "identity", "--out", p(&e2)]);
    let learned = fs::read_to_string(e1.join("learned-equivariant.csv")).unwrap();
    assert_eq!(learned, fs::read_to_string(e2.join("identity.csv")).unwrap());
    let report = fs::read_to_string(e1.join("learned-equivariant.json")).unwrap();
    assert!(report.contains("\"checkpoint_id\": \""));
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("stages = 3", "stages = 2\nprox = \"learned-standard\"\nwidth = 2") + "[train]\nepochs = 1\nlr = 1e-3\n";
    let cfg = write_config(dir.path(), &text);
    let data = dir.path().join("data");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    let mut trees = Vec::new();
    for threads in ["1", "2"] {
        let ck = dir.path().join(format!("ck{threads}"));
        let ev = dir.path().join(format!("ev{threads}"));
        let stdout = ok(&["--threads", threads, "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck), "--eval", p(&data)]);
        assert!(stdout.contains("trained 4 steps") && stdout.contains("learned-standard"), "{stdout}");
        ok(&["--threads", threads, "evaluate", "--data", p(&data), "--config", p(&cfg), "--method", "input", "--method", "learned-standard", "--checkpoint", p(&ck), "--out", p(&ev), "--png"]);
        assert!(ev.join("png").join("rec_0000_learned-standard.png").exists());
        trees.push((tree(&ck), tree(&ev)));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn check_suites_report_values_and_bounds() {
    for suite in ["adjoint", "equivariance", "descent"] {
        let stdout = ok(&["check", "--suite", suite]);
        assert!(stdout.contains("PASS") && !stdout.contains("FAIL"), "{stdout}");
        assert!(stdout.contains("<="), "{stdout}");
    }
    assert!(!run(&["check", "--suite", "bogus"]).status.success());
}
