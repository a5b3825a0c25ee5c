use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfr::archive::sha256_hex;

fn pfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pfr(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(p: &Path) -> String {
    sha256_hex(&std::fs::read(p).unwrap())
}

const TINY: &str = "\
# narrow model for fast runs
model.channels = 8,8
model.time_dim = 8
model.token_dim = 8
model.head_dim = 8
model.max_groups = 2
train.crop_size = 16
personalize.crop_size = 16
";

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pfr(&["restore", "--bogus"]).status.code(), Some(2));
    assert_eq!(pfr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pfr(&[]).status.code(), Some(2));
    assert_eq!(pfr(&["restore", "--in", "a.png", "--out", "b.png"]).status.code(), Some(2));
    assert_eq!(pfr(&["degrade", "--in", ".", "--out", "x", "--level", "medium"]).status.code(), Some(2));
    assert_eq!(pfr(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = pfr(&["restore", "--base", s(&missing), "--in", s(&missing), "--out", s(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sampler.colour = red\n").unwrap();
    let out = pfr(&["--config", s(&cfg), "make-toy-data", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampler.colour"));
}

#[test]
fn full_pipeline_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| -> PathBuf { dir.path().join(n) };
    std::fs::write(p("tiny.cfg"), TINY).unwrap();
    let cfg = p("tiny.cfg");
    let base = |extra: &[&str]| -> Vec<String> {
        let mut v = vec!["--config".to_string(), s(&cfg).to_string(), "--seed".into(), "5".into()];
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let run = |extra: &[&str]| {
        let args = base(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["make-toy-data", "--out", s(&p("data")), "--identities", "3", "--images", "2", "--size", "16"]);
    assert!(p("data/id002/1.png").is_file());
    assert!(p("data/manifest.txt").is_file());
    assert!(p("data/identities.json").is_file());

    run(&["--jobs", "2", "degrade", "--in", s(&p("data")), "--out", s(&p("lq")), "--level", "heavy"]);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("lq/id000/0.json")).unwrap()).unwrap();
    assert_eq!(record["level"], "heavy");
    let lq_digest = digest(&p("lq/id001/1.png"));
    run(&["--jobs", "1", "degrade", "--in", s(&p("data")), "--out", s(&p("lq1")), "--level", "heavy"]);
    assert_eq!(digest(&p("lq1/id001/1.png")), lq_digest);

    run(&["train-base", "--data", s(&p("data")), "--out", s(&p("base.bin")), "--epochs", "1", "--batch-size", "2"]);
    let base_digest = digest(&p("base.bin"));
    let log = std::fs::read_to_string(p("base.bin.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().next().unwrap().contains("\"l_diff\""));

    run(&["personalize", "--base", s(&p("base.bin")), "--refs", s(&p("data/id000")), "--out", s(&p("state.bin")), "--iters", "2"]);
    assert_eq!(digest(&p("base.bin")), base_digest);
    assert_eq!(std::fs::read_to_string(p("state.bin.log")).unwrap().lines().count(), 2);
    let manifest = std::fs::read_to_string(p("state.bin.manifest.txt")).unwrap();
    assert!(manifest.contains("command = personalize"));
    assert!(manifest.contains("personalize.iterations = 2"));

    for out in ["r1", "r2"] {
        run(&[
            "restore", "--state", s(&p("state.bin")), "--in", s(&p("lq")), "--out", s(&p(out)), "--steps", "3",
            "--tile", "8", "--overlap", "4",
        ]);
    }
    assert_eq!(digest(&p("r1/id002/0.png")), digest(&p("r2/id002/0.png")));
    run(&[
        "restore", "--base", s(&p("base.bin")), "--in", s(&p("lq/id000/0.png")), "--out", s(&p("up.png")),
        "--steps", "2", "--upscale", "2", "--tile", "16", "--overlap", "8",
    ]);
    assert_eq!(image::image_dimensions(p("up.png")).unwrap(), (32, 32));

    run(&["evaluate", "--restored", s(&p("r1")), "--gt", s(&p("data")), "--out", s(&p("report.csv"))]);
    let csv = std::fs::read_to_string(p("report.csv")).unwrap();
    assert!(csv.starts_with("name,psnr,ssim,lmse,id_percent,lpips,musiq\n"));
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn state_for_other_weights_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| -> PathBuf { dir.path().join(n) };
    std::fs::write(p("tiny.cfg"), TINY).unwrap();
    let c = s(&p("tiny.cfg")).to_string();
    ok(&["--config", &c, "make-toy-data", "--out", s(&p("data")), "--identities", "2", "--images", "1", "--size", "16"]);
    for (seed, name) in [("1", "a.bin"), ("2", "b.bin")] {
        ok(&["--config", &c, "--seed", seed, "train-base", "--data", s(&p("data")), "--out", s(&p(name)), "--epochs", "1"]);
    }
    ok(&["--config", &c, "personalize", "--base", s(&p("a.bin")), "--refs", s(&p("data/id000")), "--out", s(&p("s.bin")), "--iters", "1"]);
    let out = pfr(&[
        "restore", "--base", s(&p("b.bin")), "--state", s(&p("s.bin")), "--in", s(&p("data/id000/0.png")),
        "--out", s(&p("o.png")), "--steps", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different base weights"));
}

/// Default model and sampler on a 64x64 input.
#[test]
fn restore_smoke_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| -> PathBuf { dir.path().join(n) };
    ok(&["make-toy-data", "--out", s(&p("data")), "--identities", "2", "--images", "2", "--size", "64"]);
    ok(&["train-base", "--data", s(&p("data")), "--out", s(&p("base.bin")), "--epochs", "1"]);
    let input = p("data/id000/0.png");
    let mut hashes = Vec::new();
    for k in 0..2 {
        let out = p(&format!("out{k}.png"));
        ok(&["--seed", "9", "restore", "--base", s(&p("base.bin")), "--in", s(&input), "--out", s(&out)]);
        assert_eq!(image::image_dimensions(&out).unwrap(), (64, 64));
        let manifest = std::fs::read_to_string(p(&format!("out{k}.png.manifest.txt"))).unwrap();
        assert!(manifest.contains("sampler.steps = 200"));
        assert!(manifest.contains(&digest(&out)));
        hashes.push(digest(&out));
    }
    assert_eq!(hashes[0], hashes[1]);
}
