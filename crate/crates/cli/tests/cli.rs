use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hubless::keypoints::load_keypoints;
use hubless::volume::{write_volume, Volume};

fn hubless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hubless"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    v.sort();
    v
}

fn synth(dir: &Path, seed: &str) {
    let out = hubless(&[
        "synth", "--out-dir", p(dir), "--seed", seed, "--images", "3", "--points", "300", "--outlier-rate", "0.3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn register_args<'a>(kps: &'a [PathBuf], matches: &'a Path, out: &'a Path) -> Vec<&'a str> {
    let mut args = vec!["--threads", "2", "register", "--matches", p(matches), "--out-dir", p(out)];
    args.extend(["--iterations", "40", "--levels", "100,50"]);
    args.push("--keypoints");
    args.extend(kps.iter().map(|k| p(k)));
    args
}

#[test]
fn synth_register_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "3");
    let kps = files(&data, "kp_");
    assert_eq!(kps.len(), 3);

    let reg = dir.path().join("reg");
    let out = hubless(&register_args(&kps, &data.join("matches.txt"), &reg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let transforms = files(&reg, "transform_");
    assert_eq!(transforms.len(), 3);
    assert!(reg.join("trace.csv").exists());

    let report = dir.path().join("report.csv");
    let landmarks = data.join("landmarks.csv");
    let mut args = vec!["evaluate", "--landmarks", p(&landmarks), "--output", p(&report)];
    args.push("--transform");
    args.extend(transforms.iter().map(|t| p(t)));
    let out = hubless(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("category,mean_mm,max_mm,count\n"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn register_needs_two_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let kps = files(dir.path(), "kp_");
    let out = hubless(&register_args(&kps[..1], &dir.path().join("matches.txt"), &dir.path().join("reg")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("need at least 2 images"));
}

#[test]
fn mismatched_file_sets_fail() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let mut kps = files(dir.path(), "kp_");
    kps.swap(0, 1);
    kps.push(kps[0].clone());
    let out = hubless(&register_args(&kps, &dir.path().join("matches.txt"), &dir.path().join("reg")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn unknown_flag_fails() {
    let out = hubless(&["synth", "--out-dir", "x", "--no-such-flag"]);
    assert!(!out.status.success());
}

#[test]
fn register_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "5");
    let kps = files(dir.path(), "kp_");
    let runs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let reg = dir.path().join(name);
            let out = hubless(&register_args(&kps, &dir.path().join("matches.txt"), &reg));
            assert!(out.status.success());
            files(&reg, "transform_").iter().map(|f| std::fs::read(f).unwrap()).collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn extract_caps_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("v.nii");
    // a lattice of blobs gives far more candidates than the cap
    let v = Volume::from_fn([96, 96, 96], [1.0; 3], [0.0; 3], |q| {
        let c = q.map(|x| ((x / 16.0).round() * 16.0 - x).powi(2)).sum();
        (100.0 * (-c / 32.0).exp()) as f32
    })
    .unwrap();
    write_volume(&vol, &v).unwrap();
    let kp = dir.path().join("kp.bin");
    let out = hubless(&["extract", "--input", p(&vol), "--output", p(&kp), "--max-keypoints", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = load_keypoints(&kp, 0).unwrap().len();
    assert!(n > 0 && n <= 20, "{n}");
}

#[test]
fn apply_maps_points() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    let truth = dir.path().join("truth_001.json");
    let pts = dir.path().join("pts.csv");
    std::fs::write(&pts, "x,y,z\n150,150,150\n100,120,140\n").unwrap();
    let mapped = dir.path().join("mapped.csv");
    let out = hubless(&["apply", "--transform", p(&truth), "--points", p(&pts), "--output", p(&mapped)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, t) = hubless::transforms::load_transform(&truth).unwrap();
    let text = std::fs::read_to_string(&mapped).unwrap();
    let first: Vec<f64> = text.lines().next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let want = t.apply(&hubless::Vec3::repeat(150.0));
    assert!((hubless::Vec3::new(first[0], first[1], first[2]) - want).norm() < 1e-9);
}

