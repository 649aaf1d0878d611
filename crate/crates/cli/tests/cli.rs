use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_orchard-track"));
    c.env_remove("ORCHARD_TRACK_SEED").env_remove("RUST_LOG");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn orchard-track")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pearson(o: &Output) -> f64 {
    let text = stdout(o);
    let value = text.lines().find_map(|l| l.strip_prefix("pearson_r: ")).expect("pearson_r line");
    value.parse().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small scene written by the `synth` subcommand.
fn synth(dir: &TempDir, extra: &[&str]) -> PathBuf {
    let scene = dir.path().join("scene");
    let o = run(bin()
        .args(["synth", "--rows", "2", "--fruits-per-row", "10", "--frames", "40", "--out"])
        .arg(&scene)
        .args(extra));
    assert!(o.status.success(), "{}", stderr(&o));
    scene
}

fn track(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    run(bin().arg("track").arg("--input").arg(scene).arg("--out").arg(out).args(extra))
}

#[test]
fn noise_free_total_matches_truth() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let out = dir.path().join("out");
    let o = track(&scene, &out, &["--rows", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "total: 20\nrow 0: 10\nrow 1: 10\n");
    for f in ["points.csv", "tracks.csv", "points.ply", "rows.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let o = run(bin()
        .args(["eval", "--points"])
        .arg(out.join("points.csv"))
        .arg("--truth")
        .arg(scene.join("truth.json"))
        .arg("--tracks")
        .arg(out.join("tracks.csv")));
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    for line in ["matched: 20", "precision: 1\n", "recall: 1\n", "count_error: 0", "outlier_inliers: 0"] {
        assert!(report.contains(line), "{report}");
    }
}

#[test]
fn missing_pose_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    std::fs::remove_file(scene.join("images.txt")).unwrap();
    let o = track(&scene, &dir.path().join("out"), &["--rows", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing pose file"), "{}", stderr(&o));
}

#[test]
fn detections_without_pose_fail() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let images = std::fs::read_to_string(scene.join("images.txt")).unwrap();
    // Drop the pose of the frame with the most detections (keeps the file well formed).
    let kept: Vec<&str> = images.lines().collect();
    let data: Vec<usize> = (0..kept.len()).filter(|&i| !kept[i].starts_with('#')).step_by(2).collect();
    let victim = data[data.len() / 2];
    let text: String = kept
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != victim && *i != victim + 1)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    std::fs::write(scene.join("images.txt"), text).unwrap();
    let o = track(&scene, &dir.path().join("out"), &["--rows", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no camera pose for frame"), "{}", stderr(&o));
}

#[test]
fn degenerate_thresholds_give_an_empty_result() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &["--noise", "1"]);
    let out = dir.path().join("out");
    let o = track(&scene, &out, &["--rows", "2", "--k", "1", "--tau-epipolar", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("total: "));
    assert!(stderr(&o).contains("row clustering skipped"), "{}", stderr(&o));
    let points = std::fs::read_to_string(out.join("points.csv")).unwrap();
    assert!(points.lines().skip(1).all(|l| l.ends_with(",-1")));
}

#[test]
fn too_few_estimates_for_k_leaves_rows_unassigned() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let out = dir.path().join("out");
    let o = track(&scene, &out, &["--rows", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "total: 20\n");
    let points = std::fs::read_to_string(out.join("points.csv")).unwrap();
    assert_eq!(points.lines().filter(|l| l.ends_with(",-1")).count(), 20);
    assert_eq!(std::fs::read_to_string(out.join("rows.csv")).unwrap(), "row,count\n");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir, &[]);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "rows = 2\ninput = \"scene\"\nout = \"from_config\"\ntau_geom = 0.5\nk = 1\n").unwrap();

    let o = run(bin().arg("track").arg("--config").arg(&config));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from_config/points.csv").is_file());

    // The flag restores the default lookahead; config paths still apply.
    let flagged = run(bin().arg("track").arg("--config").arg(&config).args(["--k", "3", "--out"]).arg(dir.path().join("flagged")));
    assert!(flagged.status.success(), "{}", stderr(&flagged));
    assert!(dir.path().join("flagged/points.csv").is_file());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "rows = 2\nransac_iters = 10\n").unwrap();
    let o = track(&scene, &dir.path().join("out"), &["--config", config.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("ransac_iters"), "{}", stderr(&o));
}

#[test]
fn invalid_parameters_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let out = dir.path().join("out");
    let o = track(&scene, &out, &["--rows", "2", "--tau-geom=-1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tau_geom"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = track(&scene, &out, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rows"), "{}", stderr(&o));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let o = run(bin()
        .env("ORCHARD_TRACK_SEED", "not-a-number")
        .arg("track")
        .arg("--input")
        .arg(&scene)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--rows", "2"]));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("ORCHARD_TRACK_SEED") || stderr(&o).contains("seed"), "{}", stderr(&o));

    let ok = run(bin()
        .env("ORCHARD_TRACK_SEED", "7")
        .arg("track")
        .arg("--input")
        .arg(&scene)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--rows", "2"]));
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn correlate_applies_row_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("rows.csv");
    let yields = dir.path().join("yields.csv");
    std::fs::write(&counts, "row,count\n0,5\n1,10\n2,20\n3,30\n4,99\n").unwrap();
    std::fs::write(&yields, "row,yield\n0,100\n1,2\n2,4\n3,6\n4,1\n").unwrap();

    let o = run(bin()
        .arg("correlate")
        .arg("--counts")
        .arg(&counts)
        .arg("--yields")
        .arg(&yields)
        .args(["--exclude-rows", "0,4"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("rows: 1 2 3\n"));
    assert!((pearson(&o) - 1.0).abs() <= 1e-12);

    let config = dir.path().join("c.toml");
    std::fs::write(&config, "exclude_rows = [0, 4]\n").unwrap();
    let o = run(bin()
        .arg("correlate")
        .arg("--counts")
        .arg(&counts)
        .arg("--yields")
        .arg(&yields)
        .arg("--config")
        .arg(&config));
    assert!(stdout(&o).starts_with("rows: 1 2 3\n"));
    assert!((pearson(&o) - 1.0).abs() <= 1e-12);

    let o = run(bin().arg("correlate").arg("--counts").arg(&counts).arg("--yields").arg(&yields).args(["--exclude-rows", "1"]));
    assert!(o.status.success());
    assert!(pearson(&o) < 0.9);
}

#[test]
fn plot_writes_an_svg() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let out = dir.path().join("out");
    assert!(track(&scene, &out, &["--rows", "2"]).status.success());
    let svg = dir.path().join("rows.svg");
    let o = run(bin().args(["plot", "--points"]).arg(out.join("points.csv")).arg("--out").arg(&svg));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches(r#"r="3""#).count(), 20);
    assert!(text.contains("row 0") && text.contains("row 1"));
}

#[test]
fn malformed_detections_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir, &[]);
    let path = scene.join("detections.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("7,12.5\n");
    let line = text.lines().count();
    std::fs::write(&path, text).unwrap();
    let o = track(&scene, &dir.path().join("out"), &["--rows", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--noise", "0.7", "--outliers", "0.4", "--seed", "19"];
    let (sa, sb) = (synth(&a, &args), synth(&b, &args));
    for f in ["cameras.txt", "images.txt", "detections.csv", "truth.json"] {
        assert_eq!(std::fs::read(sa.join(f)).unwrap(), std::fs::read(sb.join(f)).unwrap(), "{f}");
    }
}
