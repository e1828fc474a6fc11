//! Drives the `eventmatch` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eventmatch"));
    c.env_remove("RUST_LOG");
    c
}

fn eventmatch(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const PLANE: &str = "f_prime 100\nwidth 48\nheight 40\ntau 0.02\ndt 1\nseed 3\nplane depth=10 velocity=0.2,0,0 density=0.3 rate=300\n";
const STEREO: &str = "f_prime 200\nbaseline 0.5\nwidth 48\nheight 40\ntau 0.02\ndt 1\nseed 4\nplane depth=50 density=0.3 rate=300\n";

fn setup(scene: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("scene.txt"), scene).unwrap();
    let o = eventmatch(&["synth", "scene.txt", "--out", "s", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = eventmatch(&["init-weights", "--out", "w.bin", "--seed", "2", "--dim", "32", "--blocks", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn synth_writes_the_file_inventory_and_manifest() {
    let dir = setup(PLANE);
    let mut names: Vec<_> = fs::read_dir(dir.path().join("s")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["gt_disp.tnsr", "gt_flow.tnsr", "left_t.txt", "left_t2.txt", "manifest.json", "right_t.txt"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["formats"]["weights"].is_number());
    assert!(m["events"]["left_t"].as_u64().unwrap() > 0);
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("scene.txt"), PLANE).unwrap();
    for out in ["a", "b"] {
        let o = eventmatch(&["synth", "scene.txt", "--out", out, "--seed", "9", "--format", "binary"], dir.path());
        assert_eq!(code(&o), 0);
    }
    for f in ["left_t.bin", "left_t2.bin", "right_t.bin", "gt_flow.tnsr", "gt_disp.tnsr", "manifest.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let o = eventmatch(&["synth", "scene.txt", "--out", "c", "--seed", "10", "--format", "binary"], dir.path());
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(dir.path().join("a/left_t.bin")).unwrap(), fs::read(dir.path().join("c/left_t.bin")).unwrap());
}

#[test]
fn zero_density_scene_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("scene.txt"), "f_prime 100\nwidth 16\nheight 16\ntau 0.02\ndt 1\nplane depth=10 density=0 rate=100\n").unwrap();
    let o = eventmatch(&["synth", "scene.txt", "--out", "s"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no events"));
    let text = fs::read_to_string(dir.path().join("s/left_t.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 0);
    let gt = eventmatch::tensor::read_tensor(&fs::read(dir.path().join("s/gt_flow.tnsr")).unwrap()).unwrap();
    assert!(gt.data().chunks(3).all(|px| px[2] == 0.0));
}

#[test]
fn flow_then_eval_produces_metrics_and_stage_dumps() {
    let dir = setup(PLANE);
    let o = eventmatch(
        &["flow", "s/left_t.txt", "s/left_t2.txt", "--weights", "w.bin", "--out", "flow.tnsr", "--dump-stages", "stages", "--ppm", "flow.ppm", "--json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["task"], "flow");
    assert_eq!((summary["height"].as_u64(), summary["width"].as_u64()), (Some(40), Some(48)));
    let t = eventmatch::tensor::read_tensor(&fs::read(dir.path().join("flow.tnsr")).unwrap()).unwrap();
    assert_eq!(t.dims(), &[40, 48, 3]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("flow.json")).unwrap()).unwrap();
    assert_eq!(side["mode"], "flow");
    assert_eq!(side["config_hash"], summary["config_hash"]);
    assert!(dir.path().join("stages/00_global.tnsr").exists());
    assert!(fs::read(dir.path().join("flow.ppm")).unwrap().starts_with(b"P6\n48 40\n255\n"));

    let o = eventmatch(&["eval-flow", "flow.tnsr", "s/gt_flow.tnsr", "--margin", "4", "--json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["epe"].as_f64().unwrap().is_finite());
    assert!(m["npe"]["1"].as_f64().unwrap() <= 100.0);
}

#[test]
fn disparity_from_voxel_tensors() {
    let dir = setup(STEREO);
    for (src, dst) in [("s/left_t.txt", "l.tnsr"), ("s/right_t.txt", "r.tnsr")] {
        let o = eventmatch(&["voxelize", src, "--out", dst], dir.path());
        assert_eq!(code(&o), 0);
    }
    let v = eventmatch::tensor::read_tensor(&fs::read(dir.path().join("l.tnsr")).unwrap()).unwrap();
    assert_eq!(v.dims(), &[40, 48, 5]);
    let o = eventmatch(&["disparity", "l.tnsr", "r.tnsr", "--weights", "w.bin", "--out", "d.tnsr", "--deterministic"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = eventmatch(&["eval-disp", "d.tnsr", "s/gt_disp.tnsr"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("MAE") && text.contains("RMSE"));
}

#[test]
fn stage_toggles_still_yield_a_field() {
    let dir = setup(PLANE);
    let o = eventmatch(
        &["flow", "s/left_t.txt", "s/left_t2.txt", "--weights", "w.bin", "--out", "raw.tnsr", "--no-transformer", "--no-refinement", "--json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<_> = summary["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["global", "propagated", "multiscale"]);
    assert!(dir.path().join("raw.tnsr").exists());
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = setup(PLANE);
    for out in ["a.tnsr", "b.tnsr"] {
        let o = eventmatch(&["flow", "s/left_t.txt", "s/left_t2.txt", "--weights", "w.bin", "--out", out, "--deterministic"], dir.path());
        assert_eq!(code(&o), 0);
    }
    let o = eventmatch(&["flow", "s/left_t.txt", "s/left_t2.txt", "--weights", "w.bin", "--out", "c.tnsr", "--threads", "3"], dir.path());
    assert_eq!(code(&o), 0);
    let a = fs::read(dir.path().join("a.tnsr")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.tnsr")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("c.tnsr")).unwrap());
}

#[test]
fn mismatched_resolutions_are_a_data_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("a.txt"), "# evt v1 64 64 0 1000\n10 1 1 1\n").unwrap();
    fs::write(dir.path().join("b.txt"), "# evt v1 32 32 0 1000\n10 1 1 1\n").unwrap();
    let o = eventmatch(&["init-weights", "--out", "w.bin", "--dim", "16", "--blocks", "1"], dir.path());
    assert_eq!(code(&o), 0);
    let o = eventmatch(&["flow", "a.txt", "b.txt", "--weights", "w.bin", "--out", "f.tnsr"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolution"));
    assert!(!dir.path().join("f.tnsr").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&eventmatch(&[], dir.path())), 1);
    assert_eq!(code(&eventmatch(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&eventmatch(&["flow", "a", "b"], dir.path())), 1);
    assert_eq!(code(&eventmatch(&["--help"], dir.path())), 0);
    // Missing weights file.
    fs::write(dir.path().join("a.txt"), "# evt v1 8 8 0 100\n").unwrap();
    let o = eventmatch(&["flow", "a.txt", "a.txt", "--weights", "nope.bin", "--out", "f.tnsr"], dir.path());
    assert_eq!(code(&o), 2);
    fs::write(dir.path().join("bad.txt"), "plane depth=oops\n").unwrap();
    assert_eq!(code(&eventmatch(&["synth", "bad.txt", "--out", "s"], dir.path())), 2);
    // Invalid parameter values are usage errors.
    assert_eq!(code(&eventmatch(&["init-weights", "--out", "w.bin", "--dim", "0"], dir.path())), 1);
    let o = eventmatch(&["init-weights", "--out", "w.bin", "--dim", "16", "--blocks", "1"], dir.path());
    assert_eq!(code(&o), 0);
    let o = eventmatch(&["flow", "a.txt", "a.txt", "--weights", "w.bin", "--out", "f.tnsr", "--temperature", "-1"], dir.path());
    assert_eq!(code(&o), 1);
    let o = eventmatch(&["flow", "a.txt", "a.txt", "--weights", "w.bin", "--out", "f.tnsr", "--dim", "64"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn selfcheck_json_report_and_fault_injection() {
    let dir = TempDir::new().unwrap();
    let o = eventmatch(&["selfcheck", "--json", "--deterministic"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["seed"], 0);
    for c in r["checks"].as_array().unwrap() {
        for k in ["name", "passed", "measured", "tolerance", "detail", "seconds"] {
            assert!(c.get(k).is_some(), "missing {k}");
        }
    }

    let o = eventmatch(&["selfcheck", "--break", "voxel-mass", "--json"], dir.path());
    assert_eq!(code(&o), 3);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<_> = r["checks"].as_array().unwrap().iter().filter(|c| c["passed"] == false).map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(failed, ["voxel-mass"]);

    assert_eq!(code(&eventmatch(&["selfcheck", "--break", "nonexistent"], dir.path())), 1);
}
