use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn demoadapt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demoadapt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synth_demo(dir: &Path) {
    let o = demoadapt(&["synth", "demo", "--out", "demo", "--frames", "8", "--seed", "3"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_recording_and_report() {
    let dir = tempfile::tempdir().unwrap();
    synth_demo(dir.path());
    let o = demoadapt(
        &["run", "--demo", "demo", "--calib", "demo/calibration.toml", "--out", "out", "--report", "report.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["frames_input"], 8);
    let saved: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
    assert!(dir.path().join("out/metadata.toml").is_file());
    assert!(dir.path().join("out/actions.jsonl").is_file());
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn run_refuses_non_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    synth_demo(dir.path());
    fs::create_dir(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/keep.txt"), "x").unwrap();
    let o = demoadapt(&["run", "--demo", "demo", "--calib", "demo/calibration.toml", "--out", "out"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_to_string(dir.path().join("out/keep.txt")).unwrap(), "x");
}

#[test]
fn missing_frame_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_demo(dir.path());
    fs::remove_file(dir.path().join("demo/depth/000005.png")).unwrap();
    let o = demoadapt(&["run", "--demo", "demo", "--calib", "demo/calibration.toml", "--out", "out"], dir.path());
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('5') && err.contains("depth"), "{err}");
    assert!(!dir.path().join("out").exists());
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&demoadapt(&["no-such-command"], dir.path())), 2);
    fs::write(dir.path().join("bad.toml"), "voxel_size = -1.0\n").unwrap();
    let o = demoadapt(&["--config", "bad.toml", "eval-accuracy", "--trials", "2"], dir.path());
    assert_eq!(code(&o), 2);
    fs::write(dir.path().join("bad.toml"), "[inpaint]\nbackend = \"nope\"\n").unwrap();
    synth_demo(dir.path());
    let o = demoadapt(
        &["--config", "bad.toml", "run", "--demo", "demo", "--calib", "demo/calibration.toml", "--out", "out"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_accuracy_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = demoadapt(&["eval-accuracy", "--noise-sigma", "0.0", "0.1", "--trials", "5"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("Avg ± Std / Max"), "{out}");
    assert!(out.contains("| 0 | 0.000±0.000 / 0.000 |"), "{out}");
}

#[test]
fn render_writes_eight_bit_mask() {
    let dir = tempfile::tempdir().unwrap();
    synth_demo(dir.path());
    let q = serde_json::to_string(&vec![vec![0.0, 0.8, 0.0, 1.2, 0.0, 0.3, 0.0]; 2]).unwrap();
    let o = demoadapt(
        &[
            "render", "--chains", "demo/rig.toml", "--calib", "demo/calibration.toml", "--q", &q, "--width", "160",
            "--height", "90", "--out", "r",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mask = image::open(dir.path().join("r/mask.png")).unwrap();
    let gray = mask.as_luma8().expect("8-bit gray mask");
    assert!(gray.pixels().any(|p| p.0[0] == 255));
    assert!(gray.pixels().any(|p| p.0[0] == 0));
}

#[test]
fn align_round_trips_arrays() {
    use demoadapt::io::{read_array, write_array, Array};
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_array(&p.join("f.bin"), &Array::f64(vec![1, 2, 1], vec![1.0, 3.0]).unwrap()).unwrap();
    write_array(
        &p.join("c.bin"),
        &Array::f64(vec![1, 2, 3], vec![0.0, 0.0, 1.0, f64::NAN, 0.0, 1.0]).unwrap(),
    )
    .unwrap();
    write_array(&p.join("s.bin"), &Array::f64(vec![1, 3], vec![0.5, 0.0, 1.0]).unwrap()).unwrap();
    let o = demoadapt(
        &["align", "--features", "f.bin", "--coords", "c.bin", "--seeds", "s.bin", "--out", "o.bin"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = read_array(&p.join("o.bin")).unwrap();
    assert_eq!(out.shape, vec![1, 1]);
    // the NaN cell is invalid, so the only neighbor is the first cell
    assert_eq!(out.data, vec![1.0]);
}
