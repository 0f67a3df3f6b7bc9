use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gafl-lab"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, gafl: &str) -> String {
    let text = format!(
        r#"{{
  "task": "segmentation",
  "model": {{"kind": "mini_unet", "init_features": 2, "depth": 1}},
  "gafl": {gafl},
  "dataset": {{"band": {{"count": 10, "extents": [8, 8], "signal_radius": 1.0,
    "noise_band": [2.0, 4.0], "noise_sigma": 0.2, "task": "segmentation", "seed": 1}}}},
  "epochs": 3,
  "seed": 2,
  "output_dir": {:?}
}}"#,
        dir.join("default")
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_with_overrides_then_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), r#"{"family": "general", "domain": "log"}"#);
    let out = tmp.path().join("run");
    let o = lab(&[
        "run",
        "--config",
        &config,
        "--epochs",
        "1",
        "--seed",
        "9",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("val dice="));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!tmp.path().join("default").exists());

    let pgm = tmp.path().join("spec.pgm");
    let ckpt = out.join("model.ckpt");
    let o = lab(&[
        "dump-spectrum",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        pgm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn ablate_prints_both_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), r#"{"family": "linear"}"#);
    let o = lab(&["ablate", "--config", &config, "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("params base="));
    assert!(text.contains("\nbase: epoch0") && text.contains("\ngafl: epoch0"));
    let summary = std::fs::read_to_string(tmp.path().join("default/ablation.txt")).unwrap();
    assert_eq!(summary, text);
}

#[test]
fn errors_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&[
        "run",
        "--config",
        tmp.path().join("missing.json").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("gafl-lab: "));

    let config = write_config(tmp.path(), "\"none\"");
    let o = lab(&["ablate", "--config", &config]);
    assert!(!o.status.success());

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"task": "segmentation", "colour": "blue"}"#).unwrap();
    assert!(!lab(&["run", "--config", bad.to_str().unwrap()])
        .status
        .success());
    assert!(!lab(&["run"]).status.success());
    assert!(
        !lab(&["dump-spectrum", "--ckpt", "/nonexistent", "--out", "x.pgm"])
            .status
            .success()
    );
}
