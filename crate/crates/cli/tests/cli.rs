use kinlayer::io::Bundle;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kinlayer-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn kinlayer(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinlayer"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn config_arg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn report_is_byte_identical_for_the_same_seed() {
    let cfg = config_arg("small.cfg");
    let a = scratch("report-a");
    let b = scratch("report-b");
    for dir in [&a, &b] {
        let o = kinlayer(&["report", "--config", &cfg, "--seed", "5"], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("report.json")).unwrap();
    let rb = fs::read(b.join("report.json")).unwrap();
    assert_eq!(ra, rb);
    let v: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["schema"], "kinlayer.norm_report/1");
    assert_eq!(v["seed"], 5);
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn shipped_default_config_passes_every_hard_check() {
    let out = scratch("default");
    let o = kinlayer(&["report", "--config", &config_arg("default.cfg")], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn theta_beyond_a_quarter_is_rejected_at_load() {
    let dir = scratch("theta");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "weight.theta = 0.3\n").unwrap();
    let o = kinlayer(&["report", "--config", cfg.to_str().unwrap()], &dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("θ < 1/4"));
    assert!(!dir.join("report.json").exists());
}

#[test]
fn odd_velocity_count_is_rejected_with_a_grazing_diagnostic() {
    let dir = scratch("odd");
    let cfg = dir.join("odd.cfg");
    fs::write(&cfg, "vel.n = 9\n").unwrap();
    let o = kinlayer(&["assemble", "--config", cfg.to_str().unwrap()], &dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grazing"));
}

#[test]
fn verify_writes_the_verdict_table() {
    let dir = scratch("verify");
    let o = kinlayer(&["verify", "--lemma", "velocity", "--samples", "500", "--seed", "3", "--config", &config_arg("small.cfg")], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.join("verify_velocity.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample,lhs,rhs,margin"));
    assert_eq!(lines.count(), 500);
    for lemma in ["chi", "alpha-int", "kernel-bound"] {
        let o = kinlayer(&["verify", "--lemma", lemma, "--samples", "12", "--config", &config_arg("small.cfg")], &dir);
        assert!(o.status.success(), "{lemma}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn solve_writes_a_readable_bundle() {
    let dir = scratch("solve");
    let o = kinlayer(&["solve", "--config", &config_arg("small.cfg")], &dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = Bundle::read(&dir).unwrap();
    assert_eq!(b.g.nx, b.sidecar.x.len());
    assert_eq!(b.h.len(), b.sidecar.x.len());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("solution.json")).unwrap()).unwrap();
    assert!(summary["admissibility"][0].as_f64().unwrap().abs() < 1e-8);
    for f in ["moments.csv", "convergence.csv", "config.cfg"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}
