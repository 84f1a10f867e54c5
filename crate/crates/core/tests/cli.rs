//! End-to-end checks of the `clampsim` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clampsim"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config/scenarios")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// Copy of the quiescent scenario with `edit` applied, written to `dir`.
fn variant(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let src = std::fs::read_to_string(scenarios().join("quiescent.toml")).unwrap();
    let model = scenarios().join("../models/dual_arm_7dof.toml");
    let src = src.replace("\"../models/dual_arm_7dof.toml\"", &format!("{:?}", model.display().to_string()));
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, edit(src)).unwrap();
    path
}

#[test]
fn shipped_configs_validate_cleanly() {
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        let out = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), text(&out));
        assert!(text(&out).contains("ok (0 warning(s))"), "{}", text(&out));
    }
}

#[test]
fn negative_mass_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "neg", |s| s.replace("mass = 0.4", "mass = -0.4"));
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = text(&out);
    assert_eq!(msg.matches("error:").count(), 1, "{msg}");
    assert!(msg.contains("object.mass"), "{msg}");

    let out = bin().args(["run", "--quiet", "--out"]).arg(dir.path()).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn non_conservative_friction_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "mu", |s| s + "\n[friction]\nmu = 0.25\n");
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out).contains("warning: friction.mu"), "{}", text(&out));
}

#[test]
fn syntax_errors_and_unknown_keys_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let broken = variant(dir.path(), "broken", |s| s.replace("duration = 1.0", "duration = "));
    let unknown = variant(dir.path(), "unknown", |s| s.replace("duration = 1.0", "duration = 1.0\ndurration = 2.0"));
    for path in [broken, unknown] {
        let out = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    }
}

#[test]
fn runtime_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "shove", |s| {
        s + "\n[[disturbance]]\nt_start = 0.1\nt_end = 0.9\ntarget = { kind = \"object\" }\n\
             profile = { kind = \"constant\", wrench = [0.0, 0.0, 0.0, 0.0, 3000.0, 0.0] }\n"
    });
    let out = bin().args(["run", "--quiet", "--out"]).arg(dir.path()).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("cycle"), "{}", text(&out));
}

#[test]
fn runs_are_byte_identical_and_summaries_match_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "noisy", |s| {
        s.replace("duration = 1.0", "duration = 0.3").replace("settle = 1.0", "settle = 0.1") + "\n[plant]\nft_noise = 0.05\n"
    });
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = bin().args(["run", "--no-wall-time", "--out"]).arg(&out_dir).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
        logs.push(std::fs::read(out_dir.join("quiescent/log.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);

    let other = dir.path().join("c");
    let out = bin().args(["run", "--quiet", "--no-wall-time", "--seed", "99", "--out"]).arg(&other).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(std::fs::read(other.join("quiescent/log.csv")).unwrap(), logs[0]);

    let model = scenarios().join("../models/dual_arm_7dof.toml");
    let out = bin().arg("summarize").arg(dir.path().join("a/quiescent/log.csv")).arg("--model").arg(&model).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let written = std::fs::read_to_string(dir.path().join("a/quiescent/summary.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), written);
}

#[test]
fn batch_mode_runs_configs_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let short = |s: String| s.replace("duration = 1.0", "duration = 0.1").replace("settle = 1.0", "settle = 0.0");
    let a = variant(dir.path(), "a", |s| short(s).replace("name = \"quiescent\"", "name = \"first\""));
    let b = variant(dir.path(), "b", |s| short(s).replace("name = \"quiescent\"", "name = \"second\""));
    let out = bin().args(["run", "--quiet", "--jobs", "2", "--out"]).arg(dir.path()).arg(&a).arg(&b).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(dir.path().join("first/log.csv").exists() && dir.path().join("second/log.csv").exists());
}

#[test]
fn summarize_rejects_a_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    let out = bin().arg("summarize").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out).contains("schema"), "{}", text(&out));
}
