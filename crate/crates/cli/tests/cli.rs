use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hrpinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrpinn"))
        .args(args)
        .env_remove("HRPINN_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let run = hrpinn(&["sweep", "-c", s(&config("smoke.toml")), "-o", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "system,model,projection,seed,mae,dtw,mean_viol,max_viol,final_loss,epochs,wall_s,diverged"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["mass_spring", "PHRPINN", "robust", "0"]);
    assert_eq!(row[11], "false");
    assert!(lines.next().is_none());
    assert!(out.join("aggregate.csv").exists());
    let run_dir = out.join("runs/mass_spring_PHRPINN_robust_seed0");
    for file in ["loss_curve.csv", "checkpoint.txt", "prediction.csv", "diagnostics.csv"] {
        assert!(run_dir.join(file).exists(), "{file}");
    }

    std::fs::remove_file(out.join("aggregate.csv")).unwrap();
    let again = hrpinn(&["report", s(&out)]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stdout).contains("PHRPINN"));
    assert!(out.join("aggregate.csv").exists());
}

#[test]
fn seed_override_and_model_selection() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let run = hrpinn(&["train", "-c", s(&config("smoke.toml")), "-o", s(&out), "--seed", "7", "--model", "phrpinn-robust"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.lines().nth(1).unwrap().starts_with("mass_spring,PHRPINN,robust,7,"));

    let missing = hrpinn(&["train", "-c", s(&config("smoke.toml")), "-o", s(&out), "--model", "PINN"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no model"));
}

#[test]
fn invalid_config_lists_every_fault() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "system = \"mass_spring\"\nseeds = [1, 1]\nmodels = []\n[train]\nlr = -1.0\n").unwrap();
    let run = hrpinn(&["sweep", "-c", s(&path), "-o", s(dir.path())]);
    assert!(!run.status.success());
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.starts_with("error: "), "{err}");
    for needle in ["seed", "model", "lr"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn generate_writes_reference() {
    let dir = tempfile::tempdir().unwrap();
    let run = hrpinn(&["generate", "-c", s(&config("smoke.toml")), "-o", s(dir.path())]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let written = String::from_utf8_lossy(&run.stdout);
    let first = written.lines().next().unwrap();
    let text = std::fs::read_to_string(first).unwrap();
    assert!(text.starts_with("t,x0,x1"));
}
