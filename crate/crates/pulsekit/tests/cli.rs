use std::path::Path;
use std::process::Command;

use pulsekit::outcomes::{phase_diagram, Dynamics, Outcome};
use pulsekit::reduced::{Limit, OdeTrajectory, OutcomeKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pulsekit"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_manifest_succeeds_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let m = write(dir.path(), "m.json", &format!(r#"{{"command": "ode-phase", "output": {:?}}}"#, out));
    let o = bin().arg("run").arg(&m).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let outputs = report["outputs"].as_array().unwrap();
    assert!(outputs.iter().all(|f| f.as_str().unwrap().ends_with("summary.json")));
    assert!(out.join("summary.json").exists());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"kappa1_base": -0.1, "tau": "#);
    let o = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path()).args(["solve", "--class", "steady"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    // well-formed but violating an invariant
    let bad = write(
        dir.path(),
        "d.json",
        r#"{"kappa1_base": -0.1, "kappa2": 1.17, "kappa3": 0.3, "kappa4": 1.0, "tau": 3.35,
            "Du": -1e-4, "Dw": 9.8e-4, "domain_length": 1.0, "n_modes": 256}"#,
    );
    let o = bin().arg("--config").arg(&bad).arg("--out").arg(dir.path()).args(["solve", "--class", "steady"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_without_input_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("--out")
        .arg(dir.path())
        .args(["export", "--kind", "phase", "--input"])
        .arg(dir.path().join("absent.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("--out").arg(dir.path()).args(["export", "--kind", "nonsense", "--input", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn phase_export_writes_table_sidecar_and_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let label = |k| {
        let limit = match k {
            OutcomeKind::PEN => Limit::Escape { plus: true },
            _ => Limit::Escape { plus: false },
        };
        pulsekit::outcomes::classify_ode(&OdeTrajectory {
            samples: vec![(0.0, 0.0, 0.0), (1.0, 0.1, 0.0)],
            limit,
            terminal_classification: k,
            alpha_flagged: false,
        })
    };
    let diag = phase_diagram(Dynamics::Ode, &[0.05], &[-0.002, -0.001, 0.001], 0.0, |_, e| -> pulsekit::Result<Outcome> {
        Ok(label(if e < -0.0015 { OutcomeKind::REB } else { OutcomeKind::PEN }))
    })
    .unwrap();
    let input = write(dir.path(), "diag.json", &serde_json::to_string(&diag).unwrap());
    let o = bin().arg("--out").arg(dir.path()).args(["export", "--kind", "phase", "--input"]).arg(&input).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("diagrams/phase.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagrams/phase.json")).unwrap()).unwrap();
    assert!(side["columns"].as_object().is_some_and(|c| c.contains_key("epsilon")), "{side}");
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = bin().arg("--out").arg(&out).args(["solve", "--class", "traveling"]).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("solution.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
