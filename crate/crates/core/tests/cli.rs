use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_delay-smp"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_scenarios_is_sorted_and_complete() {
    let o = run(&["list-scenarios"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with(' '))
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    assert!(names.len() >= 6, "{names:?}");
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    for want in [
        "gradient_check",
        "duality_check",
        "contraction_study",
        "measure_approx",
        "absde_convergence",
        "optimize",
    ] {
        assert!(names.contains(&want), "{want} missing");
    }
}

#[test]
fn bad_delay_ratio_exits_2_naming_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("scalar_lq.toml");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "grid.delay=0.2505",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(
        msg.contains("grid.delay") && msg.contains("grid.dt"),
        "{msg}"
    );
    assert!(msg.contains("line "), "{msg}");
}

#[test]
fn unknown_scenario_points_to_registry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("scalar_lq.toml");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "scenario=nope",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("list-scenarios"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(config("scalar_lq.toml")).unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        src.replace("horizon = 1.0", "horizon = 1.0\nhorizn = 2.0"),
    )
    .unwrap();
    let o = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizn"), "{}", stderr(&o));
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["scalar_lq.toml", "heat_duality.toml", "measure_dirac.toml"] {
        let o = run(&["validate", "--config", config(name).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gradient_check_reruns_are_byte_identical() {
    let cfg = config("scalar_lq.toml");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let results = read_json(&dir.path().join("results.json"));
        assert_eq!(results["scenario"], "gradient_check");
        assert_eq!(results["seed"], 7);
        assert_eq!(results["status"], "ok");
        for key in ["fd_derivative", "adjoint_derivative", "rel_error"] {
            assert!(results["metrics"][key].is_number(), "{key}");
        }
        assert!(results["metrics"]["rel_error"].as_f64().unwrap() < 1e-3);

        // the manifest names every other file and nothing else
        let manifest = read_json(&dir.path().join("manifest.json"));
        let mut listed: Vec<String> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        listed.sort();
        let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n != "manifest.json")
            .collect();
        on_disk.sort();
        assert_eq!(listed, on_disk);
        assert_eq!(manifest["seed"], 7);

        outputs.push(std::fs::read(dir.path().join("gradient_check.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn measure_approx_tail_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "--config",
        config("measure_dirac.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("measure_approx.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,weak_star_error"));
    let errs: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(*errs.last().unwrap() < 1e-3);
}

#[test]
fn blow_up_exits_1_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "--config",
        config("scalar_lq.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "model.a=900.0",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let diag = read_json(&dir.path().join("diagnostics.json"));
    assert_eq!(diag["status"], "failed");
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert!(manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f == "diagnostics.json"));
}
