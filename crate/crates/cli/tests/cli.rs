use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crlbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crlbench"))
        .args(args)
        .env("CRLBENCH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn run_report_and_plot_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let out = crlbench(&[
        "run",
        "--config",
        &config("smoke.toml"),
        "--output",
        path(&runs),
        "--seeds",
        "3,4",
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    for seed in ["seed-3", "seed-4"] {
        for file in [
            "results.json",
            "config.echo.toml",
            "lep/accuracy_matrix.csv",
            "slep/metrics.json",
        ] {
            assert!(runs.join(seed).join(file).is_file(), "{seed}/{file}");
        }
    }
    assert!(!runs.join("seed-1").exists());

    let report = dir.path().join("report");
    let out = crlbench(&["report", path(&runs), "--output", path(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.starts_with("| run |"), "{md}");
    assert!(report.join("report.csv").is_file());

    let figs = dir.path().join("figs");
    let out = crlbench(&[
        "plot",
        path(&runs.join("results.json")),
        "--output",
        path(&figs),
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "lep_trajectory.svg",
        "lep_trajectory.png",
        "slep_trajectory.svg",
        "slep_trajectory.png",
    ] {
        assert!(figs.join(name).is_file(), "{name}");
    }
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text.replace("[regime]\n", "[regime]\nlearning_rate = 0.1\n")).unwrap();
    let out = crlbench(&["run", "--config", path(&bad), "--output", path(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_inputs_are_usage_errors() {
    assert_eq!(crlbench(&["report", "--output", "x"]).status.code(), Some(2));
    let out = crlbench(&["run", "--config", "/nonexistent/config.toml"]);
    assert!(!out.status.success());
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_crlbench"))
        .args(["run", "--config", &config("smoke.toml")])
        .env("CRLBENCH_THREADS", "many")
        .output()
        .unwrap();
    assert!(!bad_threads.status.success());
    assert!(String::from_utf8_lossy(&bad_threads.stderr).contains("CRLBENCH_THREADS"));
}

#[test]
fn generate_data_is_byte_identical_on_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for target in [&a, &b] {
        let out = crlbench(&[
            "generate-data",
            "--config",
            &config("flep-simclr.toml"),
            "--output",
            path(target),
            "--quiet",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}
