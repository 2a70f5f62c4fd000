//! End-to-end checks of the `droopflow` binary: artifact emission, exit
//! codes, and byte-identical manifests across repeated runs.

use std::path::Path;
use std::process::{Command, Output};

const CASE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/cases/case5_acdc.json");

fn droopflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droopflow"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn assert_artifacts(dir: &Path, names: &[&str]) {
    for name in names {
        assert!(dir.join(name).is_file(), "missing artifact {name}");
    }
}

#[test]
fn opf_run_emits_solution_consistency_trace_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = droopflow(&[
        "opf",
        CASE,
        "--scenario",
        "ii",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_artifacts(
        &out,
        &["solution.json", "consistency.csv", "trace.csv", "manifest.json"],
    );
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("opf converged"), "stdout: {stdout}");

    let solution: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert!(solution["objective"].as_f64().unwrap() > 0.0);
    assert_eq!(solution["states"][0]["label"], "base");

    let consistency = std::fs::read_to_string(out.join("consistency.csv")).unwrap();
    assert!(consistency.starts_with("state,element,kind,"));
}

#[test]
fn csv_format_swaps_the_solution_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = droopflow(&[
        "pf",
        CASE,
        "--mode",
        "linear",
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert_artifacts(&out, &["solution.csv", "manifest.json"]);
    assert!(!out.join("solution.json").exists());
    let body = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    assert!(body.starts_with("component,id,field,value\n"));
    assert!(body.contains("bus,b1,vm,"));
}

#[test]
fn unreadable_and_invalid_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    let res = droopflow(&["pf", "/nonexistent/case.json", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let res = droopflow(&["opf", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    // clap's own usage errors share the code
    let res = droopflow(&["opf"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn validation_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    // structurally valid JSON whose network fails validation: branch to a
    // bus that does not exist
    let source = std::fs::read_to_string(CASE).unwrap();
    let broken = source.replace("\"to_id\": \"b2\"", "\"to_id\": \"nope\"");
    assert_ne!(source, broken);
    let path = tmp.path().join("broken.json");
    std::fs::write(&path, broken).unwrap();

    let res = droopflow(&["opf", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

#[test]
fn manifests_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let res = droopflow(&[
            "opf",
            CASE,
            "--scenario",
            "iii",
            "--eps",
            "1e-3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);

    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(manifest["tool"], "droopflow");
    assert_eq!(manifest["scenario"], "iii");
    assert_eq!(manifest["case_hash"].as_str().unwrap().len(), 16);
}
