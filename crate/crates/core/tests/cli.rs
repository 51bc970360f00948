//! End-to-end CLI checks: every subcommand over a small synthetic run,
//! the documented exit codes, and invariance to the thread cap.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mrtl")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let config = r#"{
        "task": "classification",
        "ladder": {"levels": [[2, 2], [4, 4]], "r0": 1},
        "model": {"outputs": 2, "features": 2, "rank": 2},
        "optimizer": {"eta": 0.05, "batch_size": 64, "max_epochs_per_level": 7, "seed": 0},
        "criterion": {"patience": 6},
        "data": {"synthetic": {"true_rank": 2, "smoothness": 0.3, "noise_sigma": 0.0, "samples": 400}},
        "seed": 99
    }"#;
    std::fs::write(&path, config).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "`mrtl {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    assert!(!out.status.success());
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn full_command_surface() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let cfg = config.to_str().unwrap();

    // generate
    let gen_dir = dir.path().join("gen");
    run_ok(&["generate", "--config", cfg, "--out", gen_dir.to_str().unwrap()]);
    for file in ["x_level0.mrtn", "x_level1.mrtn", "labels.csv", "manifest.json"] {
        assert!(gen_dir.join(file).exists(), "missing {file}");
    }

    // train (multiresolution) and train --fixed
    let mrtl_dir = dir.path().join("mrtl");
    let fixed_dir = dir.path().join("fixed");
    run_ok(&["train", "--config", cfg, "--out", mrtl_dir.to_str().unwrap()]);
    run_ok(&["train", "--fixed", "--config", cfg, "--out", fixed_dir.to_str().unwrap()]);
    assert!(mrtl_dir.join("trace.csv").exists());
    assert!(mrtl_dir.join("summary.json").exists());
    let checkpoints: Vec<_> = std::fs::read_dir(&mrtl_dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.ends_with(".ck").then_some(name)
        })
        .collect();
    assert!(checkpoints.len() >= 2, "expected transition checkpoints, got {checkpoints:?}");

    // compare
    let cmp_dir = dir.path().join("cmp");
    let stdout = run_ok(&[
        "compare",
        mrtl_dir.join("summary.json").to_str().unwrap(),
        fixed_dir.join("summary.json").to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("target validation loss"));
    assert!(cmp_dir.join("speedup.json").exists());

    // decompose a full-rank checkpoint
    let full_ck = std::fs::read_dir(&mrtl_dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            (name.contains("_full_") && name.ends_with(".ck")).then_some(name)
        })
        .next()
        .expect("a full-rank checkpoint");
    let dec_dir = dir.path().join("dec");
    let stdout = run_ok(&[
        "decompose",
        "--checkpoint",
        mrtl_dir.join(&full_ck).to_str().unwrap(),
        "--rank",
        "2",
        "--out",
        dec_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("fit"));
    assert!(dec_dir.join("decomposed.ck").exists());

    // export-factors from the final (low-rank) checkpoint
    let mut low_cks: Vec<_> = std::fs::read_dir(&mrtl_dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            (name.contains("_low_") && name.ends_with(".ck")).then_some(name)
        })
        .collect();
    low_cks.sort();
    let exp_dir = dir.path().join("factors");
    run_ok(&[
        "export-factors",
        "--checkpoint",
        mrtl_dir.join(low_cks.last().unwrap()).to_str().unwrap(),
        "--out",
        exp_dir.to_str().unwrap(),
    ]);
    assert!(exp_dir.join("factor_outputs.csv").exists());
    assert!(exp_dir.join("factor_spatial_0.csv").exists());
    assert!(exp_dir.join("factor_spatial_0_k0.pgm").exists());
    assert!(exp_dir.join("morans_i.json").exists());
    let pgm = std::fs::read_to_string(exp_dir.join("factor_spatial_0_k0.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n4 4\n255\n"), "unexpected PGM header: {pgm:.20}");

    // export-factors on a full-rank checkpoint is an instructive error
    let (code, stderr) = run_err(
        &[
            "export-factors",
            "--checkpoint",
            mrtl_dir.join(&full_ck).to_str().unwrap(),
            "--out",
            exp_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("decompose"), "stderr: {stderr}");

    // diagnose on checkpoint + trace
    let diag_dir = dir.path().join("diag");
    let stdout = run_ok(&[
        "diagnose",
        "--checkpoint",
        mrtl_dir.join(low_cks.last().unwrap()).to_str().unwrap(),
        "--trace",
        mrtl_dir.join("trace.csv").to_str().unwrap(),
        "--out",
        diag_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("Moran"));
    assert!(diag_dir.join("diagnose.json").exists());
}

#[test]
fn exit_codes_follow_contract() {
    let dir = tempfile::tempdir().unwrap();

    // Schema error (unknown key) -> 1.
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"task": "classification", "ladder": {"levels": [[2,2]], "r0": 1},
           "data": {"synthetic": {"true_rank": 1, "smoothness": 0.3, "noise_sigma": 0.0, "samples": 100}},
           "seed": 1, "bogus": true}"#,
    )
    .unwrap();
    let (code, _) = run_err(&["train", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(code, 1);

    // I/O error (missing file) -> 2.
    let missing = dir.path().join("nope.json");
    let (code, _) = run_err(&["train", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(code, 2);

    // Mismatched data seeds in compare -> 1.
    let config = small_config(dir.path());
    let cfg = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["train", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg, "--seed", "100", "--out", b.to_str().unwrap()]);
    let (code, stderr) = run_err(
        &[
            "compare",
            a.join("summary.json").to_str().unwrap(),
            b.join("summary.json").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("seed"), "stderr: {stderr}");
}

/// The thread cap must not change any numeric output: chunked reductions
/// have a fixed tree.
#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let cfg = config.to_str().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(bin())
            .args(["train", "--config", cfg, "--out", out.to_str().unwrap()])
            .env("MRTL_THREADS", threads)
            .output()
            .unwrap();
        assert!(status.status.success());
        outputs.push(std::fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "trace differs across MRTL_THREADS settings");
}
