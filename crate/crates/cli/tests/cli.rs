//! End-to-end tests of the `resect` binary: artifact layout, exit codes,
//! CSV/JSON structure, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resect"))
}

/// Small, fast configuration used by most tests.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "version": 1,
  "phantom": {
    "dims": [16, 16, 16],
    "seed": 9,
    "removal_radius_frac": [0.30, 0.40]
  },
  "optimizer": { "max_iters": 30, "seed": 9 }
}"#,
    )
    .unwrap();
    path
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn artifact_hashes(dir: &Path) -> Vec<(String, String)> {
    manifest(dir)["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            (
                a["path"].as_str().unwrap().to_string(),
                a["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn phantom_writes_volume_triple_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "phantom"])
        .output()
        .unwrap();
    assert_success(&out);
    for name in ["spec.json", "pre.json", "pre.raw", "post.json", "post.raw", "gt.json", "gt.raw"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let m = manifest(&out_dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["version"], 1);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 7);
}

#[test]
fn pipeline_produces_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |out_dir: &Path, threads: &str| {
        let out = bin()
            .args([
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--threads",
                threads,
                "pipeline",
            ])
            .output()
            .unwrap();
        assert_success(&out);
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&a, "1");
    run(&b, "2");

    let hashes_a = artifact_hashes(&a);
    assert!(
        hashes_a.len() >= 10,
        "expected at least 10 artifacts, got {}",
        hashes_a.len()
    );
    for name in ["spec.json", "delta.raw", "mask.raw", "trace.csv", "metrics.csv", "summary.csv", "mask.stl", "masked.stl"] {
        assert!(
            hashes_a.iter().any(|(p, _)| p == name),
            "manifest missing {name}"
        );
    }
    assert_eq!(hashes_a, artifact_hashes(&b), "runs must be byte-identical");

    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,dice,iou,acc,pre,sen,spe,hd95,asd"
    );
    assert!(lines.next().unwrap().starts_with("phantom,"));
}

#[test]
fn seed_flag_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |out_dir: &Path, seed: &str| {
        let out = bin()
            .args([
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--seed",
                seed,
                "phantom",
            ])
            .output()
            .unwrap();
        assert_success(&out);
    };
    let a = tmp.path().join("s1");
    let b = tmp.path().join("s2");
    run(&a, "1");
    run(&b, "2");
    let pre = |d: &Path| {
        artifact_hashes(d)
            .into_iter()
            .find(|(p, _)| p == "pre.raw")
            .unwrap()
            .1
    };
    assert_ne!(pre(&a), pre(&b), "different seeds must change the phantom");
}

#[test]
fn invalid_loss_variant_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"version":1,"loss_variant":"nope"}"#).unwrap();
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
            "pipeline",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"version":1,"phanton":{}}"#).unwrap();
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
            "phantom",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--out",
            tmp.path().join("o").to_str().unwrap(),
            "mesh",
            tmp.path().join("nowhere.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("i/o error"));
}

#[test]
fn optimize_then_loss_eval_then_mesh_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ph = tmp.path().join("ph");
    let opt = tmp.path().join("opt");
    let loss = tmp.path().join("loss");
    let mesh = tmp.path().join("mesh");
    let cfg_s = cfg.to_str().unwrap();

    let out = bin()
        .args(["--config", cfg_s, "--out", ph.to_str().unwrap(), "phantom"])
        .output()
        .unwrap();
    assert_success(&out);

    let pre = ph.join("pre.json");
    let post = ph.join("post.json");
    let out = bin()
        .args([
            "--config",
            cfg_s,
            "--out",
            opt.to_str().unwrap(),
            "optimize",
            pre.to_str().unwrap(),
            post.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let trace = std::fs::read_to_string(opt.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iter,total,msssim_cscc,smooth");
    assert_eq!(trace.lines().count(), 31, "header + one row per iteration");
    assert!(opt.join("delta.raw").exists() && opt.join("mask.raw").exists());

    let out = bin()
        .args([
            "--config",
            cfg_s,
            "--out",
            loss.to_str().unwrap(),
            "loss",
            "eval",
            pre.to_str().unwrap(),
            post.to_str().unwrap(),
            opt.join("delta.json").to_str().unwrap(),
            "--per-scale",
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(loss.join("loss.json")).unwrap()).unwrap();
    assert!(report["total"].is_number());
    assert!(report["per_scale"].is_array());
    let scales = std::fs::read_to_string(loss.join("scales.csv")).unwrap();
    assert_eq!(
        scales.lines().next().unwrap(),
        "scale,c_mean,s_mean,scc,scc_degenerate,l_mean"
    );

    let out = bin()
        .args([
            "--out",
            mesh.to_str().unwrap(),
            "mesh",
            opt.join("mask.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let stl = std::fs::read(mesh.join("mask.stl")).unwrap();
    assert!(stl.len() >= 84, "STL must have header + count");
    let n_tri = u32::from_le_bytes(stl[80..84].try_into().unwrap()) as usize;
    assert_eq!(stl.len(), 84 + 50 * n_tri, "STL size must match its count");
    assert!(mesh.join("mask.obj").exists());
}

#[test]
fn evaluate_scores_manifest_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ph = tmp.path().join("ph");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ph.to_str().unwrap(),
            "phantom",
        ])
        .output()
        .unwrap();
    assert_success(&out);

    // Scoring the truth against itself must give perfect overlap and zero
    // surface distance.
    let man = tmp.path().join("cases.json");
    std::fs::write(
        &man,
        r#"{"version":1,"cases":[{"name":"self","pred":"ph/gt.json","gt":"ph/gt.json"}]}"#,
    )
    .unwrap();
    let ev = tmp.path().join("ev");
    let out = bin()
        .args([
            "--out",
            ev.to_str().unwrap(),
            "evaluate",
            man.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let metrics = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert_eq!(row, "self,1,1,1,1,1,1,0,0");
    let summary = std::fs::read_to_string(ev.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6, "header + 5 stat rows");
    assert!(summary.lines().nth(1).unwrap().starts_with("min,"));

    // A manifest case referencing a missing file is an I/O error.
    let man_bad = tmp.path().join("bad.json");
    std::fs::write(
        &man_bad,
        r#"{"version":1,"cases":[{"name":"x","pred":"ph/gt.json","gt":"ph/gone.json"}]}"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "--out",
            tmp.path().join("ev2").to_str().unwrap(),
            "evaluate",
            man_bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn register_reports_transform_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("mis.json");
    std::fs::write(
        &cfg,
        r#"{
  "version": 1,
  "phantom": {
    "dims": [16, 16, 16],
    "seed": 3,
    "removal_radius_frac": [0.30, 0.40],
    "misalignment": { "rot_rad": [0.0, 0.0, 0.03], "trans_mm": [1.0, 0.0, 0.0] }
  }
}"#,
    )
    .unwrap();
    let ph = tmp.path().join("ph");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ph.to_str().unwrap(),
            "phantom",
        ])
        .output()
        .unwrap();
    assert_success(&out);

    let reg = tmp.path().join("reg");
    let out = bin()
        .args([
            "--out",
            reg.to_str().unwrap(),
            "register",
            ph.join("pre.json").to_str().unwrap(),
            ph.join("post.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reg.join("transform.json")).unwrap())
            .unwrap();
    assert_eq!(t["rot_rad"].as_array().unwrap().len(), 3);
    assert_eq!(t["trans_mm"].as_array().unwrap().len(), 3);
    assert!(t["ncc"].as_f64().unwrap() > 0.5, "alignment should correlate");
    assert!(reg.join("registered.raw").exists());
}

#[test]
fn ablation_emits_sorted_rows_and_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "ablation",
            "--seeds",
            "1,0",
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,dice,iou,acc,pre,sen,spe,hd95,asd");
    // 6 data rows sorted by (variant, seed) even though seeds were given
    // out of order, then 3 variants x 5 summary rows.
    let data: Vec<(&str, &str)> = lines[1..7]
        .iter()
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(
        data,
        vec![
            ("msssim", "0"),
            ("msssim", "1"),
            ("msssim_cscc", "0"),
            ("msssim_cscc", "1"),
            ("msssim_scc", "0"),
            ("msssim_scc", "1"),
        ]
    );
    assert_eq!(lines.len(), 1 + 6 + 15);
    assert!(lines[7].starts_with("msssim,min,"));
    let runs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("runs.json")).unwrap())
            .unwrap();
    assert!(runs
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["status"] == "ok"));
}
