mod common;

use std::process::Command;

use avih::harness::config::AblationCell;
use avih::harness::pipeline::{attack_dir, evaluation_dir, load_report, paths};
use avih::harness::{emit_report, run_pipeline, run_pipeline_to, Goal, StageStatus};

#[test]
fn tiny_pipeline_caches_reports_and_isolates_the_attack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path().join("run"));
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.complete);
    assert!(
        first.stages.iter().all(|s| s.status == StageStatus::Ok),
        "{:?}",
        first.stages
    );
    assert!(first.recomputed > 0);
    let root = cfg.output_dir.canonicalize().unwrap();
    first.verify(&root).unwrap();

    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.recomputed, 0);
    assert!(second.stages.iter().all(|s| s.cache_hit));
    assert_eq!(first.stages.len(), second.stages.len());

    let seed = cfg.seeds.attack;
    let report = load_report(&root, &evaluation_dir(seed, 0.5, AblationCell::FULL)).unwrap();
    assert_eq!(report.per_image.len(), 6);
    for s in second
        .stages
        .iter()
        .filter(|s| s.name.starts_with("attack:"))
    {
        assert!(!s.reads.is_empty());
        for r in &s.reads {
            assert!(
                r != paths::KEY_MODEL && !r.starts_with(&paths::dataset("gallery")),
                "{r}"
            );
        }
    }

    // One fraction: original, encrypted, key recovery and one attack row.
    let grid = image::open(root.join("report/grid.png")).unwrap();
    assert_eq!(grid.height(), 4 * (16 + 2) + 2);
    let plot = std::fs::read_to_string(root.join("report/plot.csv")).unwrap();
    let xs: Vec<f64> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(xs, cfg.fractions);
    let per_image = std::fs::read_to_string(root.join("report/per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count() - 1, 6 * 4);

    // Missing artifacts become absent cells instead of errors.
    std::fs::remove_file(
        root.join(attack_dir(seed, 0.5, AblationCell::FULL))
            .join("recon_eval.npy"),
    )
    .unwrap();
    std::fs::remove_dir_all(root.join(evaluation_dir(seed, 0.5, AblationCell::FULL))).unwrap();
    emit_report(&root).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["absent"].as_array().unwrap().len(), 1);
}

#[test]
fn changed_attack_config_only_recomputes_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path().join("run"));
    run_pipeline_to(&cfg, Goal::Encrypt).unwrap();
    let mut changed = cfg.clone();
    changed.attack.steps = 3;
    let m = run_pipeline_to(&changed, Goal::Attack).unwrap();
    let recomputed: Vec<&str> = m
        .stages
        .iter()
        .filter(|s| !s.cache_hit)
        .map(|s| s.name.as_str())
        .collect();
    assert!(
        recomputed.iter().all(|n| n.starts_with("attack:")),
        "{recomputed:?}"
    );
    assert!(!m.complete);
}

#[test]
fn cli_reports_errors_as_json() {
    let out = Command::new(env!("CARGO_BIN_EXE_avih"))
        .args(["pipeline", "--fraction", "1.5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(
        out.stderr
            .split(|&b| b == b'\n')
            .rev()
            .find(|l| !l.is_empty())
            .unwrap(),
    )
    .unwrap();
    assert_eq!(err["error"], "contract");
}

#[test]
fn cli_generates_data_under_the_environment_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string(&common::tiny_config("unused".into())).unwrap(),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_avih"))
        .args([
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed.data",
            "9",
        ])
        .env("AVIH_OUTPUT_ROOT", dir.path().join("envroot"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let root = dir.path().join("envroot");
    assert!(root
        .join(paths::dataset("gallery"))
        .join("images.npy")
        .exists());
    assert!(root
        .join(paths::dataset("gallery"))
        .join("png/id0000/000.png")
        .exists());
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seeds"]["data"], 9);
}
