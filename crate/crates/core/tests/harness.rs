mod common;

use std::path::Path;
use std::process::Command;

use risloc::channel::PilotParams;
use risloc::config::{ExperimentConfig, Method};
use risloc::dataset::sample_episode;
use risloc::error::Error;
use risloc::experiment::{
    load_active, run_experiment, sweep_frames, Manifest, ResultTable, RunDir, RunLock, Stage,
};
use risloc::radiomap::{compute_radiomap, export_radiomap, RadioMap};
use risloc::scene::{GridSpec, PathlossModel, Scene};
use risloc::training::LossKind;

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn paper_profile_has_the_reference_scene() {
    let cfg = ExperimentConfig::load(configs_dir().join("paper.toml")).unwrap();
    let s = &cfg.scene;
    assert_eq!(s.bs_position, [40.0, -40.0, -10.0]);
    assert_eq!(s.ris_position, [0.0, 0.0, 0.0]);
    assert_eq!((s.ris_rows, s.ris_cols), (8, 8));
    assert_eq!(s.ue_region.center, [20.0, 0.0, -20.0]);
    assert_eq!(s.ue_region.half_extent, [15.0, 35.0, 0.0]);
    assert_eq!(s.rician_factor, 10.0);
    assert_eq!(s.spacing_factor, 1.0);
    assert_eq!(cfg.training.samples(), 2_048_000);
    assert_eq!(cfg.pilot.frames, 6);
}

#[test]
fn shipped_profiles_load_and_round_trip() {
    for name in ["desk.toml", "paper.toml", "paper_t14.toml"] {
        let cfg = ExperimentConfig::load(configs_dir().join(name)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.toml");
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg, "{name}");
    }
    let desk = ExperimentConfig::load(configs_dir().join("desk.toml")).unwrap();
    let mut want = ExperimentConfig::desk();
    want.output_dir = desk.output_dir.clone();
    assert_eq!(desk, want);
    let t14 = ExperimentConfig::load(configs_dir().join("paper_t14.toml")).unwrap();
    assert_eq!(
        (t14.pilot.frames, t14.training.loss),
        (14, LossKind::Average)
    );
}

#[test]
fn missing_required_key_is_named() {
    let text = std::fs::read_to_string(configs_dir().join("desk.toml")).unwrap();
    let without: String = text
        .lines()
        .filter(|l| !l.starts_with("eval ="))
        .collect::<Vec<_>>()
        .join("\n");
    match ExperimentConfig::from_toml_str(&without) {
        Err(Error::MissingKey(k)) => assert_eq!(k, "eval"),
        other => panic!("{other:?}"),
    }
}

/// Direct path blocked and flat reflected pathloss, so RSS differences come
/// from the array factor alone.
fn beam_only_scene() -> Scene {
    let mut scene = Scene::reference();
    scene.pathloss_direct = PathlossModel { a: 400.0, b: 0.0 };
    scene.pathloss_reflected = PathlossModel { a: 0.0, b: 0.0 };
    scene
}

#[test]
fn matched_beam_puts_the_ue_cell_at_the_maximum() {
    let scene = beam_only_scene();
    let pilot = PilotParams::new(0.0, 1);
    let grid = GridSpec::over_region(&scene.ue_region, 1.0).unwrap();
    for (ix, iy) in [(3, 10), (15, 35), (27, 64)] {
        let ue = grid.center(ix, iy);
        let theta = common::matched_theta(&scene, ue);
        let map = compute_radiomap(&scene, &pilot, &[theta], ue, grid).unwrap();
        let max = map.frames[0]
            .iter()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b));
        assert_eq!(map.ue_rss(0), max, "cell ({ix}, {iy})");
        assert_eq!(map.outshine_fraction(0), 0.0);
    }
}

#[test]
fn radiomap_export_files_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let run = RunDir::new(dir.path());
    let mut only_active = cfg.clone();
    only_active.methods = vec![Method::Active];
    risloc::experiment::train_all(&only_active, &run).unwrap();
    let weights = load_active(&cfg, &run, 20.0).unwrap();
    let ep = sample_episode(&cfg.scene, 2, cfg.seeds.eval, 0).unwrap();
    let grid = GridSpec::over_region(&cfg.scene.ue_region, 1.0).unwrap();
    assert_eq!((grid.nx, grid.ny), (30, 70));
    let map = export_radiomap(&cfg.scene, &cfg.pilot.pilot(20.0), &weights, &ep, grid).unwrap();
    assert!(map.frames.iter().flatten().flatten().all(|v| *v >= 0.0));
    let out = dir.path().join("rm");
    map.write(&out).unwrap();
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 2 + 1);
    assert_eq!(RadioMap::read(&out).unwrap(), map);
}

#[test]
fn every_method_runs_and_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for dir in [a.path(), b.path()] {
        let mut cfg = common::tiny_config(dir);
        cfg.pilot.snr_db = vec![0.0, 10.0, 20.0];
        let table = run_experiment(&cfg, &RunDir::new(dir), Stage::TrainAndEvaluate).unwrap();
        for m in &cfg.methods {
            assert_eq!(
                table.rows.iter().filter(|r| r.method == m.name()).count(),
                3
            );
        }
        assert!(table
            .rows
            .iter()
            .all(|r| r.episodes == 12 && r.mse_m2 >= 0.0));
        let path = RunDir::new(dir).table("results");
        table.write_csv(&path).unwrap();
        assert_eq!(ResultTable::read_csv(&path).unwrap(), table);
        csv.push(std::fs::read(&path).unwrap());

        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(RunDir::new(dir).manifest()).unwrap())
                .unwrap();
        assert_eq!(manifest.test_episodes, 12);
        assert_eq!(manifest.checkpoints.len(), 4 * 3);
    }
    assert_eq!(csv[0], csv[1]);
}

#[test]
fn frame_sweep_last_row_matches_the_full_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.pilot.frames = 3;
    cfg.methods = vec![Method::Active];
    cfg.training.loss = LossKind::Average;
    let run = RunDir::new(dir.path());
    let full = run_experiment(&cfg, &run, Stage::TrainAndEvaluate).unwrap();
    let sweep = sweep_frames(&cfg, &run).unwrap();
    assert_eq!(sweep.rows.len(), 3);
    assert_eq!(
        sweep.rows.iter().map(|r| r.frames).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    let (x, y) = (&sweep.rows[2], &full.rows[0]);
    assert!((x.mse_m2 - y.mse_m2).abs() <= 1e-12);
    assert!((x.median_err_m - y.median_err_m).abs() <= 1e-12);
}

#[test]
fn evaluation_without_checkpoints_fails_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    match run_experiment(&cfg, &RunDir::new(dir.path()), Stage::EvaluateOnly) {
        Err(Error::MissingCheckpoint(p)) => assert!(p.starts_with(dir.path())),
        other => panic!("{other:?}"),
    }
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let _held = RunLock::acquire(dir.path()).unwrap();
    assert!(matches!(
        run_experiment(&cfg, &RunDir::new(dir.path()), Stage::TrainAndEvaluate),
        Err(Error::Locked(_))
    ));
}

#[test]
fn cli_evaluate_reports_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(&dir.path().join("run"));
    let cfg_path = dir.path().join("tiny.toml");
    cfg.save(&cfg_path).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_risloc"))
        .args(["evaluate", "--config"])
        .arg(&cfg_path)
        .args(["--method", "static-random"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("static-random_snr20.ckpt"), "{err}");
    assert!(dir.path().join("run/config.resolved.toml").exists());
}

#[test]
fn cli_grad_check_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_risloc"))
        .arg("grad-check")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 2);
}
