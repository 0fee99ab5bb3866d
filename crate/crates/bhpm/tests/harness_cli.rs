//! CLI and harness contracts that don't need long training runs: exit
//! codes, strict configs, metric formats, idempotence, and the
//! ground-truth-operator oracle.

use bhpm::gproot::{GpHyperparams, InducingState};
use bhpm::harness;
use bhpm::model::{eval_root, BhpmModel};
use bhpm::specgen::{etdrk4_solve, make_root_testset, sample_initial_condition, Domain, Equation};
use ndarray::{Array1, Array2};
use std::path::Path;
use std::process::Command;

fn bhpm_bin() -> &'static str {
    env!("CARGO_BIN_EXE_bhpm")
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(bhpm_bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn validation_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let s = out.display().to_string();

    // unknown profile
    let (code, err) = run(&["train", "--data", "/nope", "--profile", "gpu", "--out", &s]);
    assert_eq!(code, 2, "stderr: {err}");

    // unknown equation
    let (code, _) = run(&["generate", "--equation", "navier", "--out", &s]);
    assert_eq!(code, 2);

    // bad sweep axis
    let (code, _) = run(&[
        "sweep", "--equation", "heat", "--varied", "lr", "--values", "1", "--out", &s,
    ]);
    assert_eq!(code, 2);

    // predict with --model but no --ic
    let (code, _) = run(&["predict", "--model", "/nope", "--out", &s]);
    assert_eq!(code, 2);

    // clap-level parse failure also exits 2
    let (code, _) = run(&["train", "--no-such-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("o").display().to_string();
    // data directory exists but has no solves
    let (code, _) = run(&["train", "--data", &tmp.path().display().to_string(), "--out", &s]);
    assert!(code == 1 || code == 2);
    // missing model directory is a runtime (io) failure
    let (code, _) = run(&[
        "eval-root", "--model", &tmp.path().join("nope").display().to_string(),
        "--test-data", &tmp.path().display().to_string(), "--out", &s,
    ]);
    assert_eq!(code, 1);
}

#[test]
fn strict_config_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"leaf_iters": 10, "warp_factor": 9}"#).unwrap();
    let data = tmp.path().join("data");
    small_heat_data(&data, 2);
    let (code, err) = run(&[
        "train", "--data", &data.display().to_string(), "--n", "1",
        "--config", &cfg.display().to_string(),
        "--out", &tmp.path().join("m").display().to_string(),
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("warp_factor"), "stderr: {err}");
}

/// Two short heat solves written as solve dirs, small enough for tests.
fn small_heat_data(dir: &Path, n: usize) {
    let domain = Domain {
        l_x: 16.0,
        l_t: 0.5,
        n_s: 128,
        dt: 1e-3,
        n_save: 26,
    };
    for i in 0..n {
        let u0 = sample_initial_condition(&domain, 900 + i as u64).unwrap();
        let field = etdrk4_solve(Equation::Heat, &domain, &u0).unwrap();
        harness::write_field(&dir.join(format!("solve_{i}")), &field, 900 + i as u64).unwrap();
    }
}

/// A stub model whose root is exactly the heat operator: amplitude ~0 so
/// the GP collapses onto its linear mean 0.1 * u_xx.
fn ground_truth_heat_model() -> BhpmModel {
    BhpmModel {
        leaves: vec![],
        hyper: GpHyperparams {
            log_amplitude: 1e-9f64.ln(),
            log_lengthscales: vec![0.0; 3],
            mean_weights: vec![0.0, 0.0, 0.1],
            mean_bias: 0.0,
            log_noise_sd: 1e-9f64.ln(),
        },
        inducing: InducingState {
            v_u: Array2::zeros((1, 3)),
            q_mean: Array1::zeros(1),
            q_chol: Array2::from_elem((1, 1), 1e-12),
        },
        k: 2,
    }
}

#[test]
fn ground_truth_operator_scores_near_zero_rmse() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_heat_data(&data, 2);
    let fields: Vec<_> = harness::list_solve_dirs(&data)
        .unwrap()
        .iter()
        .map(|d| harness::load_field(d).unwrap())
        .collect();
    let testset = make_root_testset(&fields, 2, 512, 7).unwrap();
    let metrics = eval_root(&ground_truth_heat_model(), &testset).unwrap();
    assert!(
        metrics.rmse < 1e-6,
        "ground-truth operator rmse {} not ~0",
        metrics.rmse
    );
}

#[test]
fn eval_root_is_idempotent_and_well_formed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_heat_data(&data, 2);
    let model_dir = tmp.path().join("model");
    bhpm::model::save_model(&ground_truth_heat_model(), &model_dir).unwrap();
    std::fs::write(
        model_dir.join("train_meta.json"),
        serde_json::to_string(&harness::TrainMeta {
            equation: "heat".into(),
            k: 2,
            n: 2,
            n_st: 512,
            epsilon: 0.0,
            seed: 0,
        })
        .unwrap(),
    )
    .unwrap();
    let run_eval = |out: &Path| {
        harness::cmd_eval_root(&model_dir, &data, 256, 11, out).unwrap();
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let a = run_eval(&tmp.path().join("e1"));
    let b = run_eval(&tmp.path().join("e2"));
    assert_eq!(a, b, "eval-root not idempotent");
    let header = a.lines().next().unwrap().trim_end_matches('\r');
    assert_eq!(header, "model_id,equation,N,n_st,epsilon,seed,rmse,mnlp");
    assert_eq!(a.lines().count(), 2);
}

#[test]
fn predict_requires_consistent_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let err = harness::cmd_predict(
        &harness::PredictArgs {
            model: Some(tmp.path().join("m")),
            ic: None,
            delta_c: 1e-3,
            n_members: 2,
            n_grid: 16,
            seed: 0,
            profile: harness::Profile::Desk,
            jobs: 1,
            ladder: None,
        },
        &tmp.path().join("o"),
    );
    assert!(err.is_err());
}

#[test]
fn every_output_dir_has_exactly_one_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    harness::cmd_generate("heat", 1, 3, &data).unwrap();
    let manifests = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "run_manifest.json")
        .count();
    assert_eq!(manifests, 1);
    let m = harness::RunManifest::read(&data.join("run_manifest.json")).unwrap();
    assert_eq!(m.command, "generate");
    assert!(!m.input_hashes.is_empty());
    assert_eq!(m.seeds, vec![3]);
}
