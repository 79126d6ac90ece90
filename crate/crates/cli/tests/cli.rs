//! End-to-end tests of the `dlf` binary: exit codes, output files, schema
//! stability, and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlf_cli::checkpoint::{read_checkpoint, write_checkpoint};
use dlf_core::meta::{train_student, MetaConfig};
use dlf_core::student::{predict, LossSpec};
use dlf_core::teacher::{TeacherFamily, TeacherParams};
use dlf_core::Tensor;

fn dlf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dlf"))
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = dlf();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn toy_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "dataset": {"type": "blobs", "n": 80, "n_classes": 2, "dim": 2,
                     "separation": 1.5, "proportions": [0.5, 0.5],
                     "sizes": [48, 16, 16], "seed": 11},
        "student": {"hidden_sizes": [4], "init_seed": 5},
        "inner": {"t_steps": 4, "batch_size": 4, "eta": {"constant": 0.1}, "batch_seed": 9},
        "teacher": {"n_keys": 2, "steps": 2, "init_seed": 3},
        "loss": {"family": "bilinear"},
        "logging": {"out_dir": out_dir.to_str().unwrap()}
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|_| panic!("missing {}", path.display()))
        .lines()
        .map(|l| serde_json::from_str(l).expect("valid json line"))
        .collect()
}

#[test]
fn train_teacher_writes_checkpoint_metrics_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &toy_config(&out));
    let output = run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let records = read_jsonl(&out.join("metrics.jsonl"));
    assert_eq!(records.len(), 2);
    for (k, rec) in records.iter().enumerate() {
        assert_eq!(rec["step"], k);
        for key in ["dev_smoothed_metric", "dev_accuracy", "grad_norm"] {
            assert!(rec[key].is_f64(), "missing {key} in {rec}");
        }
    }
    assert!(out.join("resolved_config.json").exists());
    let teacher = read_checkpoint(&out.join("teacher.ckpt")).unwrap();
    assert_eq!(teacher.n_classes(), 2);
    assert_eq!(teacher.state_len(), 5);
}

#[test]
fn train_teacher_zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["teacher"]["steps"] = serde_json::json!(0);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]);
    assert!(output.status.success());

    assert!(read_jsonl(&out.join("metrics.jsonl")).is_empty());
    let saved = read_checkpoint(&out.join("teacher.ckpt")).unwrap();
    let init = TeacherParams::init(TeacherFamily::Full, 2, 5, 2, 3).unwrap();
    assert_eq!(saved.params().flatten(), init.params().flatten());
}

#[test]
fn rerunning_from_the_resolved_config_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &toy_config(&out));
    assert!(run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]).status.success());
    let first_metrics = std::fs::read(out.join("metrics.jsonl")).unwrap();
    let first_ckpt = std::fs::read(out.join("teacher.ckpt")).unwrap();

    let resolved = out.join("resolved_config.json");
    assert!(run(&["train-teacher", "--config", resolved.to_str().unwrap()], &[])
        .status
        .success());
    assert_eq!(first_metrics, std::fs::read(out.join("metrics.jsonl")).unwrap());
    assert_eq!(first_ckpt, std::fs::read(out.join("teacher.ckpt")).unwrap());
}

#[test]
fn dump_phi_every_writes_coefficient_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["logging"]["dump_phi_every"] = serde_json::json!(2);
    let cfg = write_config(dir.path(), &cfg_value);
    assert!(run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]).status.success());
    for t in [0, 2] {
        let path = out.join(format!("phi_step{t}.csv"));
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 2, "full family dumps a 2x2 matrix");
        assert_eq!(rows[0].split(',').count(), 2);
    }
    assert!(!out.join("phi_step1.csv").exists());
}

#[test]
fn unknown_config_key_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_value = toy_config(&dir.path().join("run"));
    cfg_value["teacher"]["unknown_knob"] = serde_json::json!(1);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("teacher"), "stderr: {stderr}");
}

#[test]
fn train_teacher_rejects_fixed_losses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_value = toy_config(&dir.path().join("run"));
    cfg_value["loss"] = serde_json::json!({"family": "cross-entropy"});
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn dlf_out_dir_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let ignored = dir.path().join("ignored");
    let actual = dir.path().join("actual");
    let cfg = write_config(dir.path(), &toy_config(&ignored));
    let output = run(
        &["train-teacher", "--config", cfg.to_str().unwrap()],
        &[("DLF_OUT_DIR", actual.to_str().unwrap())],
    );
    assert!(output.status.success());
    assert!(actual.join("teacher.ckpt").exists());
    assert!(!ignored.exists());
    // The resolved copy records the effective directory.
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(actual.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["logging"]["out_dir"], actual.to_str().unwrap());
}

#[test]
fn train_student_cross_entropy_reports_test_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["loss"] = serde_json::json!({"family": "cross-entropy"});
    cfg_value["inner"]["t_steps"] = serde_json::json!(60);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-student", "--config", cfg.to_str().unwrap()], &[]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let records = read_jsonl(&out.join("metrics.jsonl"));
    assert_eq!(records.len(), 1);
    let err = records[0]["test_error"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&err));
}

#[test]
fn train_student_smooth01_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["loss"] = serde_json::json!({"family": "smooth01", "smooth_k": 50.0});
    cfg_value["inner"]["t_steps"] = serde_json::json!(60);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-student", "--config", cfg.to_str().unwrap()], &[]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let records = read_jsonl(&out.join("metrics.jsonl"));
    assert!(records[0]["test_error"].as_f64().unwrap().is_finite());
}

#[test]
fn train_student_bilinear_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &toy_config(&dir.path().join("run")));
    let output = run(&["train-student", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("teacher_checkpoint"));
}

#[test]
fn train_student_with_momentum_baseline_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["loss"] = serde_json::json!({"family": "cross-entropy"});
    cfg_value["inner"]["momentum"] = serde_json::json!(0.9);
    cfg_value["inner"]["t_steps"] = serde_json::json!(40);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["train-student", "--config", cfg.to_str().unwrap()], &[]);
    assert!(output.status.success());
}

#[test]
fn untrained_identity_teacher_agrees_with_cross_entropy_student() {
    // Identity-initialized coefficients squash per-example gradients by a
    // positive scalar, so at matched seeds the two trained students should
    // make nearly identical hard predictions.
    let ds = dlf_core::synth_blobs(300, 2, 2, 2.0, &[0.5, 0.5], 77).unwrap();
    let (train, dev, test) = dlf_core::split(&ds, (200, 50, 50), 4).unwrap();
    let teacher = TeacherParams::init(TeacherFamily::Full, 2, 5, 2, 1).unwrap();
    // Long enough that the sigmoid-squashed gradients of the identity-Phi
    // loss also reach convergence.
    let cfg = MetaConfig {
        t_steps: 1500,
        batch_size: 8,
        eta: dlf_core::meta::EtaSchedule::Constant(0.5),
        teacher_steps: 0,
        student_hidden: vec![4],
        student_seed: 21,
        batch_seed: 22,
        train_acc_subsample: 128,
        dev_grad_subsample: None,
        vary_inner_seeds: true,
        teacher: dlf_core::meta::TeacherConfig::default(),
    };
    let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0)
        .unwrap();
    let baseline = train_student(None, &train, Some(&dev), &cfg, &LossSpec::CrossEntropy, 0.0)
        .unwrap();
    let pa = predict(&taught.forward_probs(test.inputs()).unwrap()).unwrap();
    let pb = predict(&baseline.forward_probs(test.inputs()).unwrap()).unwrap();
    let agree = pa.iter().zip(&pb).filter(|(a, b)| a == b).count() as f64 / pa.len() as f64;
    assert!(agree > 0.95, "prediction agreement {agree}");
}

#[test]
fn gradcheck_passes_on_the_toy_and_fails_on_corrupted_eta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["inner"]["t_steps"] = serde_json::json!(5);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["gradcheck", "--config", cfg.to_str().unwrap()], &[]);
    assert!(
        output.status.success(),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("cosine="), "stdout: {stdout}");
    assert!(stdout.contains("max_rel_err="), "stdout: {stdout}");

    cfg_value["gradcheck"] = serde_json::json!({"corrupt_eta_sign": true});
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["gradcheck", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn gradcheck_with_zero_steps_passes_trivially() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg_value = toy_config(&out);
    cfg_value["inner"]["t_steps"] = serde_json::json!(0);
    let cfg = write_config(dir.path(), &cfg_value);
    let output = run(&["gradcheck", "--config", cfg.to_str().unwrap()], &[]);
    assert!(output.status.success());
}

#[test]
fn dump_coefficients_uniform_attention_is_the_slice_mean() {
    let dir = tempfile::tempdir().unwrap();
    // Zero V makes attention uniform regardless of the state.
    let mut teacher = TeacherParams::init(TeacherFamily::Full, 2, 5, 3, 8).unwrap();
    let zero_v = Tensor::zeros(vec![3, 5]);
    teacher = TeacherParams::from_tensors(TeacherFamily::Full, teacher.w().clone(), zero_v).unwrap();
    let ckpt = dir.path().join("teacher.ckpt");
    write_checkpoint(&ckpt, &teacher).unwrap();

    let states = dir.path().join("states.csv");
    std::fs::write(&states, "0,0,0,0,0\n").unwrap();
    let prefix = dir.path().join("phi_state").to_str().unwrap().to_string();
    let output = run(
        &[
            "dump-coefficients",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--states",
            states.to_str().unwrap(),
            "--out-prefix",
            &prefix,
        ],
        &[],
    );
    assert!(output.status.success());

    let text = std::fs::read_to_string(format!("{prefix}0.csv")).unwrap();
    let parsed: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    for i in 0..2 {
        for j in 0..2 {
            let mean: f64 = (0..3)
                .map(|k| teacher.w().data()[(i * 2 + j) * 3 + k])
                .sum::<f64>()
                / 3.0;
            assert!((parsed[i][j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn dump_coefficients_trained_teacher_distinguishes_states() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &toy_config(&out));
    assert!(run(&["train-teacher", "--config", cfg.to_str().unwrap()], &[]).status.success());
    let ckpt = out.join("teacher.ckpt");

    let states = dir.path().join("states.csv");
    std::fs::write(&states, "0.0,0.5,0.5,0.5,0.5\n1.0,0.9,0.9,1.0,0.8\n").unwrap();
    let prefix = dir.path().join("phi").to_str().unwrap().to_string();
    let output = run(
        &[
            "dump-coefficients",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--states",
            states.to_str().unwrap(),
            "--out-prefix",
            &prefix,
        ],
        &[],
    );
    assert!(output.status.success());
    let a = std::fs::read(format!("{prefix}0.csv")).unwrap();
    let b = std::fs::read(format!("{prefix}1.csv")).unwrap();
    assert_ne!(a, b, "distinct states should give distinct coefficients");
}

#[test]
fn dump_coefficients_diagonal_checkpoint_is_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = TeacherParams::init(TeacherFamily::Diagonal, 4, 7, 2, 5).unwrap();
    let ckpt = dir.path().join("teacher.ckpt");
    write_checkpoint(&ckpt, &teacher).unwrap();
    let states = dir.path().join("states.csv");
    std::fs::write(&states, "0.5,0.5,0.5,0.5,0.5,0.5,0.5\n").unwrap();
    let prefix = dir.path().join("d").to_str().unwrap().to_string();
    let output = run(
        &[
            "dump-coefficients",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--states",
            states.to_str().unwrap(),
            "--out-prefix",
            &prefix,
        ],
        &[],
    );
    assert!(output.status.success());
    let text = std::fs::read_to_string(format!("{prefix}0.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].split(',').count(), 4);
}

#[test]
fn dump_coefficients_state_length_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = TeacherParams::init(TeacherFamily::Full, 2, 5, 2, 5).unwrap();
    let ckpt = dir.path().join("teacher.ckpt");
    write_checkpoint(&ckpt, &teacher).unwrap();
    let states = dir.path().join("states.csv");
    std::fs::write(&states, "0.5,0.5\n").unwrap();
    let output = run(
        &[
            "dump-coefficients",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--states",
            states.to_str().unwrap(),
            "--out-prefix",
            dir.path().join("x").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(output.status.code(), Some(2));
}
