//! The four CLI commands.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use dlf_core::meta::{fd_oracle, inner_train, rmd_hypergradient, train_student, train_teacher, TrajectoryRecord};
use dlf_core::student::{accuracy, predict, LossCoefficients};
use dlf_core::teacher::{StateVector, TeacherParams};
use dlf_core::{ParamVector, Tensor};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{GradcheckConfig, LossFamily, RunConfig};
use crate::error::{CliError, Result};

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.effective_out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    let resolved = serde_json::to_string_pretty(&cfg.resolved())
        .expect("config serializes");
    let path = dir.join("resolved_config.json");
    std::fs::write(&path, resolved).map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(dir)
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    for record in records {
        writeln!(file, "{record}").map_err(|e| CliError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn write_phi_csv(path: &Path, phi: &LossCoefficients) -> Result<()> {
    let io_err = |e| CliError::io(path.display().to_string(), e);
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    let rows: Vec<&[f64]> = match phi {
        LossCoefficients::Full(m) => {
            let c = m.shape()[1];
            m.data().chunks(c).collect()
        }
        LossCoefficients::Diagonal(d) => vec![d.data()],
    };
    for row in rows {
        let line = row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Percent error rate with two decimals, matching the reporting format.
fn error_rate_percent(acc: f64) -> f64 {
    ((1.0 - acc) * 100.0 * 100.0).round() / 100.0
}

fn teacher_for_config(cfg: &RunConfig, n_classes: usize) -> Result<TeacherParams> {
    let family = match cfg.loss.family {
        LossFamily::Bilinear => dlf_core::teacher::TeacherFamily::Full,
        LossFamily::Diagonal => dlf_core::teacher::TeacherFamily::Diagonal,
        _ => {
            return Err(CliError::config(
                "loss.family",
                "this command needs a teacher-driven loss (bilinear or diagonal)",
            ))
        }
    };
    Ok(TeacherParams::init(
        family,
        n_classes,
        3 + n_classes,
        cfg.teacher.n_keys,
        cfg.teacher.init_seed,
    )?)
}

pub fn cmd_train_teacher(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    if !matches!(cfg.loss.family, LossFamily::Bilinear | LossFamily::Diagonal) {
        return Err(CliError::config(
            "loss.family",
            "train-teacher needs a teacher-driven loss (bilinear or diagonal)",
        ));
    }
    let (train, dev, _test) = cfg.build_datasets()?;
    let meta = cfg.meta_config();
    let loss = cfg.loss_spec();
    let out_dir = prepare_out_dir(&cfg)?;

    let (teacher, history) = train_teacher(&meta, &train, &dev, &loss)?;
    write_checkpoint(&out_dir.join("teacher.ckpt"), &teacher)?;

    let records: Vec<serde_json::Value> = history
        .iter()
        .map(|r| {
            json!({
                "step": r.step,
                "dev_smoothed_metric": r.dev_smoothed_metric,
                "dev_accuracy": r.dev_accuracy,
                "grad_norm": r.grad_norm,
            })
        })
        .collect();
    write_jsonl(&out_dir.join("metrics.jsonl"), &records)?;

    if cfg.logging.dump_phi_every > 0 {
        // One more student run under the final teacher, dumping coefficients.
        let (_, traj) = inner_train(&teacher, &train, &dev, &meta, &loss)?;
        for t in 0..traj.t_steps() {
            if t % cfg.logging.dump_phi_every == 0 {
                let phi = teacher.forward(traj.state(t))?;
                write_phi_csv(&out_dir.join(format!("phi_step{t}.csv")), &phi)?;
            }
        }
    }
    println!(
        "trained teacher for {} steps; outputs in {}",
        history.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_train_student(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let (train, dev, test) = cfg.build_datasets()?;
    if test.is_empty() {
        return Err(CliError::config(
            "dataset.sizes",
            "train-student reports test error and needs a nonempty test split",
        ));
    }
    let loss = cfg.loss_spec();
    let teacher = if loss.teacher_driven() {
        let path = cfg.loss.teacher_checkpoint.as_ref().ok_or_else(|| {
            CliError::config(
                "loss.teacher_checkpoint",
                "required for bilinear/diagonal student training",
            )
        })?;
        Some(read_checkpoint(path)?)
    } else {
        None
    };
    let meta = cfg.meta_config();
    let out_dir = prepare_out_dir(&cfg)?;

    let dev_opt = if dev.is_empty() { None } else { Some(&dev) };
    let student = train_student(
        teacher.as_ref(),
        &train,
        dev_opt,
        &meta,
        &loss,
        cfg.inner.momentum,
    )?;

    let preds = predict(&student.forward_probs(test.inputs())?)?;
    let test_error = error_rate_percent(accuracy(&preds, test.labels())?);
    write_jsonl(
        &out_dir.join("metrics.jsonl"),
        &[json!({ "test_error": test_error })],
    )?;
    println!("test_error: {test_error:.2}%");
    Ok(())
}

fn cosine_or_unit(a: &ParamVector, b: &ParamVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b).expect("same structure") / (na * nb)
}

fn max_coord_rel_err(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

pub fn cmd_gradcheck(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let gc = cfg.gradcheck.clone().unwrap_or_else(GradcheckConfig::default);
    let (train, dev, _) = cfg.build_datasets()?;
    let teacher = teacher_for_config(&cfg, train.n_classes())?;
    if teacher.params().total_len() > 512 {
        return Err(CliError::config(
            "teacher.n_keys",
            format!(
                "oracle enumerates every coordinate; {} parameters exceed the 512 limit",
                teacher.params().total_len()
            ),
        ));
    }
    let meta = cfg.meta_config();
    let loss = cfg.loss_spec();

    let (_, traj) = inner_train(&teacher, &train, &dev, &meta, &loss)?;
    let traj = if gc.corrupt_eta_sign {
        let t = traj.t_steps();
        TrajectoryRecord::from_parts(
            (0..=t).map(|i| traj.omega(i).clone()).collect(),
            (0..t).map(|i| traj.state(i).clone()).collect(),
            (0..t).map(|i| traj.batch(i).to_vec()).collect(),
            (0..t).map(|i| -traj.eta(i)).collect(),
        )?
    } else {
        traj
    };
    let rmd = rmd_hypergradient(&teacher, &traj, &train, &dev)?;
    let fd = fd_oracle(&teacher, &meta, &train, &dev, gc.epsilon)?;

    let cosine = cosine_or_unit(&rmd, &fd);
    let rel = max_coord_rel_err(&rmd, &fd, gc.coord_floor);
    println!(
        "gradcheck: max_rel_err={rel:.6e} cosine={cosine:.8} (limits: rel<{:.1e}, cos>{})",
        gc.max_rel_err, gc.min_cosine
    );
    if rel < gc.max_rel_err && cosine > gc.min_cosine {
        Ok(())
    } else {
        Err(CliError::Tolerance {
            max_rel_err: rel,
            rel_limit: gc.max_rel_err,
            cosine,
            cos_limit: gc.min_cosine,
        })
    }
}

pub fn cmd_dump_coefficients(checkpoint: &Path, states_path: &Path, out_prefix: &str) -> Result<()> {
    let teacher = read_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(states_path)
        .map_err(|e| CliError::io(states_path.display().to_string(), e))?;
    let mut written = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| {
                    CliError::config(
                        format!("states line {}", line_no + 1),
                        format!("bad number {tok:?}: {e}"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != teacher.state_len() {
            return Err(CliError::config(
                format!("states line {}", line_no + 1),
                format!(
                    "state has {} features, checkpoint expects {}",
                    values.len(),
                    teacher.state_len()
                ),
            ));
        }
        let n = values.len();
        let state = StateVector::new(Tensor::from_vec(vec![n], values)?)
            .map_err(|e| CliError::config(format!("states line {}", line_no + 1), e.to_string()))?;
        let phi = teacher.forward(&state)?;
        let out = PathBuf::from(format!("{out_prefix}{written}.csv"));
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::io(parent.display().to_string(), e))?;
            }
        }
        write_phi_csv(&out, &phi)?;
        written += 1;
    }
    println!("wrote {written} coefficient files with prefix {out_prefix}");
    Ok(())
}
