//! Experiment configuration: a single JSON document with one block per
//! subsystem. Unknown keys are rejected and every field is validated before
//! any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dlf_core::meta::{EtaSchedule, MetaConfig, TeacherConfig};
use dlf_core::student::LossSpec;
use dlf_core::teacher::AdamHyper;
use dlf_core::{split, synth_blobs, Dataset};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub student: StudentConfig,
    pub inner: InnerConfig,
    pub teacher: TeacherBlock,
    pub loss: LossConfig,
    pub logging: LoggingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        n: usize,
        n_classes: usize,
        dim: usize,
        separation: f64,
        proportions: Vec<f64>,
        /// (train, dev, test) sizes drawn disjointly from the generated set.
        sizes: (usize, usize, usize),
        seed: u64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        sizes: (usize, usize, usize),
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden_sizes: Vec<usize>,
    pub init_seed: u64,
}

fn default_train_acc_subsample() -> usize {
    512
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub t_steps: usize,
    pub batch_size: usize,
    pub eta: EtaConfig,
    pub batch_seed: u64,
    /// Momentum for the non-differentiated student-training path only.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_train_acc_subsample")]
    pub train_acc_subsample: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_grad_subsample: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EtaConfig {
    Constant(f64),
    Piecewise(Vec<(usize, f64)>),
}

impl EtaConfig {
    pub fn to_schedule(&self) -> EtaSchedule {
        match self {
            EtaConfig::Constant(e) => EtaSchedule::Constant(*e),
            EtaConfig::Piecewise(v) => EtaSchedule::Piecewise(v.clone()),
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_alpha() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TeacherBlock {
    pub n_keys: usize,
    pub steps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub init_seed: u64,
    /// Re-derive the student init and batching seeds at every teacher step.
    #[serde(default = "default_true")]
    pub vary_inner_seeds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub family: LossFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth_k: Option<f64>,
    /// Teacher checkpoint consumed by `train-student` for the
    /// teacher-driven families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    Bilinear,
    Diagonal,
    CrossEntropy,
    Smooth01,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    pub out_dir: PathBuf,
    /// Dump the coefficients of the final run every this many inner steps;
    /// zero disables dumping.
    #[serde(default)]
    pub dump_phi_every: usize,
}

fn default_gc_epsilon() -> f64 {
    1e-3
}
fn default_gc_cosine() -> f64 {
    0.999
}
fn default_gc_rel() -> f64 {
    1e-3
}
fn default_gc_floor() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_gc_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_gc_cosine")]
    pub min_cosine: f64,
    #[serde(default = "default_gc_rel")]
    pub max_rel_err: f64,
    /// Coordinates below this magnitude are excluded from the per-coordinate
    /// relative-error comparison.
    #[serde(default = "default_gc_floor")]
    pub coord_floor: f64,
    /// Negative control: run the reverse sweep on a trajectory whose
    /// recorded learning rates have flipped signs. A correct checker must
    /// then fail.
    #[serde(default)]
    pub corrupt_eta_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            epsilon: default_gc_epsilon(),
            min_cosine: default_gc_cosine(),
            max_rel_err: default_gc_rel(),
            coord_floor: default_gc_floor(),
            corrupt_eta_sign: false,
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Parse errors carry the JSON field
    /// path of the offending key.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Blobs {
                n,
                n_classes,
                dim,
                proportions,
                sizes,
                separation,
                ..
            } => {
                if *n_classes < 2 {
                    return Err(CliError::config("dataset.n_classes", "need at least 2 classes"));
                }
                if *dim == 0 {
                    return Err(CliError::config("dataset.dim", "must be positive"));
                }
                if !separation.is_finite() || *separation < 0.0 {
                    return Err(CliError::config("dataset.separation", "must be a nonnegative number"));
                }
                if proportions.len() != *n_classes {
                    return Err(CliError::config(
                        "dataset.proportions",
                        format!("{} entries for {} classes", proportions.len(), n_classes),
                    ));
                }
                if (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    || proportions.iter().any(|p| *p < 0.0)
                {
                    return Err(CliError::config(
                        "dataset.proportions",
                        "must be nonnegative and sum to 1",
                    ));
                }
                if sizes.0 + sizes.1 + sizes.2 > *n {
                    return Err(CliError::config("dataset.sizes", "sizes exceed n"));
                }
                if sizes.0 == 0 {
                    return Err(CliError::config("dataset.sizes", "train split is empty"));
                }
            }
            DatasetConfig::Mnist { sizes, .. } => {
                if sizes.0 == 0 {
                    return Err(CliError::config("dataset.sizes", "train split is empty"));
                }
            }
        }
        if self.inner.batch_size == 0 {
            return Err(CliError::config("inner.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.inner.momentum) {
            return Err(CliError::config("inner.momentum", "must lie in [0, 1)"));
        }
        if self.inner.train_acc_subsample == 0 {
            return Err(CliError::config("inner.train_acc_subsample", "must be positive"));
        }
        if self.inner.dev_grad_subsample == Some(0) {
            return Err(CliError::config("inner.dev_grad_subsample", "must be positive when set"));
        }
        match &self.inner.eta {
            EtaConfig::Constant(e) if !e.is_finite() || *e < 0.0 => {
                return Err(CliError::config("inner.eta", "must be a nonnegative number"));
            }
            EtaConfig::Piecewise(entries) => {
                if entries.is_empty() || entries[0].0 != 0 {
                    return Err(CliError::config("inner.eta", "piecewise schedule must start at step 0"));
                }
                if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(CliError::config("inner.eta", "piecewise steps must strictly increase"));
                }
                if entries.iter().any(|(_, e)| !e.is_finite() || *e < 0.0) {
                    return Err(CliError::config("inner.eta", "eta values must be nonnegative"));
                }
            }
            _ => {}
        }
        if self.teacher.n_keys == 0 {
            return Err(CliError::config("teacher.n_keys", "must be positive"));
        }
        for (name, v) in [
            ("teacher.alpha", self.teacher.alpha),
            ("teacher.epsilon", self.teacher.epsilon),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(CliError::config(name, "must be a positive number"));
            }
        }
        for (name, v) in [("teacher.beta1", self.teacher.beta1), ("teacher.beta2", self.teacher.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(CliError::config(name, "must lie in [0, 1)"));
            }
        }
        match (self.loss.family, self.loss.smooth_k) {
            (LossFamily::Smooth01, None) => {
                return Err(CliError::config("loss.smooth_k", "required for the smooth01 family"));
            }
            (LossFamily::Smooth01, Some(k)) if !(k > 0.0) => {
                return Err(CliError::config("loss.smooth_k", "must be positive"));
            }
            (f, Some(_)) if f != LossFamily::Smooth01 => {
                return Err(CliError::config(
                    "loss.smooth_k",
                    "only valid for the smooth01 family",
                ));
            }
            _ => {}
        }
        if let Some(gc) = &self.gradcheck {
            if !(gc.epsilon > 0.0) {
                return Err(CliError::config("gradcheck.epsilon", "must be positive"));
            }
            if !(gc.max_rel_err > 0.0) {
                return Err(CliError::config("gradcheck.max_rel_err", "must be positive"));
            }
            if !(-1.0..=1.0).contains(&gc.min_cosine) {
                return Err(CliError::config("gradcheck.min_cosine", "must lie in [-1, 1]"));
            }
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.family {
            LossFamily::Bilinear => LossSpec::Bilinear,
            LossFamily::Diagonal => LossSpec::Diagonal,
            LossFamily::CrossEntropy => LossSpec::CrossEntropy,
            LossFamily::Smooth01 => LossSpec::Smooth01 {
                k: self.loss.smooth_k.expect("validated"),
            },
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            t_steps: self.inner.t_steps,
            batch_size: self.inner.batch_size,
            eta: self.inner.eta.to_schedule(),
            teacher_steps: self.teacher.steps,
            student_hidden: self.student.hidden_sizes.clone(),
            student_seed: self.student.init_seed,
            batch_seed: self.inner.batch_seed,
            train_acc_subsample: self.inner.train_acc_subsample,
            dev_grad_subsample: self.inner.dev_grad_subsample,
            vary_inner_seeds: self.teacher.vary_inner_seeds,
            teacher: TeacherConfig {
                n_keys: self.teacher.n_keys,
                init_seed: self.teacher.init_seed,
                adam: AdamHyper {
                    alpha: self.teacher.alpha,
                    beta1: self.teacher.beta1,
                    beta2: self.teacher.beta2,
                    epsilon: self.teacher.epsilon,
                },
            },
        }
    }

    /// Materializes the train/dev/test splits this config describes.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Blobs {
                n,
                n_classes,
                dim,
                separation,
                proportions,
                sizes,
                seed,
            } => {
                let ds = synth_blobs(*n, *n_classes, *dim, *separation, proportions, *seed)?;
                // Separate stream for the split so it is independent of the
                // draws the generator consumed.
                Ok(split(&ds, *sizes, dlf_core::meta::derive_seed(*seed, 1))?)
            }
            DatasetConfig::Mnist {
                images,
                labels,
                sizes,
                seed,
            } => {
                let ds = dlf_core::load_mnist_idx(images, labels)?;
                if sizes.0 + sizes.1 + sizes.2 > ds.len() {
                    return Err(CliError::config(
                        "dataset.sizes",
                        format!("sizes exceed the {} available examples", ds.len()),
                    ));
                }
                Ok(split(&ds, *sizes, *seed)?)
            }
        }
    }

    /// Effective output directory: `DLF_OUT_DIR` overrides the config value.
    pub fn effective_out_dir(&self) -> PathBuf {
        match std::env::var_os("DLF_OUT_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.logging.out_dir.clone(),
        }
    }

    /// The config with all defaults filled and the effective output
    /// directory resolved, as written beside every run's outputs.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.logging.out_dir = self.effective_out_dir();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "dataset": {"type": "blobs", "n": 40, "n_classes": 2, "dim": 2,
                         "separation": 1.0, "proportions": [0.5, 0.5],
                         "sizes": [20, 10, 10], "seed": 1},
            "student": {"hidden_sizes": [4], "init_seed": 2},
            "inner": {"t_steps": 3, "batch_size": 4, "eta": {"constant": 0.1}, "batch_seed": 3},
            "teacher": {"n_keys": 2, "steps": 1, "init_seed": 4},
            "loss": {"family": "bilinear"},
            "logging": {"out_dir": "/tmp/x"}
        })
    }

    fn load_value(v: serde_json::Value) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        RunConfig::load(&path)
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = load_value(minimal_json()).unwrap();
        assert_eq!(cfg.inner.train_acc_subsample, 512);
        assert_eq!(cfg.teacher.beta1, 0.9);
        assert!(cfg.teacher.vary_inner_seeds);
        assert_eq!(cfg.inner.momentum, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let mut v = minimal_json();
        v["inner"]["typo_key"] = serde_json::json!(1);
        match load_value(v) {
            Err(CliError::Config { path, .. }) => assert!(path.contains("inner"), "path: {path}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn smooth_k_is_tied_to_the_smooth01_family() {
        let mut v = minimal_json();
        v["loss"] = serde_json::json!({"family": "smooth01"});
        assert!(matches!(load_value(v), Err(CliError::Config { path, .. }) if path == "loss.smooth_k"));

        let mut v = minimal_json();
        v["loss"] = serde_json::json!({"family": "cross-entropy", "smooth_k": 50.0});
        assert!(load_value(v).is_err());

        let mut v = minimal_json();
        v["loss"] = serde_json::json!({"family": "smooth01", "smooth_k": 50.0});
        assert!(load_value(v).is_ok());
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let mut v = minimal_json();
        v["dataset"]["proportions"] = serde_json::json!([0.9, 0.9]);
        assert!(matches!(
            load_value(v),
            Err(CliError::Config { path, .. }) if path == "dataset.proportions"
        ));
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = load_value(minimal_json()).unwrap();
        let text = serde_json::to_string_pretty(&cfg.resolved()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg.resolved());
    }
}
