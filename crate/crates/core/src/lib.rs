//! Dynamic loss-function teaching.
//!
//! A teacher network maps the training status of a student classifier to
//! time-varying loss coefficients; the teacher itself is trained by
//! reverse-mode differentiation through the student's entire SGD trajectory
//! against a smoothed dev-set metric.
//!
//! Crate layout:
//! - [`tensor`] / [`param`]: dense `f64` tensors and named parameter vectors;
//! - [`autodiff`]: the double-backward reverse-mode engine (`grad`, `hvp`,
//!   `hvp_cross`);
//! - [`student`]: the MLP student and the four loss families;
//! - [`teacher`]: state featurization, the attention teacher, Adam;
//! - [`meta`]: inner training, trajectory records, the reverse-mode
//!   hypergradient, the finite-difference oracle, teacher training;
//! - [`data`]: IDX files, synthetic blobs, splits, batch schedules.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod meta;
pub mod param;
pub mod student;
pub mod teacher;
pub mod tensor;

pub use autodiff::{grad, grad_pair, hvp, hvp_cross, hvp_pair, Graph, ScalarFunction, ScalarFunction2, Var};
pub use data::{load_mnist_idx, make_schedule, split, synth_blobs, BatchSchedule, Dataset};
pub use error::{DlfError, Result};
pub use meta::{
    dev_gradient, dev_objective, fd_oracle, inner_train, replay_matches, rmd_hypergradient,
    smoothed_metric, train_student, train_teacher, EtaSchedule, MetaConfig, TeacherConfig,
    TeacherStepRecord, TrajectoryRecord,
};
pub use param::ParamVector;
pub use student::{
    accuracy, bilinear_loss, cross_entropy_loss, diagonal_loss, per_class_precision, predict,
    smooth01_loss, LossCoefficients, LossSpec, MlpStudent,
};
pub use teacher::{
    adam_step, featurize_state, AdamHyper, AdamState, StateVector, TeacherFamily, TeacherParams,
};
pub use tensor::Tensor;
