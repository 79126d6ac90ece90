//! The teacher model: student-status featurization, the attention network
//! mapping status to loss coefficients, and the Adam optimizer that trains it.
//!
//! The teacher holds a bank of `n_keys` coefficient slices `W` and an
//! attention projection `V`. Given a state vector `s`, the output
//! coefficients are the attention-weighted sum of the slices:
//! `Phi = sum_k softmax(V s)_k W[.., k]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DlfError, Result};
use crate::param::ParamVector;
use crate::student::LossCoefficients;
use crate::tensor::Tensor;

/// Shape family of the coefficients the teacher emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherFamily {
    /// Full `(n_classes, n_classes)` interaction matrices.
    Full,
    /// Diagonal `(n_classes,)` interactions.
    Diagonal,
}

/// Bounded features summarizing the student's training status: normalized
/// iteration, training accuracy, dev accuracy, then one dev precision per
/// class. Length is `3 + n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Tensor,
}

impl StateVector {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 1 {
            return Err(DlfError::shape(
                "state_vector",
                format!("expected rank-1 tensor, got {:?}", values.shape()),
            ));
        }
        if let Some(&bad) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DlfError::InvalidArg(format!(
                "state features must lie in [0,1], got {bad}"
            )));
        }
        Ok(StateVector { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Assembles the state vector `[t/T, train_acc, dev_acc, precisions...]`.
///
/// The iteration feature is `t / t_total`, or zero for a zero-length run.
pub fn featurize_state(
    t: usize,
    t_total: usize,
    train_acc: f64,
    dev_acc: f64,
    dev_precisions: &Tensor,
) -> Result<StateVector> {
    if t > t_total {
        return Err(DlfError::InvalidArg(format!(
            "step {t} exceeds total steps {t_total}"
        )));
    }
    let progress = if t_total == 0 {
        0.0
    } else {
        t as f64 / t_total as f64
    };
    let mut values = Vec::with_capacity(3 + dev_precisions.len());
    values.push(progress);
    values.push(train_acc);
    values.push(dev_acc);
    values.extend_from_slice(dev_precisions.data());
    StateVector::new(Tensor::from_vec(vec![values.len()], values)?)
}

/// Teacher parameters: the slice bank `W` and attention projection `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    family: TeacherFamily,
    n_classes: usize,
    n_keys: usize,
    state_len: usize,
    /// `(n_classes, n_classes, n_keys)` for the full family,
    /// `(n_classes, n_keys)` for the diagonal family.
    w: Tensor,
    /// `(n_keys, state_len)`.
    v: Tensor,
}

impl TeacherParams {
    /// Seeded initialization: every slice of `W` starts at the identity
    /// (ones for the diagonal family) plus small Glorot noise, and `V` is
    /// Glorot-initialized.
    pub fn init(
        family: TeacherFamily,
        n_classes: usize,
        state_len: usize,
        n_keys: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 || n_keys == 0 || state_len == 0 {
            return Err(DlfError::InvalidArg(
                "teacher dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = n_classes;
        let w = match family {
            TeacherFamily::Full => {
                let a = 0.01 * (6.0 / (2 * c) as f64).sqrt();
                let mut data = vec![0.0; c * c * n_keys];
                for i in 0..c {
                    for j in 0..c {
                        for k in 0..n_keys {
                            let base = if i == j { 1.0 } else { 0.0 };
                            data[(i * c + j) * n_keys + k] = base + rng.random_range(-a..a);
                        }
                    }
                }
                Tensor::from_vec(vec![c, c, n_keys], data)?
            }
            TeacherFamily::Diagonal => {
                let a = 0.01 * (6.0 / (c + 1) as f64).sqrt();
                let data = (0..c * n_keys)
                    .map(|_| 1.0 + rng.random_range(-a..a))
                    .collect();
                Tensor::from_vec(vec![c, n_keys], data)?
            }
        };
        let av = (6.0 / (n_keys + state_len) as f64).sqrt();
        let v_data = (0..n_keys * state_len)
            .map(|_| rng.random_range(-av..av))
            .collect();
        let v = Tensor::from_vec(vec![n_keys, state_len], v_data)?;
        Ok(TeacherParams {
            family,
            n_classes,
            n_keys,
            state_len,
            w,
            v,
        })
    }

    /// Teacher with explicitly provided tensors.
    pub fn from_tensors(family: TeacherFamily, w: Tensor, v: Tensor) -> Result<Self> {
        let (n_keys, state_len) = v.dims2("teacher_params")?;
        let n_classes = match family {
            TeacherFamily::Full => match w.shape() {
                [c1, c2, k] if c1 == c2 && *k == n_keys => *c1,
                other => {
                    return Err(DlfError::shape(
                        "teacher_params",
                        format!("full-family W shape {other:?} inconsistent with V"),
                    ))
                }
            },
            TeacherFamily::Diagonal => match w.shape() {
                [c, k] if *k == n_keys => *c,
                other => {
                    return Err(DlfError::shape(
                        "teacher_params",
                        format!("diagonal-family W shape {other:?} inconsistent with V"),
                    ))
                }
            },
        };
        Ok(TeacherParams {
            family,
            n_classes,
            n_keys,
            state_len,
            w,
            v,
        })
    }

    pub fn family(&self) -> TeacherFamily {
        self.family
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn state_len(&self) -> usize {
        self.state_len
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    /// Flattened view of `(W, V)` as the differentiation variable theta.
    pub fn params(&self) -> ParamVector {
        ParamVector::new(vec![("W".into(), self.w.clone()), ("V".into(), self.v.clone())])
            .expect("unique names")
    }

    pub fn set_params(&mut self, theta: &ParamVector) -> Result<()> {
        let w = theta
            .segment("W")
            .ok_or_else(|| DlfError::InvalidArg("missing W segment".into()))?;
        let v = theta
            .segment("V")
            .ok_or_else(|| DlfError::InvalidArg("missing V segment".into()))?;
        if w.shape() != self.w.shape() || v.shape() != self.v.shape() {
            return Err(DlfError::shape("set_params", "segment shapes differ"));
        }
        self.w = w.clone();
        self.v = v.clone();
        Ok(())
    }

    fn w_matrix_shape(&self) -> (usize, usize) {
        match self.family {
            TeacherFamily::Full => (self.n_classes * self.n_classes, self.n_keys),
            TeacherFamily::Diagonal => (self.n_classes, self.n_keys),
        }
    }

    /// Attention weights `softmax(V s)` for a state.
    pub fn attention(&self, s: &StateVector) -> Result<Tensor> {
        if s.len() != self.state_len {
            return Err(DlfError::shape(
                "teacher_forward",
                format!("state length {} vs expected {}", s.len(), self.state_len),
            ));
        }
        let s_col = s.values().reshaped(vec![self.state_len, 1])?;
        let logits = self.v.matmul(&s_col)?; // (n_keys, 1)
        let probs = logits.reshaped(vec![1, self.n_keys])?.softmax_rows()?;
        probs.reshaped(vec![self.n_keys])
    }

    /// Loss coefficients for a state: the attention-weighted sum of slices.
    pub fn forward(&self, s: &StateVector) -> Result<LossCoefficients> {
        let attn = self.attention(s)?;
        let (rows, keys) = self.w_matrix_shape();
        let w2 = self.w.reshaped(vec![rows, keys])?;
        let phi_flat = w2.matmul(&attn.reshaped(vec![keys, 1])?)?;
        match self.family {
            TeacherFamily::Full => LossCoefficients::full(
                phi_flat.reshaped(vec![self.n_classes, self.n_classes])?,
            ),
            TeacherFamily::Diagonal => {
                LossCoefficients::diagonal(phi_flat.reshaped(vec![self.n_classes])?)
            }
        }
    }

    /// Graph version of [`TeacherParams::forward`] over leaf nodes for `W`
    /// and `V`; the state enters as a constant (stop-gradient).
    ///
    /// Returns the coefficient node: `(c, c)` for the full family, `(c,)`
    /// for the diagonal family.
    pub fn forward_graph(&self, g: &Graph, w_var: Var, v_var: Var, s: &StateVector) -> Result<Var> {
        if s.len() != self.state_len {
            return Err(DlfError::shape(
                "teacher_forward",
                format!("state length {} vs expected {}", s.len(), self.state_len),
            ));
        }
        let s_col = g.constant(s.values().reshaped(vec![self.state_len, 1])?)?;
        let logits = g.matmul(v_var, s_col)?; // (n_keys, 1)
        let row = g.reshape(logits, vec![1, self.n_keys])?;
        let attn = g.softmax_rows(row)?;
        let attn_col = g.transpose(attn)?; // (n_keys, 1)
        let (rows, keys) = self.w_matrix_shape();
        let w2 = g.reshape(w_var, vec![rows, keys])?;
        let phi_flat = g.matmul(w2, attn_col)?;
        match self.family {
            TeacherFamily::Full => g.reshape(phi_flat, vec![self.n_classes, self.n_classes]),
            TeacherFamily::Diagonal => g.reshape(phi_flat, vec![self.n_classes]),
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for one optimized parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    step_count: u64,
    m: ParamVector,
    v: ParamVector,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(like: &ParamVector, hyper: AdamHyper) -> Self {
        AdamState {
            step_count: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn moments(&self) -> (&ParamVector, &ParamVector) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update. Returns the new parameters and state.
pub fn adam_step(
    theta: &ParamVector,
    grad: &ParamVector,
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    if !theta.same_structure(grad) || !theta.same_structure(&state.m) {
        return Err(DlfError::shape("adam_step", "structure mismatch"));
    }
    let h = state.hyper;
    let t = state.step_count + 1;
    let mut m = state.m.flatten();
    let mut v = state.v.flatten();
    let g = grad.flatten();
    let mut th = theta.flatten();
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..th.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        th[i] -= h.alpha * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    let new_state = AdamState {
        step_count: t,
        m: state.m.unflatten(&m)?,
        v: state.v.unflatten(&v)?,
        hyper: h,
    };
    Ok((theta.unflatten(&th)?, new_state))
}
