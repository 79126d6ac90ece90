//! The student classifier and the loss functions it can be trained with.
//!
//! The student is a multi-layer perceptron with sigmoid hidden units and a
//! softmax output head; with no hidden layers it degenerates to plain
//! multinomial logistic regression. Losses come in four families: the
//! teacher-controlled bilinear form `-sigmoid(y' Phi log p)`, its diagonal
//! variant, and the fixed cross-entropy and smooth 0-1 baselines.
//!
//! Every loss exists twice: as a plain evaluation on probability tensors and
//! as a graph builder for differentiation. Both share the same formulas.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DlfError, Result};
use crate::param::ParamVector;
use crate::tensor::{clamped_ln, sigmoid, Tensor};

/// Instantaneous loss-surface coefficients produced by the teacher.
#[derive(Debug, Clone, PartialEq)]
pub enum LossCoefficients {
    /// Full interaction matrix, shape `(n_classes, n_classes)`.
    Full(Tensor),
    /// Diagonal interaction, shape `(n_classes,)`.
    Diagonal(Tensor),
}

impl LossCoefficients {
    pub fn full(values: Tensor) -> Result<Self> {
        let (r, c) = values.dims2("loss_coefficients")?;
        if r != c {
            return Err(DlfError::shape(
                "loss_coefficients",
                format!("full matrix must be square, got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(DlfError::non_finite("loss_coefficients"));
        }
        Ok(LossCoefficients::Full(values))
    }

    pub fn diagonal(values: Tensor) -> Result<Self> {
        if values.shape().len() != 1 {
            return Err(DlfError::shape(
                "loss_coefficients",
                format!("diagonal must be rank-1, got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(DlfError::non_finite("loss_coefficients"));
        }
        Ok(LossCoefficients::Diagonal(values))
    }

    pub fn n_classes(&self) -> usize {
        match self {
            LossCoefficients::Full(t) => t.shape()[0],
            LossCoefficients::Diagonal(t) => t.shape()[0],
        }
    }

    pub fn values(&self) -> &Tensor {
        match self {
            LossCoefficients::Full(t) | LossCoefficients::Diagonal(t) => t,
        }
    }
}

/// Which loss family trains the student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Teacher-controlled full-matrix loss.
    Bilinear,
    /// Teacher-controlled diagonal loss.
    Diagonal,
    CrossEntropy,
    /// Smoothed 0-1 loss with sharpness `k`.
    Smooth01 { k: f64 },
}

impl LossSpec {
    pub fn teacher_driven(&self) -> bool {
        matches!(self, LossSpec::Bilinear | LossSpec::Diagonal)
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Smooth01 { k } = self {
            if !(*k > 0.0) {
                return Err(DlfError::InvalidArg(format!(
                    "smooth01 sharpness must be positive, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Multi-layer perceptron over a softmax output.
#[derive(Debug, Clone)]
pub struct MlpStudent {
    layer_sizes: Vec<usize>,
    omega: ParamVector,
}

fn layer_segments(layer_sizes: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in 0..layer_sizes.len() - 1 {
        out.push((format!("w{l}"), vec![layer_sizes[l], layer_sizes[l + 1]]));
        out.push((format!("b{l}"), vec![layer_sizes[l + 1]]));
    }
    out
}

impl MlpStudent {
    /// Fresh student with seeded uniform Glorot weights and zero biases.
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(DlfError::InvalidArg(format!(
                "layer sizes must list input and output dims, got {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut segments = Vec::new();
        for (name, shape) in layer_segments(&layer_sizes) {
            let tensor = if name.starts_with('w') {
                let (fan_in, fan_out) = (shape[0], shape[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                Tensor::from_vec(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            segments.push((name, tensor));
        }
        Ok(MlpStudent {
            layer_sizes,
            omega: ParamVector::new(segments)?,
        })
    }

    /// Student with explicitly provided weights.
    pub fn from_omega(layer_sizes: Vec<usize>, omega: ParamVector) -> Result<Self> {
        let expected = layer_segments(&layer_sizes);
        if omega.segments().len() != expected.len() {
            return Err(DlfError::shape(
                "from_omega",
                format!(
                    "{} segments for {} layers",
                    omega.segments().len(),
                    layer_sizes.len() - 1
                ),
            ));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(omega.segments()) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(DlfError::shape(
                    "from_omega",
                    format!("segment {have_name} has shape {:?}, expected {name} {shape:?}", have.shape()),
                ));
            }
        }
        Ok(MlpStudent { layer_sizes, omega })
    }

    /// Recovers the layer sizes implied by a weight vector's segment shapes.
    pub fn from_omega_sizes(omega: &ParamVector) -> Result<Vec<usize>> {
        let weights: Vec<&Tensor> = omega
            .segments()
            .iter()
            .filter(|(n, _)| n.starts_with('w'))
            .map(|(_, t)| t)
            .collect();
        if weights.is_empty() {
            return Err(DlfError::shape(
                "from_omega_sizes",
                "no weight segments found",
            ));
        }
        let mut sizes = vec![weights[0].shape()[0]];
        for w in &weights {
            let (rows, cols) = w.dims2("from_omega_sizes")?;
            if rows != *sizes.last().expect("nonempty") {
                return Err(DlfError::shape(
                    "from_omega_sizes",
                    "weight shapes do not chain",
                ));
            }
            sizes.push(cols);
        }
        Ok(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn omega(&self) -> &ParamVector {
        &self.omega
    }

    pub fn set_omega(&mut self, omega: ParamVector) -> Result<()> {
        if !self.omega.same_structure(&omega) {
            return Err(DlfError::shape("set_omega", "structure mismatch"));
        }
        self.omega = omega;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Raw pre-softmax scores, shape `(batch, n_classes)`.
    pub fn forward_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let (_, d) = inputs.dims2("forward")?;
        if d != self.input_dim() {
            return Err(DlfError::shape(
                "forward",
                format!("input dim {} does not match student input {}", d, self.input_dim()),
            ));
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = inputs.clone();
        for l in 0..n_layers {
            let w = self.omega.segment(&format!("w{l}")).expect("validated");
            let b = self.omega.segment(&format!("b{l}")).expect("validated");
            let mut z = h.matmul(w)?;
            let (rows, cols) = z.dims2("forward")?;
            let zd = z.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    zd[i * cols + j] += b.data()[j];
                }
            }
            h = if l + 1 < n_layers { z.map(sigmoid) } else { z };
        }
        Ok(h)
    }

    /// Class probabilities, shape `(batch, n_classes)`; each row sums to one.
    pub fn forward_probs(&self, inputs: &Tensor) -> Result<Tensor> {
        self.forward_logits(inputs)?.softmax_rows()
    }

    /// Graph version of the logits computation over leaf variables `omega_vars`
    /// (one per segment, in segment order) and a constant input node.
    pub fn logits_graph(&self, g: &Graph, omega_vars: &[Var], inputs: Var) -> Result<Var> {
        let batch = g.shape(inputs)[0];
        let n_layers = self.layer_sizes.len() - 1;
        if omega_vars.len() != 2 * n_layers {
            return Err(DlfError::shape(
                "logits_graph",
                format!("{} leaves for {} layers", omega_vars.len(), n_layers),
            ));
        }
        let mut h = inputs;
        for l in 0..n_layers {
            let w = omega_vars[2 * l];
            let b = omega_vars[2 * l + 1];
            let z = g.matmul(h, w)?;
            let out_dim = self.layer_sizes[l + 1];
            let b_row = g.reshape(b, vec![1, out_dim])?;
            let b_full = g.broadcast_row(b_row, batch)?;
            let z = g.add(z, b_full)?;
            h = if l + 1 < n_layers { g.sigmoid(z)? } else { z };
        }
        Ok(h)
    }

    /// Graph version of [`MlpStudent::forward_probs`].
    pub fn probs_graph(&self, g: &Graph, omega_vars: &[Var], inputs: Var) -> Result<Var> {
        let logits = self.logits_graph(g, omega_vars, inputs)?;
        g.softmax_rows(logits)
    }
}

fn check_labels(probs: &Tensor, labels: &[usize], op: &str) -> Result<(usize, usize)> {
    let (b, c) = probs.dims2(op)?;
    if labels.len() != b {
        return Err(DlfError::shape(
            op,
            format!("{} labels for {} rows", labels.len(), b),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(DlfError::InvalidArg(format!(
            "{op}: label {bad} out of range for {c} classes"
        )));
    }
    Ok((b, c))
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = check_labels(probs, labels, "cross_entropy_loss")?;
    let _ = c;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        acc -= clamped_ln(probs.at2(i, y));
    }
    Ok(acc / b as f64)
}

/// Mean of `-sigmoid(y' Phi log p)` with a full interaction matrix.
pub fn bilinear_loss(probs: &Tensor, labels: &[usize], phi: &LossCoefficients) -> Result<f64> {
    let (b, c) = check_labels(probs, labels, "bilinear_loss")?;
    let LossCoefficients::Full(m) = phi else {
        return Err(DlfError::shape(
            "bilinear_loss",
            "expected full-matrix coefficients",
        ));
    };
    if m.shape() != [c, c] {
        return Err(DlfError::shape(
            "bilinear_loss",
            format!("phi shape {:?} for {c} classes", m.shape()),
        ));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut z = 0.0;
        for j in 0..c {
            z += m.at2(y, j) * clamped_ln(probs.at2(i, j));
        }
        acc -= sigmoid(z);
    }
    Ok(acc / b as f64)
}

/// Mean of `-sigmoid(phi[y] * log p(y))`, the diagonal restriction of the
/// bilinear loss.
pub fn diagonal_loss(probs: &Tensor, labels: &[usize], phi: &LossCoefficients) -> Result<f64> {
    let (b, c) = check_labels(probs, labels, "diagonal_loss")?;
    let LossCoefficients::Diagonal(d) = phi else {
        return Err(DlfError::shape(
            "diagonal_loss",
            "expected diagonal coefficients",
        ));
    };
    if d.shape() != [c] {
        return Err(DlfError::shape(
            "diagonal_loss",
            format!("phi length {:?} for {c} classes", d.shape()),
        ));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = d.data()[y] * clamped_ln(probs.at2(i, y));
        acc -= sigmoid(z);
    }
    Ok(acc / b as f64)
}

/// Index of the most probable competing class (any class but `y`), ties to
/// the lowest index.
fn competing_argmax(probs: &Tensor, row: usize, y: usize) -> usize {
    let c = probs.shape()[1];
    let mut best = usize::MAX;
    for j in 0..c {
        if j == y {
            continue;
        }
        if best == usize::MAX || probs.at2(row, j) > probs.at2(row, best) {
            best = j;
        }
    }
    best
}

/// Mean of `-log sigmoid(k (log p(y) - max_{j != y} log p(j)))`.
pub fn smooth01_loss(probs: &Tensor, labels: &[usize], k: f64) -> Result<f64> {
    let (b, c) = check_labels(probs, labels, "smooth01_loss")?;
    if c < 2 {
        return Err(DlfError::InvalidArg(
            "smooth01_loss needs at least two classes".into(),
        ));
    }
    if !(k > 0.0) {
        return Err(DlfError::InvalidArg(format!(
            "smooth01_loss sharpness must be positive, got {k}"
        )));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let j = competing_argmax(probs, i, y);
        let z = k * (clamped_ln(probs.at2(i, y)) - clamped_ln(probs.at2(i, j)));
        acc -= clamped_ln(sigmoid(z));
    }
    Ok(acc / b as f64)
}

/// Loss selector for graph construction. Teacher-driven families carry the
/// coefficient node, which may itself depend on teacher leaves.
#[derive(Clone, Copy)]
pub enum GraphLoss {
    Bilinear { phi: Var },
    Diagonal { phi: Var },
    CrossEntropy,
    Smooth01 { k: f64 },
}

/// Builds the mean batch loss as a graph node over a probability node.
pub fn loss_graph(
    g: &Graph,
    probs: Var,
    labels: &Rc<Vec<usize>>,
    loss: GraphLoss,
) -> Result<Var> {
    let logp = g.log(probs)?;
    let node = match loss {
        GraphLoss::Bilinear { phi } => {
            let phi_t = g.transpose(phi)?;
            let m = g.matmul(logp, phi_t)?;
            let z = g.gather_rows(m, Rc::clone(labels))?;
            let s = g.sigmoid(z)?;
            let mean = g.mean(s)?;
            g.scale(mean, -1.0)?
        }
        GraphLoss::Diagonal { phi } => {
            let ly = g.gather_rows(logp, Rc::clone(labels))?;
            let py = g.take(phi, Rc::clone(labels))?;
            let z = g.mul(ly, py)?;
            let s = g.sigmoid(z)?;
            let mean = g.mean(s)?;
            g.scale(mean, -1.0)?
        }
        GraphLoss::CrossEntropy => {
            let ly = g.gather_rows(logp, Rc::clone(labels))?;
            let mean = g.mean(ly)?;
            g.scale(mean, -1.0)?
        }
        GraphLoss::Smooth01 { k } => {
            let values = g.value(probs);
            let competitors: Vec<usize> = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| competing_argmax(&values, i, y))
                .collect();
            let ly = g.gather_rows(logp, Rc::clone(labels))?;
            let lstar = g.gather_rows(logp, Rc::new(competitors))?;
            let margin = g.sub(ly, lstar)?;
            let z = g.scale(margin, k)?;
            let s = g.sigmoid(z)?;
            let ls = g.log(s)?;
            let mean = g.mean(ls)?;
            g.scale(mean, -1.0)?
        }
    };
    Ok(node)
}

/// Hard class decisions; ties resolve to the lowest class index.
pub fn predict(probs: &Tensor) -> Result<Vec<usize>> {
    probs.argmax_rows()
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(DlfError::shape(
            "accuracy",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(DlfError::InvalidArg("accuracy of an empty batch".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class precision: correct-among-predicted, zero for never-predicted
/// classes.
pub fn per_class_precision(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Tensor> {
    if preds.len() != labels.len() {
        return Err(DlfError::shape(
            "per_class_precision",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    let mut predicted = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes {
            return Err(DlfError::InvalidArg(format!(
                "prediction {p} out of range for {n_classes} classes"
            )));
        }
        predicted[p] += 1;
        if p == l {
            correct[p] += 1;
        }
    }
    let data = (0..n_classes)
        .map(|c| {
            if predicted[c] == 0 {
                0.0
            } else {
                correct[c] as f64 / predicted[c] as f64
            }
        })
        .collect();
    Tensor::from_vec(vec![n_classes], data)
}
