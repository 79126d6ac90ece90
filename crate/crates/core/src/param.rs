//! Named collections of tensors treated as one flat parameter vector.
//!
//! Student weights and teacher weights are both `ParamVector`s: an ordered
//! list of named tensor segments that flattens to a single vector for
//! gradient algebra and unflattens back without losing a bit.

use crate::error::{DlfError, Result};
use crate::tensor::Tensor;

/// Ordered, named tensor segments forming one differentiation variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
    total_len: usize,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &segments {
            if !seen.insert(name.clone()) {
                return Err(DlfError::InvalidArg(format!(
                    "duplicate segment name '{name}' in parameter vector"
                )));
            }
        }
        let total_len = segments.iter().map(|(_, t)| t.len()).sum();
        Ok(ParamVector {
            segments,
            total_len,
        })
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segment(&self, name: &str) -> Option<&Tensor> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// True when `other` has the same segment names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(other.segments.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
            total_len: self.total_len,
        }
    }

    /// Concatenates all segment data in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len);
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this structure from flat data.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.total_len {
            return Err(DlfError::shape(
                "unflatten",
                format!("expected {} values, got {}", self.total_len, flat.len()),
            ));
        }
        let mut segments = Vec::with_capacity(self.segments.len());
        let mut offset = 0;
        for (name, t) in &self.segments {
            let next = offset + t.len();
            segments.push((
                name.clone(),
                Tensor::from_vec(t.shape().to_vec(), flat[offset..next].to_vec())?,
            ));
            offset = next;
        }
        Ok(ParamVector {
            segments,
            total_len: self.total_len,
        })
    }

    fn zip_with(&self, other: &ParamVector, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        if !self.same_structure(other) {
            return Err(DlfError::shape(op, "parameter structures differ"));
        }
        let segments = self
            .segments
            .iter()
            .zip(other.segments.iter())
            .map(|((n, a), (_, b))| Ok((n.clone(), a.zip_map(b, op, &f)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVector {
            segments,
            total_len: self.total_len,
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, "param_add", |a, b| a + b)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, "param_axpy", |a, b| a + c * b)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(c)))
                .collect(),
            total_len: self.total_len,
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        if !self.same_structure(other) {
            return Err(DlfError::shape("param_dot", "parameter structures differ"));
        }
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.segments.iter().zip(other.segments.iter()) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|(_, t)| t.is_finite())
    }
}
