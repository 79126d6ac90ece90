//! Shared finite-difference oracles and comparison helpers.
//!
//! These oracles evaluate objectives through the plain (non-graph) code path
//! wherever possible, so they stay independent of the differentiation
//! machinery they are used to check.

use dlf_core::{ParamVector, Tensor};

/// Central-difference gradient of a scalar function.
pub fn fd_grad(f: &dyn Fn(&ParamVector) -> f64, x: &ParamVector, eps: f64) -> ParamVector {
    let base = x.flatten();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&x.unflatten(&plus).unwrap());
        let fm = f(&x.unflatten(&minus).unwrap());
        out.push((fp - fm) / (2.0 * eps));
    }
    x.unflatten(&out).unwrap()
}

/// Central difference of a gradient function along direction `v`:
/// `(grad(x + eps v) - grad(x - eps v)) / (2 eps)`.
pub fn fd_directional_of_grad(
    grad_fn: &dyn Fn(&ParamVector) -> ParamVector,
    x: &ParamVector,
    v: &ParamVector,
    eps: f64,
) -> ParamVector {
    let plus = grad_fn(&x.axpy(eps, v).unwrap());
    let minus = grad_fn(&x.axpy(-eps, v).unwrap());
    plus.axpy(-1.0, &minus).unwrap().scale(1.0 / (2.0 * eps))
}

/// Norm-relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    let diff = a.axpy(-1.0, b).unwrap().norm();
    let denom = a.norm().max(b.norm());
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Largest per-coordinate relative error over coordinates whose larger
/// magnitude exceeds `floor`.
pub fn max_coord_rel_err(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

pub fn cosine(a: &ParamVector, b: &ParamVector) -> f64 {
    a.dot(b).unwrap() / (a.norm() * b.norm())
}

/// Deterministic pseudo-random tensor for test fixtures (not a statistical
/// RNG; just a stable scrambled sequence).
pub fn lcg_tensor(shape: Vec<usize>, scale: f64, seed: &mut u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((*seed >> 11) as f64) / ((1u64 << 53) as f64);
            (u * 2.0 - 1.0) * scale
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn lcg_labels(n: usize, n_classes: usize, seed: &mut u64) -> Vec<usize> {
    (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 33) as usize) % n_classes
        })
        .collect()
}
