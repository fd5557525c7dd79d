//! Perturbation geometry: random initialization inside an Lp ball,
//! projection back onto it, the batch-statistics scale vector with its
//! floor, and batch-range clipping.
//!
//! A perturbation batch is a flat buffer viewed as `rows x dim`: one row
//! per example, one column per latent (or input) element. Every budget
//! constraint applies to each row independently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm order for the perturbation constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    Linf,
}

impl NormKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "l2" => Ok(NormKind::L2),
            "linf" => Ok(NormKind::Linf),
            other => Err(Error::Config(format!(
                "unknown norm {other:?}; expected l2 or linf"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::L2 => "l2",
            NormKind::Linf => "linf",
        }
    }
}

/// Constraint descriptor for one attack: radius, norm order, and the
/// optional per-neuron normalized metric with its floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBudget<S: Scalar> {
    pub epsilon: S,
    pub norm: NormKind,
    pub normalized: bool,
    pub alpha: S,
}

impl<S: Scalar> PerturbationBudget<S> {
    pub fn l2(epsilon: S) -> Self {
        PerturbationBudget {
            epsilon,
            norm: NormKind::L2,
            normalized: false,
            alpha: S::zero(),
        }
    }

    pub fn linf(epsilon: S) -> Self {
        PerturbationBudget {
            epsilon,
            norm: NormKind::Linf,
            normalized: false,
            alpha: S::zero(),
        }
    }

    /// Enable the per-neuron scale metric with floor `alpha`.
    pub fn with_normalized(mut self, alpha: S) -> Self {
        self.normalized = true;
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= S::zero()) {
            return Err(Error::contract(
                "perturbation_budget",
                format!("epsilon must be non-negative, got {}", self.epsilon),
            ));
        }
        if !(self.alpha >= S::zero()) {
            return Err(Error::contract(
                "perturbation_budget",
                format!("alpha must be non-negative, got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Per-neuron scale factors; their mean is 1 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector<S: Scalar> {
    pub sigma: Vec<S>,
}

impl<S: Scalar> ScaleVector<S> {
    pub fn ones(dim: usize) -> Self {
        ScaleVector {
            sigma: vec![S::one(); dim],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

fn row_norm<S: Scalar>(row: &[S], norm: NormKind) -> S {
    match norm {
        NormKind::L2 => row.iter().map(|&v| v * v).sum::<S>().sqrt(),
        NormKind::Linf => row
            .iter()
            .fold(S::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc }),
    }
}

/// Relative slack on the projection trigger. Rescaling to exactly epsilon
/// can overshoot by an ulp; triggering only above this slack makes the
/// projection exactly idempotent while keeping every output within
/// epsilon * (1 + 1e-12).
fn ball_edge<S: Scalar>(epsilon: S) -> S {
    epsilon * (S::one() + S::from_f64(1e-12))
}

/// Draw a fresh perturbation: each row is an isotropic direction scaled to
/// a uniform fraction of the budget radius. Zero epsilon yields zeros.
pub fn random_init<S: Scalar, R: Rng + ?Sized>(
    rows: usize,
    dim: usize,
    budget: &PerturbationBudget<S>,
    rng: &mut R,
) -> Vec<S> {
    let mut delta = vec![S::zero(); rows * dim];
    if budget.epsilon == S::zero() || dim == 0 {
        return delta;
    }
    for row in delta.chunks_mut(dim) {
        for v in row.iter_mut() {
            *v = S::sample_standard_normal(rng);
        }
    }
    for row in delta.chunks_mut(dim) {
        let r: S = S::sample_unit(rng);
        let norm = row_norm(row, budget.norm);
        if norm > S::zero() {
            let scale = r * budget.epsilon / norm;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    delta
}

/// Project each row onto the Lp ball of radius epsilon. Rows already
/// inside are returned untouched (bitwise), so the projection is exactly
/// idempotent.
pub fn project_lp<S: Scalar>(delta: &mut [S], dim: usize, epsilon: S, norm: NormKind) {
    if dim == 0 {
        return;
    }
    debug_assert_eq!(delta.len() % dim, 0);
    let edge = ball_edge(epsilon);
    match norm {
        NormKind::L2 => {
            for row in delta.chunks_mut(dim) {
                let n = row_norm(row, NormKind::L2);
                if n > edge {
                    let scale = epsilon / n;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        NormKind::Linf => {
            for v in delta.iter_mut() {
                if *v > epsilon {
                    *v = epsilon;
                } else if *v < -epsilon {
                    *v = -epsilon;
                }
            }
        }
    }
}

/// Per-neuron scale factors from a batch of clean latents: each neuron's
/// population standard deviation divided by the mean of all neuron stds.
/// A batch with no variation anywhere degenerates to all ones.
pub fn compute_sigma<S: Scalar>(latents: &[S], rows: usize, dim: usize) -> Result<ScaleVector<S>> {
    if rows < 2 {
        return Err(Error::contract(
            "compute_sigma",
            format!("need at least 2 examples to estimate scales, got {rows}"),
        ));
    }
    if latents.len() != rows * dim {
        return Err(Error::Dimension {
            op: "compute_sigma",
            lhs: vec![latents.len()],
            rhs: vec![rows, dim],
        });
    }
    let n = S::from_f64(rows as f64);
    let mut stds = vec![S::zero(); dim];
    for (j, std) in stds.iter_mut().enumerate() {
        let mut mean = S::zero();
        for i in 0..rows {
            mean += latents[i * dim + j];
        }
        mean /= n;
        let mut var = S::zero();
        for i in 0..rows {
            let d = latents[i * dim + j] - mean;
            var += d * d;
        }
        *std = (var / n).sqrt();
    }
    // Identical stds (including the all-constant batch) reduce to ones
    // exactly; summing then dividing would be off by an ulp.
    if stds.iter().all(|&s| s == stds[0]) {
        return Ok(ScaleVector::ones(dim));
    }
    let mean_std = stds.iter().copied().sum::<S>() / S::from_f64(dim as f64);
    if mean_std == S::zero() {
        return Ok(ScaleVector::ones(dim));
    }
    for s in stds.iter_mut() {
        *s /= mean_std;
    }
    Ok(ScaleVector { sigma: stds })
}

/// Scale a perturbation by the floored per-neuron factors:
/// delta'[i][j] = delta[i][j] * max(sigma[j], alpha). Signs are preserved.
pub fn apply_normalized<S: Scalar>(
    delta: &mut [S],
    sigma: &ScaleVector<S>,
    alpha: S,
) -> Result<()> {
    let dim = sigma.len();
    if dim == 0 || delta.len() % dim != 0 {
        return Err(Error::Dimension {
            op: "apply_normalized",
            lhs: vec![delta.len()],
            rhs: vec![dim],
        });
    }
    let floored: Vec<S> = sigma
        .sigma
        .iter()
        .map(|&s| if s < alpha { alpha } else { s })
        .collect();
    for row in delta.chunks_mut(dim) {
        for (v, &f) in row.iter_mut().zip(floored.iter()) {
            *v *= f;
        }
    }
    Ok(())
}

/// Clamp every element of `perturbed` to the global [min, max] of the
/// clean batch (two scalars over the whole layer). Returns the bounds.
pub fn clip_to_batch_range<S: Scalar>(perturbed: &mut [S], clean: &[S]) -> Result<(S, S)> {
    if clean.is_empty() {
        return Err(Error::contract(
            "clip_to_batch_range",
            "clean batch is empty",
        ));
    }
    let mut lo = clean[0];
    let mut hi = clean[0];
    for &v in &clean[1..] {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    for v in perturbed.iter_mut() {
        if *v < lo {
            *v = lo;
        } else if *v > hi {
            *v = hi;
        }
    }
    Ok((lo, hi))
}
