//! Named parameter collections and plain gradient descent.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered collection of named differentiable leaves. Insertion order is the
/// iteration order, which makes parameter traversal (and therefore training)
/// deterministic.
pub struct Parameters<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Parameters<S> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
        }
    }

    /// Add a named tensor. Names must be unique within the collection.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(
                "parameters",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Drop accumulated gradients on every parameter.
    pub fn clear_grads(&self) {
        for (_, t) in &self.entries {
            t.clear_grad();
        }
    }

    /// Merge another collection into this one (names must stay unique).
    pub fn extend(&mut self, other: Parameters<S>) -> Result<()> {
        for (name, t) in other.entries {
            self.push(name, t)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Parameters<S> {
    fn default() -> Self {
        Parameters::new()
    }
}

/// Gradient descent with optional classical momentum.
///
/// With momentum m: v <- m v + g, theta <- theta - lr v. Velocity buffers
/// are keyed by parameter name so an optimizer can be rebuilt from a
/// checkpointed state.
pub struct Sgd<S: Scalar> {
    lr: S,
    momentum: Option<S>,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S) -> Self {
        Sgd {
            lr,
            momentum: None,
            velocity: HashMap::new(),
        }
    }

    pub fn with_momentum(lr: S, momentum: S) -> Self {
        Sgd {
            lr,
            momentum: Some(momentum),
            velocity: HashMap::new(),
        }
    }

    pub fn learning_rate(&self) -> S {
        self.lr
    }

    /// Snapshot of velocity buffers, sorted by name (empty when momentum is
    /// off or no step has run).
    pub fn velocity_state(&self) -> Vec<(String, Vec<S>)> {
        let mut out: Vec<(String, Vec<S>)> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restore velocity buffers captured by [`Sgd::velocity_state`].
    pub fn restore_velocity(&mut self, state: &[(String, Vec<S>)]) {
        self.velocity = state.iter().cloned().collect();
    }

    /// Apply one descent step to every parameter, then clear the gradients.
    /// Every parameter must carry an accumulated gradient; a missing
    /// gradient is an error rather than a silent no-op.
    pub fn step(&mut self, params: &Parameters<S>) -> Result<()> {
        for (name, t) in params.iter() {
            let grad = t.grad_vec().ok_or_else(|| {
                Error::contract("optimizer_step", format!("missing gradient for {name:?}"))
            })?;
            match self.momentum {
                Some(m) => {
                    let v = self
                        .velocity
                        .entry(name.to_string())
                        .or_insert_with(|| vec![S::zero(); grad.len()]);
                    for (vi, &gi) in v.iter_mut().zip(grad.iter()) {
                        *vi = m * *vi + gi;
                    }
                    let lr = self.lr;
                    let v = v.clone();
                    t.update_data(|data| {
                        for (d, vi) in data.iter_mut().zip(v.iter()) {
                            *d -= lr * *vi;
                        }
                    });
                }
                None => {
                    let lr = self.lr;
                    t.update_data(|data| {
                        for (d, &gi) in data.iter_mut().zip(grad.iter()) {
                            *d -= lr * gi;
                        }
                    });
                }
            }
        }
        params.clear_grads();
        Ok(())
    }
}
