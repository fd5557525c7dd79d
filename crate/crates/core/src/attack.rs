//! Projected-gradient adversaries in input space and latent space, plus a
//! random latent perturbation baseline.
//!
//! All three share one engine: draw a budget-respecting random start,
//! optionally take ascent steps on the loss through the frozen network,
//! project after every step, and report the loss trace. Perturbations are
//! organized row-per-example; the budget binds each row.

use crate::error::{Error, Result};
use crate::model::{ArchKind, BatchTargets, SplitModel};
use crate::perturb::{
    self, NormKind, PerturbationBudget, ScaleVector,
};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which inner-loop iterate the attack returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IteratePolicy {
    /// The final iterate (default).
    Last,
    /// The iterate with the highest recorded loss, including the start.
    BestLoss,
}

/// Attack schedule and constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig<S: Scalar> {
    /// Inner ascent steps; 0 means the random start is returned as-is.
    pub steps: usize,
    pub step_size: S,
    pub budget: PerturbationBudget<S>,
    pub policy: IteratePolicy,
    /// Step by the gradient sign instead of the raw gradient.
    pub sign_step: bool,
    /// Clamp perturbed latents to the clean batch's global value range.
    pub clip_latent: bool,
    /// Valid input range for input-space attacks; `None` disables the clamp.
    pub input_range: Option<(S, S)>,
    pub seed: u64,
}

impl<S: Scalar> AttackConfig<S> {
    pub fn new(steps: usize, step_size: S, budget: PerturbationBudget<S>, seed: u64) -> Self {
        AttackConfig {
            steps,
            step_size,
            budget,
            policy: IteratePolicy::Last,
            sign_step: false,
            clip_latent: true,
            input_range: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(self.step_size > S::zero()) {
            return Err(Error::contract(
                "attack_config",
                format!("step size must be positive, got {}", self.step_size),
            ));
        }
        Ok(())
    }
}

/// Result of one attack on one batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome<S: Scalar> {
    /// Selected raw perturbation, rows x dim, satisfying the budget.
    pub delta: Vec<S>,
    pub rows: usize,
    pub dim: usize,
    /// Perturbation after per-neuron scaling (equals `delta` when the
    /// normalized metric is off). The clamp, if any, is not folded in;
    /// consumers apply it via `clip_bounds`.
    pub delta_effective: Vec<S>,
    /// Clamp range applied to perturbed values, when clipping was active.
    pub clip_bounds: Option<(S, S)>,
    /// Loss at the start and after each ascent step (steps + 1 entries),
    /// every entry evaluated through the full perturbation pipeline.
    pub loss_trace: Vec<S>,
    /// Loss of the selected iterate.
    pub final_loss: S,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy)]
enum Space {
    Input,
    Latent,
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

struct Engine<'m, S: Scalar> {
    model: &'m SplitModel<S>,
    x: &'m Tensor<S>,
    targets: &'m BatchTargets<S>,
    space: Space,
    config: &'m AttackConfig<S>,
    base: Tensor<S>,
    rows: usize,
    dim: usize,
    sigma_tile: Option<Tensor<S>>,
    clip_bounds: Option<(S, S)>,
    warnings: Vec<String>,
}

impl<'m, S: Scalar> Engine<'m, S> {
    fn prepare(
        model: &'m SplitModel<S>,
        x: &'m Tensor<S>,
        targets: &'m BatchTargets<S>,
        space: Space,
        config: &'m AttackConfig<S>,
    ) -> Result<Self> {
        config.validate()?;
        let mut warnings = Vec::new();
        let is_token = matches!(
            model.spec().arch,
            ArchKind::TransformerClassifier | ArchKind::TransformerGenerator
        );
        let base = match space {
            Space::Input => {
                if is_token {
                    return Err(Error::Config(
                        "input-space attacks need continuous inputs; token tasks \
                         take latent attacks instead"
                            .to_string(),
                    ));
                }
                if config.budget.normalized {
                    return Err(Error::Config(
                        "the normalized metric applies to latent attacks only".to_string(),
                    ));
                }
                x.detach()
            }
            Space::Latent => {
                if config.budget.normalized && model.split_index() == 0 {
                    warnings.push(
                        "normalized metric at split 0 scales raw inputs; this \
                         degenerates toward an input-space attack"
                            .to_string(),
                    );
                }
                model.forward_f(x)?.detach()
            }
        };
        let rows = x.shape()[0];
        let total = base.len();
        if rows == 0 || total % rows != 0 {
            return Err(Error::Dimension {
                op: "attack",
                lhs: vec![total],
                rhs: vec![rows],
            });
        }
        let dim = total / rows;

        let sigma_tile = if config.budget.normalized {
            let sigma = base.with_data(|d| perturb::compute_sigma(d, rows, dim))?;
            let mut floored = sigma.sigma.clone();
            for s in floored.iter_mut() {
                if *s < config.budget.alpha {
                    *s = config.budget.alpha;
                }
            }
            let mut tiled = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                tiled.extend_from_slice(&floored);
            }
            Some(Tensor::from_vec(&base.shape(), tiled)?)
        } else {
            None
        };

        let clip_bounds = match space {
            Space::Input => config.input_range,
            Space::Latent => {
                if config.clip_latent {
                    let (lo, hi) = base.with_data(|d| {
                        let mut lo = d[0];
                        let mut hi = d[0];
                        for &v in &d[1..] {
                            if v < lo {
                                lo = v;
                            }
                            if v > hi {
                                hi = v;
                            }
                        }
                        (lo, hi)
                    });
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::contract(
                            "attack",
                            format!(
                                "clean latent activations at split {} are not \
                                 finite; the model has diverged",
                                model.split_index()
                            ),
                        ));
                    }
                    Some((lo, hi))
                } else {
                    None
                }
            }
        };

        Ok(Engine {
            model,
            x,
            targets,
            space,
            config,
            base,
            rows,
            dim,
            sigma_tile,
            clip_bounds,
            warnings,
        })
    }

    /// Loss of the perturbed batch; optionally also the gradient with
    /// respect to the raw perturbation.
    fn evaluate(&self, delta: &[S], want_grad: bool) -> Result<(S, Option<Vec<S>>)> {
        let shape = self.base.shape();
        let mut leaf = Tensor::from_vec(&shape, delta.to_vec())?;
        if want_grad {
            leaf = leaf.with_grad();
        }
        let effective = match &self.sigma_tile {
            Some(tile) => leaf.mul(tile)?,
            None => leaf.clone(),
        };
        let mut perturbed = effective.add(&self.base)?;
        if let Some((lo, hi)) = self.clip_bounds {
            perturbed = perturbed.clamp(lo, hi)?;
        }
        let logits = match self.space {
            Space::Input => self.model.forward(&perturbed)?,
            Space::Latent => self.model.forward_g(&perturbed)?,
        };
        let loss = self.model.loss_from_logits(&logits, self.x, self.targets)?;
        let value = loss.item()?;
        if !want_grad {
            return Ok((value, None));
        }
        loss.backward()?;
        let grad = leaf
            .grad_vec()
            .ok_or_else(|| Error::contract("attack", "perturbation leaf has no gradient"))?;
        Ok((value, Some(grad)))
    }

    fn run(self, ascend: bool) -> Result<AttackOutcome<S>> {
        let budget = &self.config.budget;
        let mut rng = rng::stream_rng(self.config.seed, stream::ATTACK, 0);
        let mut delta = perturb::random_init(self.rows, self.dim, budget, &mut rng);
        perturb::project_lp(&mut delta, self.dim, budget.epsilon, budget.norm);

        let steps = if ascend { self.config.steps } else { 0 };
        let mut trace: Vec<S> = Vec::with_capacity(steps + 1);
        let mut best: Option<(S, Vec<S>)> = None;
        let track_best = self.config.policy == IteratePolicy::BestLoss;

        for step in 0..=steps {
            let want_grad = step < steps;
            let (value, grad) = self.evaluate(&delta, want_grad)?;
            trace.push(value);
            if track_best {
                let improved = match &best {
                    None => true,
                    Some((b, _)) => value > *b,
                };
                if improved && !value.is_nan() {
                    best = Some((value, delta.clone()));
                }
            }
            if let Some(g) = grad {
                let eta = self.config.step_size;
                if self.config.sign_step {
                    for (v, gi) in delta.iter_mut().zip(g.iter()) {
                        *v += eta * sign(*gi);
                    }
                } else {
                    for (v, gi) in delta.iter_mut().zip(g.iter()) {
                        *v += eta * *gi;
                    }
                }
                perturb::project_lp(&mut delta, self.dim, budget.epsilon, budget.norm);
            }
        }

        let (final_loss, selected) = match (track_best, best) {
            (true, Some((b, d))) => (b, d),
            _ => (*trace.last().expect("trace never empty"), delta),
        };

        let mut delta_effective = selected.clone();
        if budget.normalized {
            let tile = self.sigma_tile.as_ref().expect("sigma present");
            let scales = tile.data_vec();
            for (v, s) in delta_effective.iter_mut().zip(scales.iter()) {
                *v *= *s;
            }
        }

        Ok(AttackOutcome {
            delta: selected,
            rows: self.rows,
            dim: self.dim,
            delta_effective,
            clip_bounds: self.clip_bounds,
            loss_trace: trace,
            final_loss,
            warnings: self.warnings,
        })
    }
}

/// Ascend the training loss over an additive input perturbation. The model
/// is read-only; only the perturbation moves.
pub fn pgd_input_attack<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
    targets: &BatchTargets<S>,
    config: &AttackConfig<S>,
) -> Result<AttackOutcome<S>> {
    Engine::prepare(model, x, targets, Space::Input, config)?.run(true)
}

/// Ascend the training loss over an additive perturbation of the latent at
/// the model's split point. The clean latents are computed once; ascent
/// runs through the head only.
pub fn pgd_latent_attack<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
    targets: &BatchTargets<S>,
    config: &AttackConfig<S>,
) -> Result<AttackOutcome<S>> {
    Engine::prepare(model, x, targets, Space::Latent, config)?.run(true)
}

/// Non-adversarial contrast: a single random draw under the same budget,
/// scaling, and clipping pipeline as the latent attack, with no ascent.
pub fn random_latent_perturbation<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
    targets: &BatchTargets<S>,
    config: &AttackConfig<S>,
) -> Result<AttackOutcome<S>> {
    Engine::prepare(model, x, targets, Space::Latent, config)?.run(false)
}

/// Mean per-example norm of the clean latents at the model's current
/// split; the reference magnitude for budget grids.
pub fn mean_latent_norm<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
    norm: NormKind,
) -> Result<S> {
    let latent = model.forward_f(x)?;
    let rows = x.shape()[0];
    if rows == 0 {
        return Err(Error::contract("mean_latent_norm", "empty batch"));
    }
    let total = latent.len();
    let dim = total / rows;
    let sum = latent.with_data(|d| {
        let mut acc = S::zero();
        for row in d.chunks(dim) {
            acc += match norm {
                NormKind::L2 => row.iter().map(|&v| v * v).sum::<S>().sqrt(),
                NormKind::Linf => row
                    .iter()
                    .fold(S::zero(), |a, &v| if v.abs() > a { v.abs() } else { a }),
            };
        }
        acc
    });
    Ok(sum / S::from_f64(rows as f64))
}

/// Scale vector the attack would use for this batch, for diagnostics.
pub fn attack_sigma<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
) -> Result<ScaleVector<S>> {
    let latent = model.forward_f(x)?.detach();
    let rows = x.shape()[0];
    let dim = latent.len() / rows.max(1);
    latent.with_data(|d| perturb::compute_sigma(d, rows, dim))
}
