//! Outer training loop: plain fine-tuning plus the three perturbed
//! variants (input-space, latent-space, random latent), poisoned
//! pretraining with an implantation threshold, and sweep planning over
//! (mode, budget, seed) grids.

use std::collections::VecDeque;

use crate::attack::{
    pgd_input_attack, pgd_latent_attack, random_latent_perturbation, AttackConfig, AttackOutcome,
};
use crate::bytes::ByteWriter;
use crate::error::{Error, Result};
use crate::eval;
use crate::fnv64;
use crate::model::{BatchTargets, Checkpoint, SplitModel};
use crate::optim::Sgd;
use crate::poison::{epoch_order, Dataset, TaskKind};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain loss on clean batches.
    Clean,
    /// Loss under an input-space perturbation solved per batch.
    At,
    /// Loss under a latent-space perturbation solved per batch.
    Lat,
    /// Loss under a random latent perturbation drawn per batch.
    Rlp,
}

impl TrainMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(TrainMode::Clean),
            "at" => Ok(TrainMode::At),
            "lat" => Ok(TrainMode::Lat),
            "rlp" => Ok(TrainMode::Rlp),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?}; expected clean, at, lat, or rlp"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Clean => "clean",
            TrainMode::At => "at",
            TrainMode::Lat => "lat",
            TrainMode::Rlp => "rlp",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TrainMode::Clean => 0,
            TrainMode::At => 1,
            TrainMode::Lat => 2,
            TrainMode::Rlp => 3,
        }
    }
}

/// One training run's configuration. `attack` is ignored in clean mode
/// and `split_index` is ignored in input-space mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<S: Scalar> {
    pub mode: TrainMode,
    pub split_index: usize,
    pub attack: AttackConfig<S>,
    pub learning_rate: S,
    pub momentum: S,
    pub batch_size: usize,
    pub epochs: usize,
    /// Checkpoints emitted per epoch, evenly spaced over its batches.
    pub checkpoint_cadence: usize,
    pub seed: u64,
}

impl<S: Scalar> TrainConfig<S> {
    pub fn new(mode: TrainMode, attack: AttackConfig<S>, learning_rate: S, seed: u64) -> Self {
        TrainConfig {
            mode,
            split_index: 0,
            attack,
            learning_rate,
            momentum: S::from_f64(0.9),
            batch_size: 32,
            epochs: 1,
            checkpoint_cadence: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > S::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate.to_f64_lossy()
            )));
        }
        if !(self.momentum >= S::zero() && self.momentum < S::one()) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum.to_f64_lossy()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        if self.checkpoint_cadence == 0 {
            return Err(Error::Config(
                "checkpoint cadence must be positive".to_string(),
            ));
        }
        if self.mode != TrainMode::Clean {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Stable content fingerprint; embedded in checkpoints so a resumed
    /// run can verify it continues the same configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut w = ByteWriter::new();
        w.u8(self.mode.tag());
        w.u64(self.split_index as u64);
        w.u64(self.attack.steps as u64);
        w.f64(self.attack.step_size.to_f64_lossy());
        w.f64(self.attack.budget.epsilon.to_f64_lossy());
        w.str(self.attack.budget.norm.name());
        w.u8(self.attack.budget.normalized as u8);
        w.f64(self.attack.budget.alpha.to_f64_lossy());
        w.u8(matches!(self.attack.policy, crate::attack::IteratePolicy::BestLoss) as u8);
        w.u8(self.attack.sign_step as u8);
        w.u8(self.attack.clip_latent as u8);
        match self.attack.input_range {
            None => w.u8(0),
            Some((lo, hi)) => {
                w.u8(1);
                w.f64(lo.to_f64_lossy());
                w.f64(hi.to_f64_lossy());
            }
        }
        w.u64(self.attack.seed);
        w.f64(self.learning_rate.to_f64_lossy());
        w.f64(self.momentum.to_f64_lossy());
        w.u64(self.batch_size as u64);
        w.u64(self.epochs as u64);
        w.u64(self.checkpoint_cadence as u64);
        w.u64(self.seed);
        fnv64(&w.into_bytes())
    }
}

fn check_data_shape<S: Scalar>(model: &SplitModel<S>, data: &Dataset<S>) -> Result<()> {
    let expect = model.input_example_shape();
    if data.example_shape != expect {
        return Err(Error::Dimension {
            op: "train",
            lhs: data.example_shape.clone(),
            rhs: expect,
        });
    }
    if data.is_empty() {
        return Err(Error::contract("train", "empty training set"));
    }
    Ok(())
}

struct LossTrace {
    recent: VecDeque<f64>,
}

impl LossTrace {
    fn new() -> Self {
        LossTrace {
            recent: VecDeque::with_capacity(8),
        }
    }

    fn push(&mut self, v: f64) {
        if self.recent.len() == 8 {
            self.recent.pop_front();
        }
        self.recent.push_back(v);
    }

    fn snapshot(&self) -> Vec<f64> {
        self.recent.iter().copied().collect()
    }
}

/// One optimizer step on the batch under the configured mode. Returns
/// the (outer) loss value that was stepped on.
fn train_step<S: Scalar>(
    model: &SplitModel<S>,
    opt: &mut Sgd<S>,
    x: &Tensor<S>,
    targets: &BatchTargets<S>,
    config: &TrainConfig<S>,
    input_range: (S, S),
    global_step: u64,
) -> Result<S> {
    // Zero budget collapses every perturbed mode onto the clean path so
    // the parameter trajectories agree bit for bit.
    let perturbed = config.mode != TrainMode::Clean
        && config.attack.budget.epsilon > S::zero();

    let loss = if !perturbed {
        model.loss(x, targets)?
    } else {
        let mut acfg = config.attack.clone();
        acfg.seed = rng::derive_seed(config.attack.seed, stream::ATTACK, global_step);
        match config.mode {
            TrainMode::At => {
                if acfg.input_range.is_none() {
                    acfg.input_range = Some(input_range);
                }
                let outcome = pgd_input_attack(model, x, targets, &acfg)?;
                let adv = perturbed_input(x, &outcome)?;
                model.loss(&adv, targets)?
            }
            TrainMode::Lat => {
                let outcome = pgd_latent_attack(model, x, targets, &acfg)?;
                perturbed_latent_loss(model, x, targets, &outcome)?
            }
            TrainMode::Rlp => {
                let outcome = random_latent_perturbation(model, x, targets, &acfg)?;
                perturbed_latent_loss(model, x, targets, &outcome)?
            }
            TrainMode::Clean => unreachable!(),
        }
    };

    let value = loss.item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    loss.backward()?;
    opt.step(&model.parameters())?;
    Ok(value)
}

/// Rebuild the perturbed input as plain data; inputs carry no parameters,
/// so the outer graph does not need to flow through them.
fn perturbed_input<S: Scalar>(x: &Tensor<S>, outcome: &AttackOutcome<S>) -> Result<Tensor<S>> {
    let mut data = x.data_vec();
    for (v, d) in data.iter_mut().zip(outcome.delta_effective.iter()) {
        *v = *d + *v;
    }
    if let Some((lo, hi)) = outcome.clip_bounds {
        for v in data.iter_mut() {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }
    Tensor::from_vec(&x.shape(), data)
}

/// Outer loss at the perturbed latent. The graph runs through the full
/// model (both sides of the split); the perturbation enters as a
/// constant.
fn perturbed_latent_loss<S: Scalar>(
    model: &SplitModel<S>,
    x: &Tensor<S>,
    targets: &BatchTargets<S>,
    outcome: &AttackOutcome<S>,
) -> Result<Tensor<S>> {
    let z = model.forward_f(x)?;
    let delta = Tensor::from_vec(&z.shape(), outcome.delta_effective.clone())?;
    let mut zp = delta.add(&z)?;
    if let Some((lo, hi)) = outcome.clip_bounds {
        zp = zp.clamp(lo, hi)?;
    }
    let logits = model.forward_g(&zp)?;
    model.loss_from_logits(&logits, x, targets)
}

fn run_loop<S: Scalar>(
    model: &SplitModel<S>,
    data: &Dataset<S>,
    config: &TrainConfig<S>,
    opt: &mut Sgd<S>,
    start_epoch: u64,
    start_batch: u64,
    start_step: u64,
) -> Result<Vec<Checkpoint<S>>> {
    let n = data.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    if config.checkpoint_cadence > batches_per_epoch {
        return Err(Error::Config(format!(
            "checkpoint cadence {} exceeds {batches_per_epoch} batches per epoch",
            config.checkpoint_cadence
        )));
    }
    let fingerprint = config.fingerprint();
    let input_range = data.input_range;
    let mut trace = LossTrace::new();
    let mut checkpoints = Vec::new();
    let mut global_step = start_step;

    for epoch in start_epoch..config.epochs as u64 {
        let mut shuffle = rng::stream_rng(config.seed, stream::EPOCH_SHUFFLE, epoch);
        let order = epoch_order(n, &mut shuffle);
        let skip = if epoch == start_epoch {
            start_batch as usize
        } else {
            0
        };
        for (bi, chunk) in order.chunks(config.batch_size).enumerate().skip(skip) {
            let (x, targets) = data.batch(chunk)?;
            let value = train_step(
                model,
                opt,
                &x,
                &targets,
                config,
                input_range,
                global_step,
            )?;
            let v64 = value.to_f64_lossy();
            trace.push(v64);
            if !v64.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    batch: bi,
                    trace: trace.snapshot(),
                });
            }
            global_step += 1;
            let cadence = config.checkpoint_cadence;
            let fire = (bi + 1) * cadence / batches_per_epoch > bi * cadence / batches_per_epoch;
            if fire {
                checkpoints.push(Checkpoint::capture(
                    model,
                    global_step,
                    epoch,
                    (bi + 1) as u64,
                    config.seed,
                    fingerprint,
                    opt.velocity_state(),
                ));
            }
        }
    }
    Ok(checkpoints)
}

/// Train in place, emitting `epochs * checkpoint_cadence` checkpoints.
pub fn train<S: Scalar>(
    model: &mut SplitModel<S>,
    data: &Dataset<S>,
    config: &TrainConfig<S>,
) -> Result<Vec<Checkpoint<S>>> {
    config.validate()?;
    check_data_shape(model, data)?;
    match config.mode {
        TrainMode::Lat | TrainMode::Rlp => model.set_split(config.split_index)?,
        TrainMode::Clean | TrainMode::At => {}
    }
    let mut opt = Sgd::with_momentum(config.learning_rate, config.momentum);
    run_loop(model, data, config, &mut opt, 0, 0, 0)
}

/// Continue a checkpointed run to the configured epoch count. The config
/// must be the one the checkpoint was produced with; the continuation
/// reproduces the uninterrupted run bit for bit.
pub fn resume<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    data: &Dataset<S>,
    config: &TrainConfig<S>,
) -> Result<(SplitModel<S>, Vec<Checkpoint<S>>)> {
    config.validate()?;
    if checkpoint.config_fingerprint != config.fingerprint() {
        return Err(Error::Config(
            "checkpoint was produced by a different configuration".to_string(),
        ));
    }
    let model = checkpoint.restore()?;
    check_data_shape(&model, data)?;
    let mut opt = Sgd::with_momentum(config.learning_rate, config.momentum);
    opt.restore_velocity(&checkpoint.velocity);
    let n = data.len();
    let batches_per_epoch = n.div_ceil(config.batch_size) as u64;
    // A checkpoint taken at the end of an epoch resumes at the next one.
    let (epoch, batch) = if checkpoint.batch_in_epoch >= batches_per_epoch {
        (checkpoint.epoch + 1, 0)
    } else {
        (checkpoint.epoch, checkpoint.batch_in_epoch)
    };
    let checkpoints = run_loop(
        &model,
        data,
        config,
        &mut opt,
        epoch,
        batch,
        checkpoint.step,
    )?;
    Ok((model, checkpoints))
}

/// Acceptance bar for backdoor implantation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImplantGoal {
    /// Classification: mean probe success rate must reach this value.
    SuccessRate(f64),
    /// Generation: mean payload loss must fall to this value or below.
    PayloadLoss(f64),
}

/// Clean-mode training on poisoned data, verified against the probe set.
/// Returns the final checkpoint once the backdoors took.
pub fn poison_pretrain<S: Scalar>(
    model: &mut SplitModel<S>,
    poisoned: &Dataset<S>,
    config: &TrainConfig<S>,
    probes: &Dataset<S>,
    goal: ImplantGoal,
    eval_batch: usize,
) -> Result<Checkpoint<S>> {
    if config.mode != TrainMode::Clean {
        return Err(Error::Config(
            "poisoned pretraining runs in clean mode".to_string(),
        ));
    }
    let mut checkpoints = train(model, poisoned, config)?;
    let (aggregate, per_spec) = eval::backdoor_metric(model, probes, eval_batch)?;
    match goal {
        ImplantGoal::SuccessRate(min) => {
            let rate = 1.0 - aggregate;
            if rate < min {
                return Err(Error::Implant(format!(
                    "probe success {rate:.3} below {min:.3} after {} epochs; \
                     per-backdoor rates {per_spec:?}",
                    config.epochs
                )));
            }
        }
        ImplantGoal::PayloadLoss(max) => {
            if aggregate > max {
                return Err(Error::Implant(format!(
                    "payload loss {aggregate:.4} above {max:.4} after {} epochs; \
                     per-backdoor losses {per_spec:?}",
                    config.epochs
                )));
            }
        }
    }
    checkpoints
        .pop()
        .ok_or_else(|| Error::contract("poison_pretrain", "run emitted no checkpoints"))
}

/// One planned fine-tuning run.
#[derive(Debug, Clone)]
pub struct SweepCell<S: Scalar> {
    pub run_id: String,
    pub config: TrainConfig<S>,
}

/// Cartesian product of (mode, budget, seed) over the base config, with
/// duplicate detection by config fingerprint.
pub fn plan_sweep<S: Scalar>(
    base: &TrainConfig<S>,
    modes: &[TrainMode],
    epsilons: &[S],
    seeds: &[u64],
) -> Result<Vec<SweepCell<S>>> {
    if modes.is_empty() || epsilons.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one mode, one budget, and one seed".to_string(),
        ));
    }
    let mut cells = Vec::with_capacity(modes.len() * epsilons.len() * seeds.len());
    let mut seen = std::collections::HashSet::new();
    for &mode in modes {
        for &eps in epsilons {
            for &seed in seeds {
                let mut config = base.clone();
                config.mode = mode;
                config.attack.budget.epsilon = eps;
                config.seed = seed;
                config.attack.seed = seed;
                config.validate()?;
                let run_id = format!(
                    "{}-eps{}-split{}-s{seed}",
                    mode.name(),
                    eps.to_f64_lossy(),
                    config.split_index
                );
                if !seen.insert(config.fingerprint()) {
                    return Err(Error::Config(format!(
                        "duplicate run in sweep grid: {run_id}"
                    )));
                }
                cells.push(SweepCell { run_id, config });
            }
        }
    }
    Ok(cells)
}

/// A completed fine-tuning run with its emitted checkpoints.
#[derive(Debug, Clone)]
pub struct SweepRun<S: Scalar> {
    pub run_id: String,
    pub config: TrainConfig<S>,
    pub checkpoints: Vec<Checkpoint<S>>,
}

/// Execute every cell of the sweep from a common starting checkpoint.
pub fn sweep<S: Scalar>(
    start: &Checkpoint<S>,
    data: &Dataset<S>,
    base: &TrainConfig<S>,
    modes: &[TrainMode],
    epsilons: &[S],
    seeds: &[u64],
) -> Result<Vec<SweepRun<S>>> {
    let cells = plan_sweep(base, modes, epsilons, seeds)?;
    let mut runs = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut model = start.restore()?;
        let checkpoints = train(&mut model, data, &cell.config)?;
        runs.push(SweepRun {
            run_id: cell.run_id,
            config: cell.config,
            checkpoints,
        });
    }
    Ok(runs)
}

/// Mean clean latent norm at a split, the reference scale for latent
/// budgets. Measured on the first `sample` examples of the data.
pub fn latent_norm_scale<S: Scalar>(
    start: &Checkpoint<S>,
    data: &Dataset<S>,
    split: usize,
    sample: usize,
) -> Result<S> {
    let take = sample.min(data.len());
    let indices: Vec<usize> = (0..take).collect();
    let (x, _) = data.batch(&indices)?;
    let mut probe = start.restore()?;
    probe.set_split(split)?;
    crate::attack::mean_latent_norm(&probe, &x, crate::perturb::NormKind::L2)
}

/// Chance-level reference for a dataset's backdoor probe success: the
/// rate a label-blind predictor would reach.
pub fn chance_success_rate(task: TaskKind, classes: usize) -> f64 {
    match task {
        TaskKind::ImageCls | TaskKind::TextCls => 1.0 / classes.max(1) as f64,
        TaskKind::TextGen => 0.0,
    }
}
