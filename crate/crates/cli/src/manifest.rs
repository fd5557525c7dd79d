//! Experiment manifests: a strict TOML schema that pins every knob of an
//! experiment, so one file determines every byte of output.

use std::path::{Path, PathBuf};

use lat_core::attack::{AttackConfig, IteratePolicy};
use lat_core::error::{Error, Result};
use lat_core::heldout::{CorruptionSpec, IMAGE_KINDS, MAX_SEVERITY, TEXT_KINDS};
use lat_core::perturb::{NormKind, PerturbationBudget};
use lat_core::poison::TaskKind;
use lat_core::train::{ImplantGoal, TrainConfig, TrainMode};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema: u32,
    pub seed: u64,
    /// Store directory, resolved relative to the manifest file.
    pub output_dir: String,
    pub task: TaskSection,
    pub poison: PoisonSection,
    pub pretrain: TrainSection,
    pub finetune: FinetuneSection,
    pub sweep: SweepSection,
    pub battery: BatterySection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// One of `image-cls`, `text-cls`, `text-gen`.
    pub kind: String,
    pub train_examples: usize,
    pub test_examples: usize,
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSection {
    /// How many of the task's default backdoors to implant.
    pub specs: usize,
    /// Poisoned copies per backdoor.
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_cadence")]
    pub checkpoint_cadence: usize,
    /// `success-rate` (classification) or `payload-loss` (generation).
    pub goal_kind: String,
    pub goal_value: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_cadence")]
    pub checkpoint_cadence: usize,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub sign_step: bool,
    #[serde(default = "default_true")]
    pub clip_latent: bool,
    #[serde(default = "default_true")]
    pub best_loss: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Empty grid is allowed: the run stops after pretraining.
    pub modes: Vec<String>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub splits: Vec<usize>,
    /// Budget per split in the layer scan, as a fraction of the mean
    /// latent norm there.
    #[serde(default = "default_layer_ratio")]
    pub layer_ratio: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatterySection {
    pub severities: Vec<u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_cadence() -> usize {
    1
}

fn default_norm() -> String {
    "l2".to_string()
}

fn default_true() -> bool {
    true
}

fn default_layer_ratio() -> f64 {
    0.1
}

impl ExperimentManifest {
    /// Parse and validate a manifest file. Parse errors carry the TOML
    /// line and field; validation errors name the offending field.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Parse manifest text; `origin` names the file in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let manifest: ExperimentManifest = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Config(format!(
                "schema: expected 1, got {}",
                self.schema
            )));
        }
        let task = self.task_kind()?;
        if self.task.train_examples == 0 || self.task.test_examples == 0 {
            return Err(Error::Config(
                "task: train_examples and test_examples must be positive".to_string(),
            ));
        }
        match task {
            TaskKind::ImageCls => {
                if !(2..=8).contains(&self.task.classes) {
                    return Err(Error::Config(format!(
                        "task.classes: image task supports 2..=8 classes, got {}",
                        self.task.classes
                    )));
                }
            }
            TaskKind::TextCls => {
                if self.task.vocab < 20 {
                    return Err(Error::Config(format!(
                        "task.vocab: text-cls needs at least 20 tokens, got {}",
                        self.task.vocab
                    )));
                }
            }
            TaskKind::TextGen => {
                if self.task.vocab < 40 {
                    return Err(Error::Config(format!(
                        "task.vocab: text-gen needs at least 40 tokens, got {}",
                        self.task.vocab
                    )));
                }
            }
        }
        if self.poison.specs == 0 || self.poison.specs > 8 {
            return Err(Error::Config(format!(
                "poison.specs: each task ships 8 default backdoors, got {}",
                self.poison.specs
            )));
        }
        if self.poison.count == 0 {
            return Err(Error::Config(
                "poison.count: need at least one poisoned copy per backdoor".to_string(),
            ));
        }
        self.implant_goal()?;
        self.pretrain_config().and_then(|c| c.validate())?;
        let mut modes = Vec::with_capacity(self.sweep.modes.len());
        for name in &self.sweep.modes {
            modes.push(TrainMode::parse(name)?);
        }
        if task != TaskKind::ImageCls && modes.contains(&TrainMode::At) {
            return Err(Error::Config(
                "sweep.modes: input-space attacks need continuous inputs; \
                 token tasks support clean, lat, and rlp"
                    .to_string(),
            ));
        }
        let probe_mode = modes
            .iter()
            .copied()
            .find(|m| *m != TrainMode::Clean)
            .unwrap_or(TrainMode::Clean);
        let probe_eps = self.sweep.epsilons.iter().copied().fold(0.0, f64::max);
        self.finetune_config(probe_mode, probe_eps, self.seed)
            .and_then(|c| c.validate())?;
        if !self.sweep.modes.is_empty()
            && (self.sweep.epsilons.is_empty()
                || self.sweep.seeds.is_empty()
                || self.sweep.splits.is_empty())
        {
            return Err(Error::Config(
                "sweep: a non-empty mode list needs epsilons, seeds, and splits".to_string(),
            ));
        }
        for &eps in &self.sweep.epsilons {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(Error::Config(format!(
                    "sweep.epsilons: budgets must be finite and non-negative, got {eps}"
                )));
            }
        }
        if !(self.sweep.layer_ratio > 0.0) || !self.sweep.layer_ratio.is_finite() {
            return Err(Error::Config(format!(
                "sweep.layer_ratio: must be positive and finite, got {}",
                self.sweep.layer_ratio
            )));
        }
        if self.battery.severities.is_empty() {
            return Err(Error::Config(
                "battery.severities: need at least one severity".to_string(),
            ));
        }
        for &s in &self.battery.severities {
            if s > MAX_SEVERITY {
                return Err(Error::Config(format!(
                    "battery.severities: maximum severity is {MAX_SEVERITY}, got {s}"
                )));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config(
                "eval.batch_size: must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        TaskKind::parse(&self.task.kind)
    }

    pub fn implant_goal(&self) -> Result<ImplantGoal> {
        match self.pretrain.goal_kind.as_str() {
            "success-rate" => Ok(ImplantGoal::SuccessRate(self.pretrain.goal_value)),
            "payload-loss" => Ok(ImplantGoal::PayloadLoss(self.pretrain.goal_value)),
            other => Err(Error::Config(format!(
                "pretrain.goal_kind: expected success-rate or payload-loss, got {other:?}"
            ))),
        }
    }

    /// Clean-mode configuration for the poisoned pretraining stage.
    pub fn pretrain_config(&self) -> Result<TrainConfig<f64>> {
        let attack = AttackConfig::new(0, 0.0, PerturbationBudget::l2(0.0), self.seed);
        let mut cfg = TrainConfig::new(
            TrainMode::Clean,
            attack,
            self.pretrain.learning_rate,
            self.seed,
        );
        cfg.momentum = self.pretrain.momentum;
        cfg.batch_size = self.pretrain.batch_size;
        cfg.epochs = self.pretrain.epochs;
        cfg.checkpoint_cadence = self.pretrain.checkpoint_cadence;
        Ok(cfg)
    }

    /// Base fine-tuning configuration for one sweep cell.
    pub fn finetune_config(&self, mode: TrainMode, epsilon: f64, seed: u64) -> Result<TrainConfig<f64>> {
        let f = &self.finetune;
        let norm = NormKind::parse(&f.norm)?;
        let mut budget = PerturbationBudget {
            epsilon,
            norm,
            normalized: false,
            alpha: 0.0,
        };
        if f.normalized {
            budget = budget.with_normalized(f.alpha);
        }
        let mut attack = AttackConfig::new(f.attack_steps, f.attack_step_size, budget, seed);
        attack.policy = if f.best_loss {
            IteratePolicy::BestLoss
        } else {
            IteratePolicy::Last
        };
        attack.sign_step = f.sign_step;
        attack.clip_latent = f.clip_latent;
        let mut cfg = TrainConfig::new(mode, attack, f.learning_rate, seed);
        cfg.momentum = f.momentum;
        cfg.batch_size = f.batch_size;
        cfg.epochs = f.epochs;
        cfg.checkpoint_cadence = f.checkpoint_cadence;
        Ok(cfg)
    }

    /// The held-out battery: every applicable corruption kind at each
    /// configured severity.
    pub fn battery_specs(&self) -> Result<Vec<CorruptionSpec>> {
        let task = self.task_kind()?;
        let kinds: &[_] = match task {
            TaskKind::ImageCls => &IMAGE_KINDS,
            TaskKind::TextCls | TaskKind::TextGen => &TEXT_KINDS,
        };
        let mut specs = Vec::with_capacity(kinds.len() * self.battery.severities.len());
        for &kind in kinds {
            for &severity in &self.battery.severities {
                specs.push(CorruptionSpec::new(kind, severity, self.battery.seed));
            }
        }
        Ok(specs)
    }

    /// Store directory for this manifest, relative paths anchored at the
    /// manifest's parent directory.
    pub fn store_dir(&self, manifest_path: &Path) -> PathBuf {
        let dir = Path::new(&self.output_dir);
        if dir.is_absolute() {
            dir.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(dir)
        }
    }

    /// Content fingerprint of the manifest file bytes; stores refuse to
    /// mix output from different manifests.
    pub fn fingerprint_of(text: &str) -> u64 {
        lat_core::fnv64(text.as_bytes())
    }
}
