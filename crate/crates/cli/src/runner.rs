//! Experiment execution: data generation, poisoned pretraining, the
//! fine-tuning sweep, and per-checkpoint measurement, staged through the
//! store so an interrupted run resumes at the first unfinished piece.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};

use lat_core::error::{Error, Result};
use lat_core::eval::{layer_sweep, measure, EvalBundle, RunStamp};
use lat_core::model::{build_model, Checkpoint, ModelSpec};
use lat_core::poison::{
    backdoor_probe_set, default_image_backdoors, default_text_cls_backdoors,
    default_text_gen_backdoors, generate_images, generate_text_cls, generate_text_gen, implant,
    BackdoorSpec, Dataset, TaskKind, IMG_SIDE, SEQ_LEN,
};
use lat_core::train::{self, SweepCell, TrainMode};

use crate::manifest::ExperimentManifest;
use crate::report;
use crate::store::{Row, Store};

/// Caps the sweep worker pool; unset means one worker per core up to 4.
pub const WORKERS_ENV: &str = "LAT_WORKERS";

pub const PRETRAIN_RUN_ID: &str = "pretrain";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// The sweep grid was empty: the store holds data and the pretrained
    /// model only.
    PretrainOnly,
    /// Executed `new_runs` sweep cells, skipping `skipped` already stored.
    Completed { new_runs: usize, skipped: usize },
    /// Every cell of the manifest was already in the store.
    UpToDate,
}

struct Experiment {
    manifest: ExperimentManifest,
    store: Store,
}

fn open_experiment(manifest_path: &Path, force: bool) -> Result<Experiment> {
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "manifest {} does not exist",
            manifest_path.display()
        )));
    }
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest = ExperimentManifest::parse(&text, manifest_path)?;
    let dir = manifest.store_dir(manifest_path);
    if force && dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let store = Store::open_or_create(&dir, ExperimentManifest::fingerprint_of(&text))?;
    Ok(Experiment { manifest, store })
}

struct Materialized {
    train_clean: Dataset<f64>,
    poisoned: Dataset<f64>,
    bundle: EvalBundle<f64>,
}

fn backdoor_specs(m: &ExperimentManifest) -> Result<Vec<BackdoorSpec<f64>>> {
    let mut specs = match m.task_kind()? {
        TaskKind::ImageCls => default_image_backdoors(m.task.classes, m.poison.count),
        TaskKind::TextCls => {
            default_text_cls_backdoors(m.task.vocab, m.poison.count, m.poison.seed)
        }
        TaskKind::TextGen => {
            default_text_gen_backdoors(m.task.vocab, m.poison.count, m.poison.seed)
        }
    };
    specs.truncate(m.poison.specs);
    Ok(specs)
}

fn generate(kind: TaskKind, n: usize, m: &ExperimentManifest, seed: u64) -> Result<Dataset<f64>> {
    match kind {
        TaskKind::ImageCls => generate_images(n, m.task.classes, seed),
        TaskKind::TextCls => generate_text_cls(n, m.task.vocab, seed),
        TaskKind::TextGen => generate_text_gen(n, m.task.vocab, seed),
    }
}

/// Stage 1: build (or reload) the clean train/test sets, the poisoned
/// training set, and the backdoor probe set.
fn materialize_data(exp: &mut Experiment) -> Result<Materialized> {
    let m = &exp.manifest;
    let paths = [
        exp.store.data_path("train.bin"),
        exp.store.data_path("test.bin"),
        exp.store.data_path("poisoned.bin"),
        exp.store.data_path("probes.bin"),
    ];
    let (train_clean, test, poisoned, probes) = if exp.store.registry().data_done {
        (
            Dataset::load(&paths[0])?,
            Dataset::load(&paths[1])?,
            Dataset::load(&paths[2])?,
            Dataset::load(&paths[3])?,
        )
    } else {
        let kind = m.task_kind()?;
        let train_clean = generate(kind, m.task.train_examples, m, m.seed)?;
        let test = generate(kind, m.task.test_examples, m, m.seed + 1)?;
        let specs = backdoor_specs(m)?;
        let poisoned = implant(&train_clean, &specs, m.poison.seed)?;
        let probes = backdoor_probe_set(&specs, &test)?;
        for (ds, path) in [&train_clean, &test, &poisoned, &probes].iter().zip(&paths) {
            ds.save(path)?;
        }
        exp.store.mark_data_done()?;
        (train_clean, test, poisoned, probes)
    };
    Ok(Materialized {
        train_clean,
        poisoned,
        bundle: EvalBundle {
            clean_test: test,
            battery: m.battery_specs()?,
            probes,
            batch_size: m.eval.batch_size,
        },
    })
}

fn model_spec(m: &ExperimentManifest) -> Result<ModelSpec> {
    Ok(match m.task_kind()? {
        TaskKind::ImageCls => ModelSpec::cnn(IMG_SIDE, IMG_SIDE, m.task.classes, m.seed),
        TaskKind::TextCls => ModelSpec::text_classifier(m.task.vocab, SEQ_LEN, 2, m.seed),
        TaskKind::TextGen => ModelSpec::text_generator(m.task.vocab, SEQ_LEN, m.seed),
    })
}

/// Stage 2: poisoned pretraining until the implant goal holds, plus the
/// baseline measurement of the pretrained model.
fn materialize_pretrained(exp: &mut Experiment, data: &Materialized) -> Result<Checkpoint<f64>> {
    let path = exp.store.checkpoint_path("pretrained.bin");
    if exp.store.registry().pretrain_done {
        return Checkpoint::load(&path);
    }
    let m = &exp.manifest;
    let mut model = build_model::<f64>(&model_spec(m)?, 0)?;
    let config = m.pretrain_config()?;
    let checkpoint = train::poison_pretrain(
        &mut model,
        &data.poisoned,
        &config,
        &data.bundle.probes,
        m.implant_goal()?,
        m.eval.batch_size,
    )?;
    checkpoint.save(&path)?;
    if !exp.store.is_run_completed(PRETRAIN_RUN_ID) {
        let record = measure(
            &model,
            &data.bundle,
            RunStamp {
                run_id: PRETRAIN_RUN_ID.to_string(),
                mode: PRETRAIN_RUN_ID.to_string(),
                epsilon: 0.0,
                split_index: 0,
                seed: exp.manifest.seed,
                step: 0,
            },
        )?;
        exp.store
            .complete_run(PRETRAIN_RUN_ID, vec![Row::from_record(&record)])?;
    }
    exp.store.mark_pretrain_done()?;
    Checkpoint::load(&path)
}

fn planned_cells(m: &ExperimentManifest) -> Result<Vec<SweepCell<f64>>> {
    if m.sweep.modes.is_empty() {
        return Ok(Vec::new());
    }
    let modes = m
        .sweep
        .modes
        .iter()
        .map(|name| TrainMode::parse(name))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for &split in &m.sweep.splits {
        let mut base = m.finetune_config(modes[0], 0.0, m.seed)?;
        base.split_index = split;
        cells.extend(train::plan_sweep(
            &base,
            &modes,
            &m.sweep.epsilons,
            &m.sweep.seeds,
        )?);
    }
    Ok(cells)
}

fn worker_count(pending: usize) -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(std::env::VarError::NotPresent) => {
            let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
            Ok(cores.min(4).min(pending.max(1)))
        }
        Err(e) => Err(Error::Config(format!("{WORKERS_ENV}: {e}"))),
        Ok(text) => match text.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(pending.max(1))),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {text:?}"
            ))),
        },
    }
}

/// Train one sweep cell from the pretrained checkpoint and measure every
/// checkpoint it emits.
fn run_cell(
    cell: &SweepCell<f64>,
    start: &Checkpoint<f64>,
    train_clean: &Dataset<f64>,
    bundle: &EvalBundle<f64>,
) -> Result<Vec<Row>> {
    let mut model = start.restore()?;
    let checkpoints = train::train(&mut model, train_clean, &cell.config)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for checkpoint in &checkpoints {
        let snapshot = checkpoint.restore()?;
        let record = measure(
            &snapshot,
            bundle,
            RunStamp {
                run_id: cell.run_id.clone(),
                mode: cell.config.mode.name().to_string(),
                epsilon: cell.config.attack.budget.epsilon,
                split_index: cell.config.split_index,
                seed: cell.config.seed,
                step: checkpoint.step,
            },
        )?;
        rows.push(Row::from_record(&record));
    }
    Ok(rows)
}

fn execute_pending(
    store: &mut Store,
    pending: Vec<SweepCell<f64>>,
    start: &Checkpoint<f64>,
    train_clean: &Dataset<f64>,
    bundle: &EvalBundle<f64>,
) -> Result<()> {
    let total = pending.len();
    let workers = worker_count(total)?;
    let queue = Mutex::new(VecDeque::from(pending));
    let (tx, rx) = mpsc::channel::<(String, Result<Vec<Row>>)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let Some(cell) = queue.lock().unwrap().pop_front() else {
                    return;
                };
                let rows = run_cell(&cell, start, train_clean, bundle);
                if tx.send((cell.run_id, rows)).is_err() {
                    return;
                }
            });
        }
        drop(tx);
        let mut failure = None;
        let mut done = 0usize;
        for (run_id, rows) in rx {
            match rows {
                Ok(rows) if failure.is_none() => {
                    store.complete_run(&run_id, rows)?;
                    done += 1;
                    println!("[{done}/{total}] {run_id}");
                }
                Ok(_) => {}
                Err(e) => {
                    queue.lock().unwrap().clear();
                    failure.get_or_insert(e);
                }
            }
        }
        match failure {
            None => Ok(()),
            Some(e) => Err(e),
        }
    })
}

/// Execute a manifest end to end. Finished stages are skipped, so calling
/// this again on a completed store is a no-op.
pub fn run(manifest_path: &Path, force: bool) -> Result<(PathBuf, RunOutcome)> {
    let mut exp = open_experiment(manifest_path, force)?;
    let data = materialize_data(&mut exp)?;
    let pretrained = materialize_pretrained(&mut exp, &data)?;

    let cells = planned_cells(&exp.manifest)?;
    if cells.is_empty() {
        let fresh = !exp.store.registry().sweep_done;
        exp.store.finalize()?;
        let outcome = if fresh {
            RunOutcome::PretrainOnly
        } else {
            RunOutcome::UpToDate
        };
        return Ok((exp.store.dir().to_path_buf(), outcome));
    }

    let total_cells = cells.len();
    let pending: Vec<SweepCell<f64>> = cells
        .into_iter()
        .filter(|c| !exp.store.is_run_completed(&c.run_id))
        .collect();
    let new_runs = pending.len();
    let skipped = total_cells - new_runs;
    if pending.is_empty() && exp.store.registry().sweep_done {
        return Ok((exp.store.dir().to_path_buf(), RunOutcome::UpToDate));
    }
    execute_pending(
        &mut exp.store,
        pending,
        &pretrained,
        &data.train_clean,
        &data.bundle,
    )?;
    exp.store.finalize()?;
    Ok((
        exp.store.dir().to_path_buf(),
        RunOutcome::Completed { new_runs, skipped },
    ))
}

/// Scan every valid split index for the manifest's architecture, training
/// a latent-perturbation run at each with the budget tied to the local
/// activation scale, and emit the layer-sweep report files.
pub fn sweep_layers(manifest_path: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut exp = open_experiment(manifest_path, false)?;
    let data = materialize_data(&mut exp)?;
    let pretrained = materialize_pretrained(&mut exp, &data)?;

    let model = pretrained.restore()?;
    let lowest = match exp.manifest.task_kind()? {
        TaskKind::ImageCls => 0,
        TaskKind::TextCls | TaskKind::TextGen => 1,
    };
    let splits: Vec<usize> = (lowest..=model.depth()).collect();
    let seeds = if exp.manifest.sweep.seeds.is_empty() {
        vec![exp.manifest.seed]
    } else {
        exp.manifest.sweep.seeds.clone()
    };
    let base = exp
        .manifest
        .finetune_config(TrainMode::Lat, 0.0, exp.manifest.seed)?;
    let rows = layer_sweep(
        &pretrained,
        &data.train_clean,
        &data.bundle,
        &base,
        &splits,
        exp.manifest.sweep.layer_ratio,
        &seeds,
        exp.manifest.eval.batch_size,
    )?;
    report::write_layer_sweep(&exp.store, &rows)
}
