//! On-disk results store. Layout under the store directory:
//!
//! - `store.toml`: registry (manifest fingerprint, stage flags, completed runs)
//! - `records.csv`: one row per measured checkpoint, fixed schema
//! - `data/`: dataset containers
//! - `checkpoints/`: model snapshots
//! - `reports/`: emitted CSV/SVG figures
//!
//! The record table is append-only while a run executes and is rewritten
//! in canonical (run_id, step) order when the run finalizes, so a finished
//! store is byte-deterministic regardless of worker scheduling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lat_core::error::{Error, Result};
use lat_core::eval::EvalRecord;
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str =
    "run_id,mode,epsilon,split_index,seed,step,metric_kind,clean,robust,backdoor,is_frontier";

/// One measured checkpoint in the fixed CSV schema. `is_frontier` is
/// reserved for report output; store rows leave it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run_id: String,
    pub mode: String,
    pub epsilon: f64,
    pub split_index: usize,
    pub seed: u64,
    pub step: u64,
    pub metric_kind: String,
    pub clean: f64,
    pub robust: f64,
    pub backdoor: f64,
    pub is_frontier: Option<bool>,
}

impl Row {
    pub fn from_record(record: &EvalRecord) -> Self {
        Row {
            run_id: record.stamp.run_id.clone(),
            mode: record.stamp.mode.clone(),
            epsilon: record.stamp.epsilon,
            split_index: record.stamp.split_index,
            seed: record.stamp.seed,
            step: record.stamp.step,
            metric_kind: record.metric_kind.name().to_string(),
            clean: record.clean,
            robust: record.robust,
            backdoor: record.backdoor,
            is_frontier: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let frontier = match self.is_frontier {
            None => "",
            Some(false) => "0",
            Some(true) => "1",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.mode,
            self.epsilon,
            self.split_index,
            self.seed,
            self.step,
            self.metric_kind,
            self.clean,
            self.robust,
            self.backdoor,
            frontier
        )
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format {
                offset: lineno as u64,
                reason: format!("record line {lineno}: expected 11 fields, got {}", fields.len()),
            });
        }
        let bad = |field: &str, value: &str| Error::Format {
            offset: lineno as u64,
            reason: format!("record line {lineno}: bad {field} value {value:?}"),
        };
        Ok(Row {
            run_id: fields[0].to_string(),
            mode: fields[1].to_string(),
            epsilon: fields[2].parse().map_err(|_| bad("epsilon", fields[2]))?,
            split_index: fields[3].parse().map_err(|_| bad("split_index", fields[3]))?,
            seed: fields[4].parse().map_err(|_| bad("seed", fields[4]))?,
            step: fields[5].parse().map_err(|_| bad("step", fields[5]))?,
            metric_kind: fields[6].to_string(),
            clean: fields[7].parse().map_err(|_| bad("clean", fields[7]))?,
            robust: fields[8].parse().map_err(|_| bad("robust", fields[8]))?,
            backdoor: fields[9].parse().map_err(|_| bad("backdoor", fields[9]))?,
            is_frontier: match fields[10] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(bad("is_frontier", other)),
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub schema: u32,
    /// Hex fingerprint of the manifest file that owns this store.
    pub manifest_fingerprint: String,
    pub data_done: bool,
    pub pretrain_done: bool,
    pub sweep_done: bool,
    pub completed_runs: Vec<String>,
}

pub struct Store {
    dir: PathBuf,
    registry: Registry,
    rows: Vec<Row>,
}

pub(crate) fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Store {
    pub fn create(dir: &Path, manifest_fingerprint: u64) -> Result<Self> {
        fs::create_dir_all(dir.join("data"))?;
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("reports"))?;
        let registry = Registry {
            schema: 1,
            manifest_fingerprint: format!("{manifest_fingerprint:016x}"),
            data_done: false,
            pretrain_done: false,
            sweep_done: false,
            completed_runs: Vec::new(),
        };
        let store = Store {
            dir: dir.to_path_buf(),
            registry,
            rows: Vec::new(),
        };
        store.write_registry()?;
        atomic_write(&store.records_path(), &format!("{CSV_HEADER}\n"))?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let registry_text = fs::read_to_string(dir.join("store.toml"))?;
        let registry: Registry = toml::from_str(&registry_text)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join("store.toml").display())))?;
        if registry.schema != 1 {
            return Err(Error::Config(format!(
                "store schema {} is not supported",
                registry.schema
            )));
        }
        let mut store = Store {
            dir: dir.to_path_buf(),
            registry,
            rows: Vec::new(),
        };
        store.rows = store.read_rows()?;
        Ok(store)
    }

    /// Open an existing store owned by the same manifest, or create a
    /// fresh one. A directory produced from a different manifest is
    /// rejected rather than silently mixed.
    pub fn open_or_create(dir: &Path, manifest_fingerprint: u64) -> Result<Self> {
        if dir.join("store.toml").exists() {
            let store = Store::open(dir)?;
            let expect = format!("{manifest_fingerprint:016x}");
            if store.registry.manifest_fingerprint != expect {
                return Err(Error::Config(format!(
                    "store at {} belongs to a different manifest \
                     (fingerprint {} vs {expect}); use --force to replace it",
                    dir.display(),
                    store.registry.manifest_fingerprint
                )));
            }
            Ok(store)
        } else {
            Store::create(dir, manifest_fingerprint)
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn data_path(&self, name: &str) -> PathBuf {
        self.dir.join("data").join(name)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.dir.join("reports").join(name)
    }

    fn records_path(&self) -> PathBuf {
        self.dir.join("records.csv")
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    fn read_rows(&self) -> Result<Vec<Row>> {
        let text = fs::read_to_string(self.records_path())?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(Error::Format {
                    offset: 0,
                    reason: format!("records.csv: bad header {other:?}"),
                })
            }
        }
        lines
            .enumerate()
            .map(|(i, line)| Row::parse(line, i + 2))
            .collect()
    }

    fn write_registry(&self) -> Result<()> {
        let text = toml::to_string_pretty(&self.registry)
            .map_err(|e| Error::Config(format!("registry serialization: {e}")))?;
        atomic_write(&self.dir.join("store.toml"), &text)
    }

    pub fn mark_data_done(&mut self) -> Result<()> {
        self.registry.data_done = true;
        self.write_registry()
    }

    pub fn mark_pretrain_done(&mut self) -> Result<()> {
        self.registry.pretrain_done = true;
        self.write_registry()
    }

    pub fn is_run_completed(&self, run_id: &str) -> bool {
        self.registry.completed_runs.iter().any(|r| r == run_id)
    }

    /// Append a finished run's rows and register its id in one step.
    pub fn complete_run(&mut self, run_id: &str, rows: Vec<Row>) -> Result<()> {
        if self.is_run_completed(run_id) {
            return Err(Error::Config(format!(
                "run {run_id} is already recorded; re-running needs --force"
            )));
        }
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(self.records_path())?;
        for row in &rows {
            writeln!(file, "{}", row.to_csv())?;
        }
        self.rows.extend(rows);
        self.registry.completed_runs.push(run_id.to_string());
        self.registry.completed_runs.sort();
        self.write_registry()
    }

    /// Sort the record table into canonical order and mark the sweep
    /// stage finished. Idempotent.
    pub fn finalize(&mut self) -> Result<()> {
        self.rows
            .sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for row in &self.rows {
            text.push_str(&row.to_csv());
            text.push('\n');
        }
        atomic_write(&self.records_path(), &text)?;
        self.registry.sweep_done = true;
        self.write_registry()
    }
}
