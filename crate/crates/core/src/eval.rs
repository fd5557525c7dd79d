//! Measurement: accuracy, ROC-AUC, per-token losses, the three-way
//! (clean / corruption-robust / backdoor) record, Pareto frontier and
//! area, and fine-tuning drift series.
//!
//! Orientation convention: every aggregate stored in an [`EvalRecord`]
//! is larger-is-better. Losses that are better when small (desirable
//! generation loss) are negated on ingestion; losses that are better when
//! large (payload loss, undesirable-stream loss) are kept raw; backdoor
//! success rates are stored as one minus the rate.

use crate::error::{Error, Result};
use crate::heldout::{self, CorruptionSpec};
use crate::model::{Checkpoint, SplitModel};
use crate::train::TrainConfig;
use crate::poison::{Dataset, StreamKind, TaskKind, PAD_TOKEN};
use crate::scalar::Scalar;

/// What the clean coordinate of a record means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    RocAuc,
    NegTokenLoss,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::RocAuc => "roc-auc",
            MetricKind::NegTokenLoss => "neg-token-loss",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "accuracy" => Ok(MetricKind::Accuracy),
            "roc-auc" => Ok(MetricKind::RocAuc),
            "neg-token-loss" => Ok(MetricKind::NegTokenLoss),
            other => Err(Error::Config(format!("unknown metric kind {other:?}"))),
        }
    }
}

/// Identity of one measurement: which run, which checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStamp {
    pub run_id: String,
    pub mode: String,
    pub epsilon: f64,
    pub split_index: usize,
    pub seed: u64,
    pub step: u64,
}

/// One measured checkpoint. All three headline metrics are oriented
/// larger-is-better; `extra` holds raw named diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub stamp: RunStamp,
    pub metric_kind: MetricKind,
    pub clean: f64,
    pub robust: f64,
    pub backdoor: f64,
    pub robust_per_kind: Vec<(String, f64)>,
    /// Raw per-backdoor diagnostic: probe success rate for classification,
    /// payload loss for generation.
    pub backdoor_per_spec: Vec<f64>,
    pub extra: Vec<(String, f64)>,
}

// ------------------------------------------------------------ primitives

/// Rank-based (Mann-Whitney) ROC-AUC with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("roc_auc", "scores must be finite"));
    }
    let np = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::contract(
            "roc_auc",
            "both classes must be present",
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over runs of tied scores (1-based ranks).
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let auc = (pos_rank_sum - (np * (np + 1)) as f64 / 2.0) / (np as f64 * nn as f64);
    Ok(auc)
}

fn batched<'a>(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
    let step = batch.max(1);
    (0..n).step_by(step).map(move |s| s..(s + step).min(n))
}

/// Argmax class prediction for each dataset row, evaluated in batches.
pub fn predictions<S: Scalar>(
    model: &SplitModel<S>,
    ds: &Dataset<S>,
    batch: usize,
) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for range in batched(ds.len(), batch) {
        let (x, _) = ds.batch(&all[range])?;
        let logits = model.forward(&x)?;
        let shape = logits.shape();
        let (rows, c) = (shape[0], shape[1]);
        logits.with_data(|v| {
            for r in 0..rows {
                let row = &v[r * c..(r + 1) * c];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                preds.push(best);
            }
        });
    }
    Ok(preds)
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy_on<S: Scalar>(
    model: &SplitModel<S>,
    ds: &Dataset<S>,
    batch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("accuracy_on", "empty dataset"));
    }
    let preds = predictions(model, ds, batch)?;
    let hits = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// ROC-AUC of the binary classifier score (logit of class 1 minus logit
/// of class 0) against the dataset labels.
pub fn auc_on<S: Scalar>(model: &SplitModel<S>, ds: &Dataset<S>, batch: usize) -> Result<f64> {
    if ds.classes != 2 {
        return Err(Error::contract(
            "auc_on",
            format!("need a binary task, got {} classes", ds.classes),
        ));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut scores = Vec::with_capacity(ds.len());
    for range in batched(ds.len(), batch) {
        let (x, _) = ds.batch(&all[range])?;
        let logits = model.forward(&x)?;
        let c = logits.shape()[1];
        logits.with_data(|v| {
            for r in 0..v.len() / c {
                scores.push((v[r * c + 1] - v[r * c]).to_f64_lossy());
            }
        });
    }
    let labels: Vec<bool> = ds.labels.iter().map(|&l| l == 1).collect();
    roc_auc(&scores, &labels)
}

/// Which next-token positions to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSet {
    /// Every position whose target is not the pad token.
    AllNonPad,
    /// Only positions inside each example's recorded payload span.
    PayloadSpan,
}

/// Mean per-token cross-entropy over the selected rows and positions.
pub fn mean_token_loss<S: Scalar>(
    model: &SplitModel<S>,
    ds: &Dataset<S>,
    indices: &[usize],
    set: TokenSet,
    batch: usize,
) -> Result<f64> {
    if ds.task != TaskKind::TextGen {
        return Err(Error::contract(
            "mean_token_loss",
            "per-token losses apply to generation tasks",
        ));
    }
    if indices.is_empty() {
        return Err(Error::contract("mean_token_loss", "no rows selected"));
    }
    let seq = ds.example_shape[0];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for range in batched(indices.len(), batch) {
        let rows = &indices[range];
        let (x, _) = ds.batch(rows)?;
        let logits = model.forward(&x)?;
        let c = logits.shape()[1];
        logits.with_data(|v| {
            for (bi, &row) in rows.iter().enumerate() {
                let toks: Vec<usize> = ds
                    .example(row)
                    .iter()
                    .map(|&t| t.to_f64_lossy().round() as usize)
                    .collect();
                let span = ds.meta[row].payload_span;
                for p in 1..seq {
                    let scored = match set {
                        TokenSet::AllNonPad => toks[p] != PAD_TOKEN,
                        TokenSet::PayloadSpan => {
                            matches!(span, Some((a, b)) if (a..b).contains(&p))
                        }
                    };
                    if !scored {
                        continue;
                    }
                    let lrow = &v[(bi * seq + p - 1) * c..(bi * seq + p) * c];
                    let m = lrow
                        .iter()
                        .fold(lrow[0], |a, &x| if x > a { x } else { a });
                    let z: f64 = lrow
                        .iter()
                        .map(|&x| (x - m).to_f64_lossy().exp())
                        .sum();
                    total += z.ln() - (lrow[toks[p]] - m).to_f64_lossy();
                    count += 1;
                }
            }
        });
    }
    if count == 0 {
        return Err(Error::contract(
            "mean_token_loss",
            "no scorable token positions in selection",
        ));
    }
    Ok(total / count as f64)
}

/// The headline clean metric for the task: accuracy for images, ROC-AUC
/// for binary text classification, negated desirable-stream loss for
/// generation.
pub fn clean_metric<S: Scalar>(
    model: &SplitModel<S>,
    ds: &Dataset<S>,
    batch: usize,
) -> Result<(f64, MetricKind)> {
    match ds.task {
        TaskKind::ImageCls => Ok((accuracy_on(model, ds, batch)?, MetricKind::Accuracy)),
        TaskKind::TextCls => Ok((auc_on(model, ds, batch)?, MetricKind::RocAuc)),
        TaskKind::TextGen => {
            let des = ds.stream_indices(StreamKind::Desirable);
            let loss = mean_token_loss(model, ds, &des, TokenSet::AllNonPad, batch)?;
            Ok((-loss, MetricKind::NegTokenLoss))
        }
    }
}

/// The metric the corruption battery reports per kind: classification
/// accuracy / AUC on corrupted inputs; for generation, the raw loss on
/// the corrupted undesirable stream (higher means the model still
/// refuses the undesirable continuation under distribution shift).
pub fn robust_metric<S: Scalar>(
    model: &SplitModel<S>,
    ds: &Dataset<S>,
    batch: usize,
) -> Result<f64> {
    match ds.task {
        TaskKind::ImageCls => accuracy_on(model, ds, batch),
        TaskKind::TextCls => auc_on(model, ds, batch),
        TaskKind::TextGen => {
            let und = ds.stream_indices(StreamKind::Undesirable);
            mean_token_loss(model, ds, &und, TokenSet::AllNonPad, batch)
        }
    }
}

/// Backdoor strength from a probe set. Returns the oriented aggregate
/// (larger is safer) plus the raw per-backdoor diagnostics.
pub fn backdoor_metric<S: Scalar>(
    model: &SplitModel<S>,
    probes: &Dataset<S>,
    batch: usize,
) -> Result<(f64, Vec<f64>)> {
    if probes.is_empty() {
        return Err(Error::contract("backdoor_metric", "empty probe set"));
    }
    let spec_count = probes
        .meta
        .iter()
        .filter_map(|m| m.poisoned_by)
        .max()
        .map_or(0, |m| m + 1);
    if spec_count == 0 {
        return Err(Error::contract(
            "backdoor_metric",
            "probe set carries no backdoor ids",
        ));
    }
    match probes.task {
        TaskKind::ImageCls | TaskKind::TextCls => {
            let preds = predictions(model, probes, batch)?;
            let mut hits = vec![0usize; spec_count];
            let mut totals = vec![0usize; spec_count];
            for (i, m) in probes.meta.iter().enumerate() {
                let spec = m.poisoned_by.ok_or_else(|| {
                    Error::contract("backdoor_metric", format!("probe {i} has no backdoor id"))
                })?;
                let target = m.attack_target.ok_or_else(|| {
                    Error::contract("backdoor_metric", format!("probe {i} has no target"))
                })?;
                totals[spec] += 1;
                if preds[i] == target {
                    hits[spec] += 1;
                }
            }
            let rates: Vec<f64> = hits
                .iter()
                .zip(&totals)
                .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
                .collect();
            let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
            Ok((1.0 - mean_rate, rates))
        }
        TaskKind::TextGen => {
            let mut losses = Vec::with_capacity(spec_count);
            for spec in 0..spec_count {
                let rows: Vec<usize> = (0..probes.len())
                    .filter(|&i| probes.meta[i].poisoned_by == Some(spec))
                    .collect();
                losses.push(mean_token_loss(
                    model,
                    probes,
                    &rows,
                    TokenSet::PayloadSpan,
                    batch,
                )?);
            }
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            Ok((mean, losses))
        }
    }
}

// --------------------------------------------------------------- measure

/// Everything needed to measure one checkpoint on one task.
#[derive(Debug, Clone)]
pub struct EvalBundle<S: Scalar> {
    pub clean_test: Dataset<S>,
    pub battery: Vec<CorruptionSpec>,
    pub probes: Dataset<S>,
    pub batch_size: usize,
}

/// Measure one model against the bundle. Read-only: parameters are
/// bit-identical before and after.
pub fn measure<S: Scalar>(
    model: &SplitModel<S>,
    bundle: &EvalBundle<S>,
    stamp: RunStamp,
) -> Result<EvalRecord> {
    let batch = bundle.batch_size;
    let (clean, metric_kind) = clean_metric(model, &bundle.clean_test, batch)?;
    let report = heldout::evaluate_battery(model, &bundle.clean_test, &bundle.battery, batch)?;
    let (backdoor, backdoor_per_spec) = backdoor_metric(model, &bundle.probes, batch)?;

    let mut extra = Vec::new();
    match bundle.clean_test.task {
        TaskKind::ImageCls => {
            extra.push(("clean_accuracy".to_string(), clean));
        }
        TaskKind::TextCls => {
            extra.push(("clean_auc".to_string(), clean));
            extra.push((
                "clean_accuracy".to_string(),
                accuracy_on(model, &bundle.clean_test, batch)?,
            ));
        }
        TaskKind::TextGen => {
            let ds = &bundle.clean_test;
            let des = ds.stream_indices(StreamKind::Desirable);
            let und = ds.stream_indices(StreamKind::Undesirable);
            extra.push((
                "desirable_loss".to_string(),
                mean_token_loss(model, ds, &des, TokenSet::AllNonPad, batch)?,
            ));
            extra.push((
                "undesirable_loss".to_string(),
                mean_token_loss(model, ds, &und, TokenSet::AllNonPad, batch)?,
            ));
            extra.push(("payload_loss".to_string(), backdoor));
        }
    }

    let record = EvalRecord {
        stamp,
        metric_kind,
        clean,
        robust: report.aggregate,
        backdoor,
        robust_per_kind: report.per_kind,
        backdoor_per_spec,
        extra,
    };
    for (what, v) in [
        ("clean", record.clean),
        ("robust", record.robust),
        ("backdoor", record.backdoor),
    ] {
        if !v.is_finite() {
            return Err(Error::contract(
                "measure",
                format!("{what} metric is not finite"),
            ));
        }
    }
    Ok(record)
}

// ---------------------------------------------------------------- pareto

/// One candidate tradeoff; `source` indexes the record list the point
/// was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParetoPoint {
    pub clean: f64,
    pub robust: f64,
    pub source: usize,
}

/// Which larger-is-better y coordinate to trade against clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointAxis {
    Robust,
    Backdoor,
}

pub fn pareto_points(records: &[EvalRecord], axis: PointAxis) -> Vec<ParetoPoint> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| ParetoPoint {
            clean: r.clean,
            robust: match axis {
                PointAxis::Robust => r.robust,
                PointAxis::Backdoor => r.backdoor,
            },
            source: i,
        })
        .collect()
}

/// Maximal points under weak dominance (a dominates b when a is at least
/// as good on both axes and strictly better on one). Exact coordinate
/// duplicates are kept once; output is sorted by the clean coordinate.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut uniq: Vec<ParetoPoint> = Vec::with_capacity(points.len());
    for p in points {
        if !uniq.iter().any(|q| q.clean == p.clean && q.robust == p.robust) {
            uniq.push(*p);
        }
    }
    uniq.sort_by(|a, b| {
        b.clean
            .total_cmp(&a.clean)
            .then(b.robust.total_cmp(&a.robust))
    });
    let mut out: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for p in uniq {
        if p.robust > best {
            best = p.robust;
            out.push(p);
        }
    }
    out.reverse();
    out
}

/// Min/max normalization bounds shared by every method being compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBounds {
    pub clean: (f64, f64),
    pub robust: (f64, f64),
}

impl AxisBounds {
    /// Tight bounds covering a point cloud.
    pub fn covering(points: &[ParetoPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("axis_bounds", "no points"));
        }
        let fold = |get: fn(&ParetoPoint) -> f64| {
            points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(get(p)), hi.max(get(p)))
            })
        };
        Ok(AxisBounds {
            clean: fold(|p| p.clean),
            robust: fold(|p| p.robust),
        })
    }
}

fn normalize(v: f64, (lo, hi): (f64, f64), what: &str) -> Result<f64> {
    if !(hi > lo) {
        return Err(Error::contract(
            "pareto_area",
            format!("degenerate {what} bounds [{lo}, {hi}]"),
        ));
    }
    if v < lo || v > hi {
        return Err(Error::contract(
            "pareto_area",
            format!("{what} value {v} outside bounds [{lo}, {hi}]"),
        ));
    }
    Ok((v - lo) / (hi - lo))
}

/// Area under the frontier staircase inside the normalized unit box:
/// the integral over x in [0,1] of max robust over points with clean
/// at least x (zero beyond the best clean point). Dominated points do
/// not change the value, so any point set is accepted.
pub fn pareto_area(points: &[ParetoPoint], bounds: &AxisBounds) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::contract("pareto_area", "no points"));
    }
    let mut norm: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            Ok((
                normalize(p.clean, bounds.clean, "clean")?,
                normalize(p.robust, bounds.robust, "robust")?,
            ))
        })
        .collect::<Result<_>>()?;
    norm.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Suffix max of the y coordinate gives the staircase height.
    let mut heights = vec![0.0f64; norm.len()];
    let mut best = f64::NEG_INFINITY;
    for i in (0..norm.len()).rev() {
        best = best.max(norm[i].1);
        heights[i] = best;
    }
    let mut area = norm[0].0 * heights[0];
    for i in 1..norm.len() {
        area += (norm[i].0 - norm[i - 1].0) * heights[i];
    }
    Ok(area)
}

// ---------------------------------------------------------------- deltas

/// Signed change of each metric relative to the run's first checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRecord {
    pub step: u64,
    pub clean: f64,
    pub robust: f64,
    pub backdoor: f64,
    /// The backdoor got stronger during clean fine-tuning.
    pub entrenchment: bool,
}

/// Per-checkpoint deltas against the step-ordered first record. Negative
/// values signal harm from fine-tuning; a negative backdoor delta means
/// the backdoor strengthened even though training saw only clean data.
pub fn robustness_delta(records: &[EvalRecord]) -> Result<Vec<DeltaRecord>> {
    if records.len() < 2 {
        return Err(Error::contract(
            "robustness_delta",
            "need at least two checkpoints",
        ));
    }
    let mut order: Vec<&EvalRecord> = records.iter().collect();
    order.sort_by_key(|r| r.stamp.step);
    let base = order[0];
    Ok(order
        .iter()
        .map(|r| {
            let backdoor = r.backdoor - base.backdoor;
            DeltaRecord {
                step: r.stamp.step,
                clean: r.clean - base.clean,
                robust: r.robust - base.robust,
                backdoor,
                entrenchment: backdoor < 0.0,
            }
        })
        .collect())
}

// ----------------------------------------------------------- layer sweep

/// One split's aggregate over seeds when scanning the perturbation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSweepRow {
    pub split_index: usize,
    /// Budget used at this split: `ratio` times the local latent scale.
    pub epsilon: f64,
    pub mean_clean: f64,
    pub mean_robust: f64,
    pub mean_backdoor: f64,
    pub per_seed: Vec<EvalRecord>,
}

/// Latent-perturbation training repeated at each candidate split, with
/// the budget tied to the activation scale there so layers of different
/// magnitude see comparable pressure. Each (split, seed) cell trains from
/// `start` and measures the final state.
pub fn layer_sweep<S: Scalar>(
    start: &Checkpoint<S>,
    train_data: &Dataset<S>,
    bundle: &EvalBundle<S>,
    base: &TrainConfig<S>,
    splits: &[usize],
    ratio: f64,
    seeds: &[u64],
    norm_sample: usize,
) -> Result<Vec<LayerSweepRow>> {
    if splits.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "layer sweep needs at least one split and one seed".to_string(),
        ));
    }
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Config(format!(
            "budget ratio must be positive and finite, got {ratio}"
        )));
    }
    let mut rows = Vec::with_capacity(splits.len());
    for &split in splits {
        let scale = crate::train::latent_norm_scale(start, train_data, split, norm_sample)?
            .to_f64_lossy();
        let epsilon = ratio * scale;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.mode = crate::train::TrainMode::Lat;
            config.split_index = split;
            config.attack.budget.epsilon = S::from_f64(epsilon);
            config.seed = seed;
            config.attack.seed = seed;
            let mut model = start.restore()?;
            let checkpoints = crate::train::train(&mut model, train_data, &config)?;
            let step = checkpoints.last().map(|c| c.step).unwrap_or(0);
            let stamp = RunStamp {
                run_id: format!("lat-eps{epsilon}-split{split}-s{seed}"),
                mode: "lat".to_string(),
                epsilon,
                split_index: split,
                seed,
                step,
            };
            per_seed.push(measure(&model, bundle, stamp)?);
        }
        let k = per_seed.len() as f64;
        rows.push(LayerSweepRow {
            split_index: split,
            epsilon,
            mean_clean: per_seed.iter().map(|r| r.clean).sum::<f64>() / k,
            mean_robust: per_seed.iter().map(|r| r.robust).sum::<f64>() / k,
            mean_backdoor: per_seed.iter().map(|r| r.backdoor).sum::<f64>() / k,
            per_seed,
        });
    }
    Ok(rows)
}
