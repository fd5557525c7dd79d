//! Report generation: fixed-schema CSV tables plus standalone SVG figures
//! derived from a store. Output is deterministic: rows are emitted in
//! sorted order and floats use shortest-roundtrip formatting, so the same
//! store always produces the same bytes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lat_core::error::{Error, Result};
use lat_core::eval::{pareto_area, pareto_frontier, AxisBounds, LayerSweepRow, ParetoPoint};

use crate::store::{atomic_write, Row, Store, CSV_HEADER};

pub const DELTA_HEADER: &str = "run_id,step,clean_delta,robust_delta,backdoor_delta,entrenchment";
pub const LAYER_HEADER: &str = "split_index,epsilon,seed,clean,robust,backdoor";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// Clean metric against held-out corruption robustness.
    ParetoNovel,
    /// Clean metric against backdoor resistance.
    ParetoBackdoor,
    /// Per-run metric deltas over fine-tuning steps.
    DeltaOverTime,
    /// Metrics across latent split indices (from the layer scan).
    LayerSweep,
}

impl ReportKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pareto-novel" => Ok(ReportKind::ParetoNovel),
            "pareto-backdoor" => Ok(ReportKind::ParetoBackdoor),
            "delta-over-time" => Ok(ReportKind::DeltaOverTime),
            "layer-sweep" => Ok(ReportKind::LayerSweep),
            other => Err(Error::Config(format!(
                "unknown report kind {other:?}; expected pareto-novel, \
                 pareto-backdoor, delta-over-time, or layer-sweep"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReportKind::ParetoNovel => "pareto-novel",
            ReportKind::ParetoBackdoor => "pareto-backdoor",
            ReportKind::DeltaOverTime => "delta-over-time",
            ReportKind::LayerSweep => "layer-sweep",
        }
    }
}

/// Emit the CSV and SVG for one report kind into the store's reports
/// directory, returning both paths.
pub fn generate(store: &Store, kind: ReportKind) -> Result<(PathBuf, PathBuf)> {
    match kind {
        ReportKind::ParetoNovel => pareto_report(store, kind, |r| r.robust),
        ReportKind::ParetoBackdoor => pareto_report(store, kind, |r| r.backdoor),
        ReportKind::DeltaOverTime => delta_report(store),
        ReportKind::LayerSweep => regenerate_layer_sweep(store),
    }
}

fn write_pair(store: &Store, kind: &str, csv: &str, svg: &str) -> Result<(PathBuf, PathBuf)> {
    let csv_path = store.report_path(&format!("{kind}.csv"));
    let svg_path = store.report_path(&format!("{kind}.svg"));
    atomic_write(&csv_path, csv)?;
    atomic_write(&svg_path, svg)?;
    Ok((csv_path, svg_path))
}

fn sorted_rows(store: &Store) -> Result<Vec<Row>> {
    let mut rows = store.rows().to_vec();
    if rows.is_empty() {
        return Err(Error::contract(
            "report",
            "store has no records; execute the manifest first",
        ));
    }
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
    Ok(rows)
}

// ---------------------------------------------------------------- pareto

fn pareto_report(
    store: &Store,
    kind: ReportKind,
    axis: fn(&Row) -> f64,
) -> Result<(PathBuf, PathBuf)> {
    let mut rows = sorted_rows(store)?;
    let points: Vec<ParetoPoint> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| ParetoPoint {
            clean: r.clean,
            robust: axis(r),
            source: i,
        })
        .collect();
    let frontier = pareto_frontier(&points);
    for (i, row) in rows.iter_mut().enumerate() {
        row.is_frontier = Some(
            frontier
                .iter()
                .any(|p| p.clean == points[i].clean && p.robust == points[i].robust),
        );
    }
    let bounds = AxisBounds::covering(&points)?;
    let degenerate = !(bounds.clean.1 > bounds.clean.0) || !(bounds.robust.1 > bounds.robust.0);
    let area = if degenerate {
        None
    } else {
        Some(pareto_area(&points, &bounds)?)
    };

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    let svg = pareto_svg(kind, &rows, &points, &frontier, area);
    write_pair(store, kind.name(), &csv, &svg)
}

fn pareto_svg(
    kind: ReportKind,
    rows: &[Row],
    points: &[ParetoPoint],
    frontier: &[ParetoPoint],
    area: Option<f64>,
) -> String {
    let y_label = match kind {
        ReportKind::ParetoBackdoor => "backdoor resistance",
        _ => "novel-attack robustness",
    };
    let frame = Frame::fit(
        points.iter().map(|p| p.clean),
        points.iter().map(|p| p.robust),
    );
    let mut canvas = Canvas::new();
    frame.draw_axes(&mut canvas, kind.name(), "clean metric", y_label);

    // One thin polyline per run connects its checkpoints in step order.
    let mut by_run: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        by_run.entry(&row.run_id).or_default().push(i);
    }
    for (_, indices) in &by_run {
        if indices.len() < 2 {
            continue;
        }
        let pts: Vec<(f64, f64)> = indices
            .iter()
            .map(|&i| (frame.x(points[i].clean), frame.y(points[i].robust)))
            .collect();
        let color = mode_color(&rows[indices[0]].mode);
        canvas.polyline(&pts, color, 1.0, 0.45, None);
    }
    for (i, row) in rows.iter().enumerate() {
        canvas.marker(
            &row.mode,
            frame.x(points[i].clean),
            frame.y(points[i].robust),
        );
    }
    if !frontier.is_empty() {
        // Staircase: height over x is the best robust value among points
        // with clean at least x.
        let mut pts = Vec::with_capacity(frontier.len() * 2);
        pts.push((frame.px0, frame.y(frontier[0].robust)));
        for (i, p) in frontier.iter().enumerate() {
            pts.push((frame.x(p.clean), frame.y(p.robust)));
            if let Some(next) = frontier.get(i + 1) {
                pts.push((frame.x(p.clean), frame.y(next.robust)));
            }
        }
        canvas.polyline(&pts, "#000000", 1.2, 0.9, Some("6 3"));
    }
    let note = match area {
        Some(a) => format!("frontier area {} (normalized axes)", fmt_num(a)),
        None => "frontier area n/a (degenerate axis)".to_string(),
    };
    canvas.text(frame.px0, frame.py1 + 38.0, "start", &note);
    let modes: Vec<&str> = mode_order(rows.iter().map(|r| r.mode.as_str()));
    canvas.legend(frame.px1 + 14.0, frame.py0 + 10.0, &modes);
    canvas.finish()
}

// ---------------------------------------------------------------- deltas

fn delta_report(store: &Store) -> Result<(PathBuf, PathBuf)> {
    let rows = sorted_rows(store)?;
    let mut by_run: BTreeMap<&str, Vec<&Row>> = BTreeMap::new();
    for row in &rows {
        by_run.entry(&row.run_id).or_default().push(row);
    }
    // (run, mode, step, deltas, entrenchment) against the run's first row.
    let mut table: Vec<(String, String, u64, f64, f64, f64)> = Vec::new();
    for (run_id, group) in &by_run {
        if group.len() < 2 {
            continue;
        }
        let base = group[0];
        for row in group {
            table.push((
                run_id.to_string(),
                row.mode.clone(),
                row.step,
                row.clean - base.clean,
                row.robust - base.robust,
                row.backdoor - base.backdoor,
            ));
        }
    }
    if table.is_empty() {
        return Err(Error::contract(
            "report",
            "no run has two or more checkpoints; nothing to difference",
        ));
    }
    let mut csv = String::from(DELTA_HEADER);
    csv.push('\n');
    for (run_id, _, step, dc, dr, db) in &table {
        let entrenchment = u8::from(*db < 0.0);
        csv.push_str(&format!(
            "{run_id},{step},{dc},{dr},{db},{entrenchment}\n"
        ));
    }
    let svg = delta_svg(&table);
    write_pair(store, ReportKind::DeltaOverTime.name(), &csv, &svg)
}

fn delta_svg(table: &[(String, String, u64, f64, f64, f64)]) -> String {
    let frame = Frame::fit(
        table.iter().map(|r| r.2 as f64),
        table
            .iter()
            .flat_map(|r| [r.4, r.5, 0.0]),
    );
    let mut canvas = Canvas::new();
    frame.draw_axes(
        &mut canvas,
        "delta-over-time",
        "fine-tuning step",
        "change since first checkpoint",
    );
    let zero_y = frame.y(0.0);
    canvas.line(frame.px0, zero_y, frame.px1, zero_y, "#999999", 0.8, Some("2 3"));

    let mut by_run: BTreeMap<&str, Vec<&(String, String, u64, f64, f64, f64)>> = BTreeMap::new();
    for row in table {
        by_run.entry(&row.0).or_default().push(row);
    }
    for (_, group) in &by_run {
        let color = mode_color(&group[0].1);
        let backdoor: Vec<(f64, f64)> = group
            .iter()
            .map(|r| (frame.x(r.2 as f64), frame.y(r.5)))
            .collect();
        let robust: Vec<(f64, f64)> = group
            .iter()
            .map(|r| (frame.x(r.2 as f64), frame.y(r.4)))
            .collect();
        canvas.polyline(&backdoor, color, 1.4, 0.9, None);
        canvas.polyline(&robust, color, 1.0, 0.6, Some("4 3"));
        for r in group {
            // Entrenchment: the backdoor got stronger under clean tuning.
            if r.5 < 0.0 {
                canvas.circle(frame.x(r.2 as f64), frame.y(r.5), 4.0, "none", "#cc0000");
            }
        }
    }
    canvas.text(
        frame.px0,
        frame.py1 + 38.0,
        "start",
        "solid: backdoor delta, dashed: robustness delta, red ring: entrenchment",
    );
    let modes: Vec<&str> = mode_order(table.iter().map(|r| r.1.as_str()));
    canvas.legend(frame.px1 + 14.0, frame.py0 + 10.0, &modes);
    canvas.finish()
}

// ----------------------------------------------------------- layer sweep

/// One parsed line of the layer-sweep table; `seed` is None for the
/// per-split mean rows.
#[derive(Debug, Clone, PartialEq)]
struct LayerLine {
    split: usize,
    epsilon: f64,
    seed: Option<u64>,
    clean: f64,
    robust: f64,
    backdoor: f64,
}

impl LayerLine {
    fn to_csv(&self) -> String {
        let seed = match self.seed {
            Some(s) => s.to_string(),
            None => "mean".to_string(),
        };
        format!(
            "{},{},{},{},{},{}",
            self.split, self.epsilon, seed, self.clean, self.robust, self.backdoor
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                lineno as u64,
                format!("layer-sweep line {lineno}: expected 6 fields, got {}", fields.len()),
            ));
        }
        let bad = |field: &str, value: &str| {
            Error::format(
                lineno as u64,
                format!("layer-sweep line {lineno}: bad {field} value {value:?}"),
            )
        };
        Ok(LayerLine {
            split: fields[0].parse().map_err(|_| bad("split_index", fields[0]))?,
            epsilon: fields[1].parse().map_err(|_| bad("epsilon", fields[1]))?,
            seed: match fields[2] {
                "mean" => None,
                s => Some(s.parse().map_err(|_| bad("seed", s))?),
            },
            clean: fields[3].parse().map_err(|_| bad("clean", fields[3]))?,
            robust: fields[4].parse().map_err(|_| bad("robust", fields[4]))?,
            backdoor: fields[5].parse().map_err(|_| bad("backdoor", fields[5]))?,
        })
    }
}

/// Persist a finished layer scan as the layer-sweep CSV and SVG.
pub fn write_layer_sweep(store: &Store, rows: &[LayerSweepRow]) -> Result<(PathBuf, PathBuf)> {
    let mut lines = Vec::new();
    for row in rows {
        for record in &row.per_seed {
            lines.push(LayerLine {
                split: row.split_index,
                epsilon: row.epsilon,
                seed: Some(record.stamp.seed),
                clean: record.clean,
                robust: record.robust,
                backdoor: record.backdoor,
            });
        }
        lines.push(LayerLine {
            split: row.split_index,
            epsilon: row.epsilon,
            seed: None,
            clean: row.mean_clean,
            robust: row.mean_robust,
            backdoor: row.mean_backdoor,
        });
    }
    emit_layer_sweep(store, &lines)
}

fn emit_layer_sweep(store: &Store, lines: &[LayerLine]) -> Result<(PathBuf, PathBuf)> {
    let mut csv = String::from(LAYER_HEADER);
    csv.push('\n');
    for line in lines {
        csv.push_str(&line.to_csv());
        csv.push('\n');
    }
    let svg = layer_sweep_svg(lines);
    write_pair(store, ReportKind::LayerSweep.name(), &csv, &svg)
}

fn regenerate_layer_sweep(store: &Store) -> Result<(PathBuf, PathBuf)> {
    let path = store.report_path("layer-sweep.csv");
    if !path.is_file() {
        return Err(Error::contract(
            "report",
            "no layer-sweep table in the store; run sweep-layers first",
        ));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut rows = text.lines();
    match rows.next() {
        Some(h) if h == LAYER_HEADER => {}
        other => {
            return Err(Error::format(0, format!("layer-sweep.csv: bad header {other:?}")));
        }
    }
    let lines = rows
        .enumerate()
        .map(|(i, line)| LayerLine::parse(line, i + 2))
        .collect::<Result<Vec<_>>>()?;
    if lines.is_empty() {
        return Err(Error::contract("report", "layer-sweep table is empty"));
    }
    emit_layer_sweep(store, &lines)
}

fn layer_sweep_svg(lines: &[LayerLine]) -> String {
    let frame = Frame::fit(
        lines.iter().map(|l| l.split as f64),
        lines.iter().flat_map(|l| [l.clean, l.robust, l.backdoor]),
    );
    let mut canvas = Canvas::new();
    frame.draw_axes(
        &mut canvas,
        "layer-sweep",
        "split index",
        "metric value",
    );
    let series: [(&str, fn(&LayerLine) -> f64, &str); 3] = [
        ("clean", |l| l.clean, "#4477aa"),
        ("robust", |l| l.robust, "#228833"),
        ("backdoor", |l| l.backdoor, "#ee6677"),
    ];
    for (slot, &(name, get, color)) in series.iter().enumerate() {
        let means: Vec<(f64, f64)> = lines
            .iter()
            .filter(|l| l.seed.is_none())
            .map(|l| (frame.x(l.split as f64), frame.y(get(l))))
            .collect();
        canvas.polyline(&means, color, 1.4, 0.9, None);
        for &(x, y) in &means {
            canvas.circle(x, y, 3.2, color, color);
        }
        for l in lines.iter().filter(|l| l.seed.is_some()) {
            canvas.circle(frame.x(l.split as f64), frame.y(get(l)), 1.8, color, "none");
        }
        let y = frame.py0 + 10.0 + slot as f64 * 16.0;
        canvas.circle(frame.px1 + 20.0, y - 3.5, 3.2, color, color);
        canvas.text(frame.px1 + 30.0, y, "start", name);
    }
    canvas.text(
        frame.px0,
        frame.py1 + 38.0,
        "start",
        "budget at each split: layer_ratio x mean latent norm; faint dots are per-seed values",
    );
    canvas.finish()
}

// ------------------------------------------------------------ svg pieces

fn mode_color(mode: &str) -> &'static str {
    match mode {
        "clean" => "#4477aa",
        "at" => "#ee6677",
        "lat" => "#228833",
        "rlp" => "#ccbb44",
        "pretrain" => "#222222",
        _ => "#888888",
    }
}

fn mode_order<'a>(modes: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen: Vec<&str> = Vec::new();
    for m in modes {
        if !seen.contains(&m) {
            seen.push(m);
        }
    }
    let rank = |m: &str| match m {
        "pretrain" => 0,
        "clean" => 1,
        "at" => 2,
        "lat" => 3,
        "rlp" => 4,
        _ => 5,
    };
    seen.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.cmp(b)));
    seen
}

/// Number formatting for labels: fixed precision with trailing zeros
/// trimmed, so output is deterministic and compact.
fn fmt_num(v: f64) -> String {
    let mut s = format!("{v:.3}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const WIDTH: f64 = 660.0;
const HEIGHT: f64 = 440.0;

struct Canvas {
    body: String,
}

impl Canvas {
    fn new() -> Self {
        Canvas { body: String::new() }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: &str, width: f64, dash: Option<&str>) {
        let dash = match dash {
            Some(d) => format!(" stroke-dasharray=\"{d}\""),
            None => String::new(),
        };
        self.body.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>\n",
            x0, y0, x1, y1
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64, dash: Option<&str>) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = match dash {
            Some(d) => format!(" stroke-dasharray=\"{d}\""),
            None => String::new(),
        };
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity}\"{dash}/>\n",
            coords.join(" ")
        ));
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, stroke: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"{fill}\" fill-opacity=\"0.8\" stroke=\"{stroke}\"/>\n"
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\" fill-opacity=\"0.8\" stroke=\"{stroke}\"/>\n"
        ));
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        self.body.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{fill}\" fill-opacity=\"0.8\"/>\n",
            coords.join(" ")
        ));
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-family=\"monospace\" font-size=\"11\" fill=\"#222222\">{}</text>\n",
            escape(content)
        ));
    }

    /// Scatter marker shaped by training mode.
    fn marker(&mut self, mode: &str, x: f64, y: f64) {
        let color = mode_color(mode);
        match mode {
            "clean" => self.circle(x, y, 3.2, color, "none"),
            "at" => self.rect(x - 3.0, y - 3.0, 6.0, 6.0, color, "none"),
            "lat" => self.polygon(&[(x, y - 4.0), (x - 3.6, y + 3.0), (x + 3.6, y + 3.0)], color),
            "rlp" => self.polygon(&[(x, y - 4.2), (x + 4.2, y), (x, y + 4.2), (x - 4.2, y)], color),
            _ => self.circle(x, y, 4.2, "none", color),
        }
    }

    fn legend(&mut self, x: f64, y: f64, modes: &[&str]) {
        for (i, mode) in modes.iter().enumerate() {
            let row_y = y + i as f64 * 16.0;
            self.marker(mode, x + 6.0, row_y - 3.5);
            self.text(x + 16.0, row_y, "start", mode);
        }
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Maps data coordinates onto the plot rectangle, with a 5 percent pad
/// and protection against zero-span axes.
struct Frame {
    px0: f64,
    py0: f64,
    px1: f64,
    py1: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if hi > lo {
                let margin = (hi - lo) * 0.05;
                (lo - margin, hi + margin)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let cover = |vals: &mut dyn Iterator<Item = f64>| {
            vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        };
        let (xmin, xmax) = pad(cover(&mut { xs }));
        let (ymin, ymax) = pad(cover(&mut { ys }));
        Frame {
            px0: 64.0,
            py0: 34.0,
            px1: WIDTH - 150.0,
            py1: HEIGHT - 64.0,
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.px0 + (v - self.xmin) / (self.xmax - self.xmin) * (self.px1 - self.px0)
    }

    fn y(&self, v: f64) -> f64 {
        self.py1 - (v - self.ymin) / (self.ymax - self.ymin) * (self.py1 - self.py0)
    }

    fn draw_axes(&self, canvas: &mut Canvas, title: &str, x_label: &str, y_label: &str) {
        canvas.body.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#444444\"/>\n",
            self.px0,
            self.py0,
            self.px1 - self.px0,
            self.py1 - self.py0
        ));
        canvas.text((self.px0 + self.px1) / 2.0, self.py0 - 12.0, "middle", title);
        canvas.text((self.px0 + self.px1) / 2.0, self.py1 + 26.0, "middle", x_label);
        canvas.body.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\" fill=\"#222222\" transform=\"rotate(-90 {:.2} {:.2})\">{}</text>\n",
            self.px0 - 44.0,
            (self.py0 + self.py1) / 2.0,
            self.px0 - 44.0,
            (self.py0 + self.py1) / 2.0,
            escape(y_label)
        ));
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.xmin + t * (self.xmax - self.xmin);
            let yv = self.ymin + t * (self.ymax - self.ymin);
            let xp = self.x(xv);
            let yp = self.y(yv);
            canvas.line(xp, self.py1, xp, self.py1 + 4.0, "#444444", 1.0, None);
            canvas.text(xp, self.py1 + 15.0, "middle", &fmt_num(xv));
            canvas.line(self.px0 - 4.0, yp, self.px0, yp, "#444444", 1.0, None);
            canvas.text(self.px0 - 7.0, yp + 3.5, "end", &fmt_num(yv));
        }
    }
}
