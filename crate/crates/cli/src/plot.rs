//! Static SVG plots with CSV sidecars holding exactly the plotted numbers.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use sam_core::harness::{mean_std, read_records, ReportGrid, ResultRecord};

use crate::{ensure_dir, io_err, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Per-task metric over the stream (records JSONL).
    Trajectory,
    /// Final Class-IL / Task-IL per configuration (records JSONL).
    AblationBars,
    /// Accuracy against ε (robustness CSV).
    RobustnessCurve,
}

impl PlotKind {
    fn stem(self) -> &'static str {
        match self {
            PlotKind::Trajectory => "trajectory",
            PlotKind::AblationBars => "ablation-bars",
            PlotKind::RobustnessCurve => "robustness-curve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Sim,
    Cc,
    Kld,
    ClassIl,
    TaskIl,
}

impl Metric {
    fn field(self) -> &'static str {
        match self {
            Metric::Sim => "saliency_sim",
            Metric::Cc => "saliency_cc",
            Metric::Kld => "saliency_kld",
            Metric::ClassIl => "class_il",
            Metric::TaskIl => "task_il",
        }
    }

    fn read(self, r: &ResultRecord) -> Option<f64> {
        match self {
            Metric::Sim => r.saliency_sim,
            Metric::Cc => r.saliency_cc,
            Metric::Kld => r.saliency_kld,
            Metric::ClassIl => Some(r.class_il),
            Metric::TaskIl => Some(r.task_il),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<(f64, String)>,
    pub series: Vec<Series>,
}

fn point(x: f64, values: &[f64]) -> Point {
    let (mean, std) = mean_std(values);
    Point {
        x,
        mean,
        std,
        n: values.len(),
    }
}

/// Mean ± std of `metric` per task index, one series per configuration.
pub fn trajectory_data(records: &[ResultRecord], metric: Metric) -> CliResult<PlotData> {
    if records.is_empty() {
        return Err(CliError::Runtime("no records to plot".into()));
    }
    let missing = records.iter().filter(|r| metric.read(r).is_none()).count();
    if missing > 0 {
        return Err(CliError::Runtime(format!(
            "missing fields: {} (absent in {missing} of {} records)",
            metric.field(),
            records.len()
        )));
    }
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let name = format!("{} {} {}", r.tag, r.learner, r.variant);
        groups
            .entry(name)
            .or_default()
            .entry(r.task_index)
            .or_default()
            .push(metric.read(r).expect("checked"));
    }
    let tasks = records.iter().map(|r| r.num_tasks).max().unwrap_or(1);
    Ok(PlotData {
        kind: PlotKind::Trajectory,
        title: format!("{} over tasks", metric.field()),
        x_label: "task".into(),
        y_label: metric.field().into(),
        x_ticks: (1..=tasks).map(|t| (t as f64, t.to_string())).collect(),
        series: groups
            .into_iter()
            .map(|(name, by_task)| Series {
                name,
                points: by_task
                    .iter()
                    .map(|(t, v)| point(*t as f64 + 1.0, v))
                    .collect(),
            })
            .collect(),
    })
}

/// Final Class-IL and Task-IL per configuration cell.
pub fn ablation_data(records: &[ResultRecord]) -> CliResult<PlotData> {
    let finals: Vec<ResultRecord> = records.iter().filter(|r| r.is_final()).cloned().collect();
    if finals.is_empty() {
        return Err(CliError::Runtime("no final records to plot".into()));
    }
    let grid = ReportGrid::from_records(&finals);
    let mut ticks = Vec::new();
    let (mut cil, mut til) = (Vec::new(), Vec::new());
    for row in &grid.rows {
        for col in &grid.columns {
            let Some(c) = grid.cells.get(&(row.clone(), col.clone())) else {
                continue;
            };
            let x = ticks.len() as f64;
            let label = if grid.rows.len() > 1 {
                format!("{row} {col}")
            } else {
                col.clone()
            };
            ticks.push((x, label));
            let pt = |mean, std| Point { x, mean, std, n: c.runs };
            cil.push(pt(c.class_il_mean, c.class_il_std));
            til.push(pt(c.task_il_mean, c.task_il_std));
        }
    }
    Ok(PlotData {
        kind: PlotKind::AblationBars,
        title: "final accuracy".into(),
        x_label: "configuration".into(),
        y_label: "accuracy".into(),
        x_ticks: ticks,
        series: vec![
            Series {
                name: "class-il".into(),
                points: cil,
            },
            Series {
                name: "task-il".into(),
                points: til,
            },
        ],
    })
}

/// Mean ± std accuracy over seeds per ε.
pub fn robustness_data(rows: &[(f64, u64, f64)]) -> CliResult<PlotData> {
    if rows.is_empty() {
        return Err(CliError::Runtime("no robustness rows to plot".into()));
    }
    let mut by_eps: Vec<(f64, Vec<f64>)> = Vec::new();
    for &(e, _, a) in rows {
        match by_eps.iter_mut().find(|(x, _)| *x == e) {
            Some((_, v)) => v.push(a),
            None => by_eps.push((e, vec![a])),
        }
    }
    by_eps.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(PlotData {
        kind: PlotKind::RobustnessCurve,
        title: "accuracy under PGD".into(),
        x_label: "epsilon (1/255)".into(),
        y_label: "accuracy".into(),
        x_ticks: by_eps.iter().map(|(e, _)| (*e, format!("{e}"))).collect(),
        series: vec![Series {
            name: "accuracy".into(),
            points: by_eps.iter().map(|(e, v)| point(*e, v)).collect(),
        }],
    })
}

/// Reads `epsilon,seed,accuracy` rows.
pub fn read_curve_csv(path: &Path) -> CliResult<Vec<(f64, u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != "epsilon,seed,accuracy" {
        return Err(CliError::Runtime(format!(
            "{}: missing fields: expected header `epsilon,seed,accuracy`, got `{header}`",
            path.display()
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || CliError::Runtime(format!("{}: line {}: malformed row `{l}`", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// `series,x,label,mean,std,n` rows.
pub fn sidecar_csv(data: &PlotData) -> String {
    let mut out = String::from("series,x,label,mean,std,n\n");
    for s in &data.series {
        for p in &s.points {
            let label = data
                .x_ticks
                .iter()
                .find(|(x, _)| *x == p.x)
                .map(|(_, l)| l.as_str())
                .unwrap_or("");
            let _ = writeln!(out, "{},{},{},{},{},{}", s.name, p.x, label, p.mean, p.std, p.n);
        }
    }
    out
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Deterministic SVG rendering: lines with ±std bands, or grouped bars with
/// ±std whiskers for ablation bars.
pub fn render_svg(data: &PlotData) -> String {
    let pts = data.series.iter().flat_map(|s| &s.points);
    let lo = pts.clone().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let hi = pts.map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if lo >= 0.0 && hi <= 1.0 {
        (0.0, 1.0)
    } else {
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo.min(0.0) - pad, hi + pad)
    };
    let bars = data.kind == PlotKind::AblationBars;
    let xs: Vec<f64> = data.x_ticks.iter().map(|t| t.0).collect();
    let (x0, x1) = if bars {
        (-0.5, xs.len() as f64 - 0.5)
    } else {
        let a = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let b = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if a == b {
            (a - 1.0, b + 1.0)
        } else {
            (a, b)
        }
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&data.title)
    );
    // Axes and grid.
    for k in 0..=5 {
        let y = y0 + (y1 - y0) * k as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    for (x, label) in &data.x_ticks {
        let px = sx(*x);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#000"/><text class="xtick" x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            esc(label)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 20.0,
        esc(&data.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&data.y_label)
    );

    let n_series = data.series.len().max(1) as f64;
    let slot = pw / (x1 - x0) * 0.8 / n_series;
    for (i, ser) in data.series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        if bars {
            for p in &ser.points {
                let left = sx(p.x) - slot * n_series / 2.0 + slot * i as f64;
                let top = sy(p.mean.max(y0));
                let base = sy(0f64.max(y0));
                let _ = writeln!(
                    s,
                    r#"<rect x="{left:.1}" y="{:.1}" width="{slot:.1}" height="{:.1}" fill="{c}"/>"#,
                    top.min(base),
                    (base - top).abs()
                );
                let cx = left + slot / 2.0;
                let _ = writeln!(
                    s,
                    r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#000"/>"##,
                    sy(p.mean - p.std),
                    sy(p.mean + p.std)
                );
            }
        } else {
            let upper: Vec<String> = ser
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.mean + p.std)))
                .collect();
            let lower: Vec<String> = ser
                .points
                .iter()
                .rev()
                .map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.mean - p.std)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = ser
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.mean)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                line.join(" ")
            );
            for p in &ser.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#,
                    sx(p.x),
                    sy(p.mean)
                );
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{c}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone)]
pub struct PlotOutput {
    pub svg: PathBuf,
    pub csv: PathBuf,
    pub data: PlotData,
}

/// Reads `input`, builds the plot and writes `<kind>.svg` and `<kind>.csv`
/// into `out_dir`. Nothing is written when the input cannot be plotted.
pub fn emit_plot(input: &Path, kind: PlotKind, metric: Metric, out_dir: &Path) -> CliResult<PlotOutput> {
    let data = match kind {
        PlotKind::RobustnessCurve => robustness_data(&read_curve_csv(input)?)?,
        PlotKind::Trajectory => trajectory_data(&read_records(input)?, metric)?,
        PlotKind::AblationBars => ablation_data(&read_records(input)?)?,
    };
    let stem = match kind {
        PlotKind::Trajectory => format!("{}-{}", kind.stem(), metric.field()),
        _ => kind.stem().to_string(),
    };
    ensure_dir(out_dir)?;
    let svg = out_dir.join(format!("{stem}.svg"));
    let csv = out_dir.join(format!("{stem}.csv"));
    fs::write(&svg, render_svg(&data)).map_err(|e| io_err(&svg, e))?;
    fs::write(&csv, sidecar_csv(&data)).map_err(|e| io_err(&csv, e))?;
    Ok(PlotOutput { svg, csv, data })
}
