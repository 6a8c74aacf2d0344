//! SVG rendering of sweep tables and prediction scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{write_file, PipelineError};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{0}: no plottable rows")]
    Empty(PathBuf),
}

const METRICS: [&str; 4] = ["fde", "min_ade", "hit_rate", "hausdorff"];
const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 56.0;

/// Data range widened by 5% of its span on both sides. A zero span is
/// widened by 5% of the magnitude instead (or by 0.05 around zero).
pub fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let m = if span > 0.0 { 0.05 * span } else { 0.05 * lo.abs().max(1.0) };
    (lo - m, hi + m)
}

#[derive(Debug, Deserialize)]
struct SweepRecord {
    axis: String,
    value: String,
    #[allow(dead_code)]
    config_hash: String,
    status: String,
    fde: Option<f64>,
    min_ade: Option<f64>,
    hit_rate: Option<f64>,
    hausdorff: Option<f64>,
}

fn parse_error(path: &Path, e: &csv::Error) -> PlotError {
    let line = match e.kind() {
        csv::ErrorKind::Deserialize { pos: Some(p), .. } | csv::ErrorKind::UnequalLengths { pos: Some(p), .. } => p.line(),
        _ => e.position().map_or(0, |p| p.line()),
    };
    PlotError::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Rows of a headed CSV file with their 1-based line numbers.
fn records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(u64, T)>, PipelineError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_error(path, &e))?.clone();
    let mut raw = csv::StringRecord::new();
    let mut out = Vec::new();
    while rdr.read_record(&mut raw).map_err(|e| parse_error(path, &e))? {
        let line = raw.position().map_or(0, |p| p.line());
        let rec = raw.deserialize(Some(&headers)).map_err(|e| PlotError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        out.push((line, rec));
    }
    Ok(out)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, PipelineError> {
    csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => PipelineError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => PipelineError::Plot(PlotError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("{other:?}"),
        }),
    })
}

struct Series {
    axis: String,
    labels: Vec<String>,
    /// Per metric, one value per label.
    values: [Vec<f64>; 4],
}

fn read_sweep(path: &Path) -> Result<Series, PipelineError> {
    let mut s = Series {
        axis: String::new(),
        labels: vec![],
        values: Default::default(),
    };
    for (line, rec) in records::<SweepRecord>(path)? {
        if rec.status == "missing" {
            continue;
        }
        let bad = |msg: String| PlotError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.status != "ok" {
            return Err(bad(format!("unknown status `{}`", rec.status)).into());
        }
        if !s.axis.is_empty() && s.axis != rec.axis {
            return Err(bad(format!("mixed axes `{}` and `{}`", s.axis, rec.axis)).into());
        }
        let vals = [rec.fde, rec.min_ade, rec.hit_rate, rec.hausdorff];
        for (i, v) in vals.iter().enumerate() {
            match v {
                Some(v) if v.is_finite() => s.values[i].push(*v),
                _ => return Err(bad(format!("`{}` missing or non-finite", METRICS[i])).into()),
            }
        }
        s.axis = rec.axis;
        s.labels.push(rec.value);
    }
    if s.labels.is_empty() {
        return Err(PlotError::Empty(path.to_path_buf()).into());
    }
    Ok(s)
}

fn chart(axis: &str, metric: &str, labels: &[String], ys: &[f64]) -> String {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse().ok()).collect();
    let xs = numeric.clone().unwrap_or_else(|| (0..labels.len()).map(|i| i as f64).collect());
    let (x0, x1) = axis_range(&xs);
    let (y0, y1) = axis_range(ys);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-x-range="{x0} {x1}" data-y-range="{y0} {y1}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = PAD,
        t = PAD,
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    writeln!(s, r##"<polyline class="series" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" ")).unwrap();
    for ((&x, &y), label) in xs.iter().zip(ys).zip(labels) {
        writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, px(x), py(y)).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{label}</text>"#, px(x), H - PAD + 16.0).unwrap();
    }
    for y in [y0, y1] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{y:.3}</text>"#, PAD - 4.0, py(y) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{metric} vs {axis}</text>"#, W / 2.0, PAD / 2.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// One chart per metric, named `<axis>_<metric>.svg`, in `out`.
pub fn cmd_plot(sweep_csv: &Path, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let s = read_sweep(sweep_csv)?;
    let mut written = Vec::with_capacity(METRICS.len());
    for (i, metric) in METRICS.iter().enumerate() {
        let path = out.join(format!("{}_{metric}.svg", s.axis));
        write_file(&path, chart(&s.axis, metric, &s.labels, &s.values[i]).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Deserialize)]
struct PredRecord {
    item: usize,
    kind: String,
    index: usize,
    #[allow(dead_code)]
    step: usize,
    x: f64,
    y: f64,
}

/// Top-down view of one predicted item: route corridor, history, ground
/// truth and every candidate, written to `out/scene_<item>.svg`.
pub fn cmd_plot_scene(predictions_csv: &Path, item: usize, corridor_halfwidth: f64, out: &Path) -> Result<PathBuf, PipelineError> {
    let mut lines: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (line, rec) in records::<PredRecord>(predictions_csv)? {
        if !matches!(rec.kind.as_str(), "route" | "history" | "ground_truth" | "candidate") {
            return Err(PlotError::Parse {
                path: predictions_csv.to_path_buf(),
                line,
                msg: format!("unknown kind `{}`", rec.kind),
            }
            .into());
        }
        if rec.item == item {
            lines.entry((rec.kind, rec.index)).or_default().push((rec.x, rec.y));
        }
    }
    if lines.is_empty() {
        return Err(PlotError::Empty(predictions_csv.to_path_buf()).into());
    }

    // Forward (+x) points up, left (+y) points left.
    let all: Vec<(f64, f64)> = lines.values().flatten().copied().collect();
    let (u0, u1) = axis_range(&all.iter().map(|p| -p.1).collect::<Vec<_>>());
    let (v0, v1) = axis_range(&all.iter().map(|p| p.0).collect::<Vec<_>>());
    let side = 480.0;
    let scale = (side - 2.0 * 20.0) / (u1 - u0).max(v1 - v0).max(corridor_halfwidth * 4.0);
    let map = |(x, y): (f64, f64)| (20.0 + (-y - u0) * scale, side - 20.0 - (x - v0) * scale);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#).unwrap();
    writeln!(s, r#"<rect width="{side}" height="{side}" fill="white"/>"#).unwrap();
    let order = ["route", "history", "ground_truth", "candidate"];
    for kind in order {
        for ((k, idx), pts) in lines.iter().filter(|((k, _), _)| k == kind) {
            let (stroke, width, opacity) = match kind {
                "route" => ("#999999", 2.0 * corridor_halfwidth * scale, 0.35),
                "history" => ("#333333", 2.0, 1.0),
                "ground_truth" => ("#2ca02c", 2.5, 1.0),
                _ => ("#d62728", 1.5, 0.8),
            };
            let p: Vec<String> = pts
                .iter()
                .map(|&q| {
                    let (a, b) = map(q);
                    format!("{a:.2},{b:.2}")
                })
                .collect();
            writeln!(
                s,
                r#"<polyline class="{k}" data-index="{idx}" points="{}" fill="none" stroke="{stroke}" stroke-width="{width:.2}" stroke-opacity="{opacity}" stroke-linecap="round" stroke-linejoin="round"/>"#,
                p.join(" ")
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    let path = out.join(format!("scene_{item}.svg"));
    write_file(&path, s.as_bytes())?;
    Ok(path)
}
