//! Standalone SVG 1.1 renderings of sweep results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hook::Site;
use crate::metrics::{log_prob, logit_diff, prob, rank, MetricKind};
use crate::patch::ExperimentRecord;

pub const SCALE_MIN: f64 = -0.2;
pub const SCALE_MAX: f64 = 1.2;

const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const WHITE: (f64, f64, f64) = (255.0, 255.0, 255.0);
const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);
const OVERSHOOT: (f64, f64, f64) = (64.0, 0.0, 16.0);
const MISSING: &str = "#bdbdbd";
const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#a6761d"];

fn lerp(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> String {
    let c = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// Diverging color for a normalized score: blue at -0.2, white at 0, red at
/// 1.0, darkening towards 1.2 for overshoot. Values outside are clamped.
pub fn score_color(score: f64) -> String {
    let s = score.clamp(SCALE_MIN, SCALE_MAX);
    if s < 0.0 {
        lerp(WHITE, BLUE, s / SCALE_MIN)
    } else if s <= 1.0 {
        lerp(WHITE, RED, s)
    } else {
        lerp(RED, OVERSHOOT, (s - 1.0) / (SCALE_MAX - 1.0))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapAxes {
    /// Rows are layers, columns positions (`all` for whole-sequence targets).
    LayerPosition,
    /// Rows are layers, columns heads plus one `MLP` column.
    LayerHead,
}

impl FromStr for HeatmapAxes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer,position" | "position" => Ok(HeatmapAxes::LayerPosition),
            "layer,head" | "head" => Ok(HeatmapAxes::LayerHead),
            other => Err(Error::Input(format!(
                "unknown heatmap axes {other:?}; valid: layer,position | layer,head"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Column {
    Index(usize),
    /// `all` positions, or the MLP column.
    Rest,
}

pub fn render_heatmap_svg(records: &[ExperimentRecord], metric: MetricKind, axes: HeatmapAxes) -> Result<String> {
    let mut cells: BTreeMap<(usize, Column), Option<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        let Some(layer) = r.layer else { continue };
        let col = match axes {
            HeatmapAxes::LayerPosition => match r.position {
                Some(p) => Column::Index(p),
                None => Column::Rest,
            },
            HeatmapAxes::LayerHead => match (r.hook.site, r.head) {
                (Site::AttnHeadOut, Some(h)) => Column::Index(h),
                (Site::MlpOut, _) => Column::Rest,
                _ => continue,
            },
        };
        if cells.insert((layer, col.clone()), r.normalized).is_some() {
            return Err(Error::Input(format!(
                "two records for layer {layer}, column {} under metric {metric}",
                column_label(&col, axes)
            )));
        }
    }
    if cells.is_empty() {
        return Err(Error::Input(format!(
            "no records with {metric} values on the requested axes"
        )));
    }
    let layers: BTreeSet<usize> = cells.keys().map(|(l, _)| *l).collect();
    let columns: BTreeSet<Column> = cells.keys().map(|(_, c)| c.clone()).collect();

    let (cw, ch) = (56.0, 32.0);
    let (left, top) = (60.0, 56.0);
    let grid_w = cw * columns.len() as f64;
    let grid_h = ch * layers.len() as f64;
    let bar_x = left + grid_w + 32.0;
    let bar_h = grid_h.max(160.0);
    let width = bar_x + 80.0;
    let height = top + bar_h + 40.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="13">{} (normalized)</text>"#,
        escape(metric.name())
    );
    for (j, col) in columns.iter().enumerate() {
        let x = left + cw * j as f64 + cw / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            top - 8.0,
            column_label(col, axes)
        );
    }
    for (i, layer) in layers.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">L{layer}</text>"#,
            left - 8.0,
            y + ch / 2.0 + 4.0
        );
        for (j, col) in columns.iter().enumerate() {
            let x = left + cw * j as f64;
            let (fill, label) = match cells.get(&(*layer, col.clone())) {
                Some(Some(v)) => (score_color(*v), format!("{v:.2}")),
                Some(None) => (MISSING.to_string(), "n/a".to_string()),
                None => (MISSING.to_string(), String::new()),
            };
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="#ffffff"/>"##
            );
            if !label.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
        }
    }

    // colorbar, top = SCALE_MAX
    let steps = 28;
    let step_h = bar_h / steps as f64;
    for k in 0..steps {
        let v = SCALE_MAX - (SCALE_MAX - SCALE_MIN) * (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x}" y="{:.3}" width="16" height="{:.3}" fill="{}"/>"#,
            top + step_h * k as f64,
            step_h + 0.5,
            score_color(v)
        );
    }
    for tick in [SCALE_MAX, 1.0, 0.5, 0.0, SCALE_MIN] {
        let y = top + bar_h * (SCALE_MAX - tick) / (SCALE_MAX - SCALE_MIN);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.3}" x2="{}" y2="{y:.3}" stroke="#000000"/><text x="{}" y="{:.3}">{tick:.1}</text>"##,
            bar_x + 16.0,
            bar_x + 20.0,
            bar_x + 24.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn column_label(col: &Column, axes: HeatmapAxes) -> String {
    match (col, axes) {
        (Column::Index(p), HeatmapAxes::LayerPosition) => format!("pos {p}"),
        (Column::Index(h), HeatmapAxes::LayerHead) => format!("H{h}"),
        (Column::Rest, HeatmapAxes::LayerPosition) => "all".into(),
        (Column::Rest, HeatmapAxes::LayerHead) => "MLP".into(),
    }
}

/// One curve over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Multi-series line chart. Each series is min-max scaled on its own and its
/// legend entry shows the original range.
pub fn render_lines_svg(series: &[LineSeries]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Input("no series to plot".into()));
    }
    for s in series {
        if s.values.is_empty() {
            return Err(Error::Input(format!("series {:?} is empty", s.name)));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("series {:?} has non-finite values", s.name)));
        }
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1);
    let (left, top, pw, ph) = (50.0, 30.0, 480.0, 240.0);
    let legend_y = top + ph + 40.0;
    let width = left + pw + 30.0;
    let height = legend_y + 18.0 * series.len() as f64 + 10.0;
    let x_of = |i: usize| {
        if n == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (n - 1) as f64
        }
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444444"/>"##
    );
    for i in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}" text-anchor="middle">{i}</text>"#,
            x_of(i),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
        left + pw / 2.0,
        top + ph + 30.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">max</text>"#, left - 6.0, top + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">min</text>"#, left - 6.0, top + ph + 4.0);

    for (k, series) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let lo = series.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y_of = |v: f64| {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            top + ph * (1.0 - t)
        };
        let points: Vec<String> = series
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.3},{:.3}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let y = legend_y + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} [{lo:.4}, {hi:.4}]</text>"#,
            left + 20.0,
            left + 26.0,
            y + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One series per metric over layers. For each layer the record with the
/// largest position is used (whole-sequence records when there is none);
/// the value is the normalized score when present, else the raw value.
pub fn lines_from_records(records: &[ExperimentRecord], metrics: &[MetricKind]) -> Result<Vec<LineSeries>> {
    let mut out = Vec::new();
    for &metric in metrics {
        let mut by_layer: BTreeMap<usize, &ExperimentRecord> = BTreeMap::new();
        for r in records.iter().filter(|r| r.metric == metric) {
            let Some(layer) = r.layer else { continue };
            by_layer
                .entry(layer)
                .and_modify(|best| {
                    if r.position.is_some() && r.position > best.position {
                        *best = r;
                    }
                })
                .or_insert(r);
        }
        if by_layer.is_empty() {
            return Err(Error::Input(format!("no per-layer records for metric {metric}")));
        }
        out.push(LineSeries {
            name: metric.name().to_string(),
            values: by_layer.values().map(|r| r.normalized.unwrap_or(r.raw)).collect(),
        });
    }
    Ok(out)
}

/// Metric curves for a constructed run in which the answer logit climbs by
/// one unit per layer past three fixed competitors: logit difference rises
/// linearly, rank drops in steps as the answer overtakes each competitor,
/// and probability / log-probability flatten out once the answer dominates.
pub fn figure2_series(n_layers: usize) -> Vec<LineSeries> {
    const COMPETITORS: [f64; 3] = [4.5, 2.5, 0.5];
    const VOCAB: usize = 10;
    let answer = 0;
    let foil = 1;
    let mut ld = Vec::with_capacity(n_layers);
    let mut lp = Vec::with_capacity(n_layers);
    let mut p = Vec::with_capacity(n_layers);
    let mut rk = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut logits = vec![0.0; VOCAB];
        logits[answer] = -3.0 + l as f64;
        logits[1..=COMPETITORS.len()].copy_from_slice(&COMPETITORS);
        let ok = "ids are within the constructed vocabulary";
        ld.push(logit_diff(&logits, answer, &[foil]).expect(ok));
        lp.push(log_prob(&logits, answer).expect(ok));
        p.push(prob(&logits, answer).expect(ok));
        rk.push(rank(&logits, answer).expect(ok) as f64);
    }
    [("logit_diff", ld), ("logprob", lp), ("prob", p), ("rank", rk)]
        .into_iter()
        .map(|(name, values)| LineSeries {
            name: name.to_string(),
            values,
        })
        .collect()
}
