//! CSV/JSON summaries and static SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairness::{FairnessReport, PromptDistribution};
use crate::prompts::DemographicAxis;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no model reports to render")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub const CSV_COLUMNS: [&str; 13] = [
    "model",
    "bias_gender",
    "bias_skintone",
    "error_gender",
    "error_skintone",
    "skintone_mse",
    "bias_mean",
    "error_mean",
    "overall_mean",
    "verdict_gender_groups",
    "verdict_skintone_groups",
    "verdict_bias",
    "verdict_alignment",
];

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fair(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "fair",
        Some(false) => "biased",
        None => "",
    }
}

/// One row per model. Scores keep full precision; missing scores are empty.
pub fn to_csv(reports: &[FairnessReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let flagged = |v: &Option<crate::fairness::Verdict>| {
            v.as_ref()
                .map(|v| v.groups.iter().filter(|g| g.biased).map(|g| g.group.as_str()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default()
        };
        let row = [
            csv_field(&r.model),
            num(r.bias_gender),
            num(r.bias_skintone),
            num(r.error_gender),
            num(r.error_skintone),
            num(r.skintone_mse),
            num(r.bias_mean),
            num(r.error_mean),
            num(r.overall_mean),
            csv_field(&flagged(&r.gender_verdict)),
            csv_field(&flagged(&r.skintone_verdict)),
            fair(r.bias_fair).to_string(),
            fair(r.alignment_fair).to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const GENDER_COLORS: [&str; 3] = ["#4c72b0", "#dd8452", "#bbbbbb"];
const SKIN_COLORS: [&str; 6] = ["#f6ede4", "#e7c39c", "#c69876", "#8d5a3b", "#3b2219", "#bbbbbb"];

/// Grouped bar chart of label shares per prompt on one axis.
pub fn distribution_svg(model: &str, axis: DemographicAxis, per_prompt: &[(&String, &PromptDistribution)]) -> String {
    let (names, colors): (Vec<&str>, &[&str]) = match axis {
        DemographicAxis::Gender => (vec!["male", "female", "unknown"], &GENDER_COLORS),
        DemographicAxis::Skintone => (vec!["light", "yellow", "tan", "brown", "dark", "unknown"], &SKIN_COLORS),
    };
    let k = names.len();
    let bar = 6.0;
    let group_w = bar * k as f64 + 8.0;
    let (left, top, plot_h, bottom) = (50.0, 40.0, 240.0, 160.0);
    let width = left + group_w * per_prompt.len().max(1) as f64 + 20.0;
    let height = top + plot_h + bottom;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let axis_name = match axis {
        DemographicAxis::Gender => "gender",
        DemographicAxis::Skintone => "skintone",
    };
    let _ = writeln!(s, r#"<text x="{left}" y="16" font-size="13">{} ({axis_name})</text>"#, esc(model));
    for (i, (n, c)) in names.iter().zip(colors).enumerate() {
        let x = left + i as f64 * 70.0;
        let _ = writeln!(s, r##"<rect x="{x}" y="22" width="9" height="9" fill="{c}" stroke="#333"/><text x="{}" y="30">{n}</text>"##, x + 12.0);
    }
    for t in 0..=4 {
        let y = top + plot_h * (1.0 - t as f64 / 4.0);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{:.2}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 3.0,
            t as f64 / 4.0
        );
    }
    for (pi, (id, d)) in per_prompt.iter().enumerate() {
        let counts: Vec<u64> = match axis {
            DemographicAxis::Gender => d.gender.to_vec(),
            DemographicAxis::Skintone => d.skintone.to_vec(),
        };
        let total = counts.iter().sum::<u64>().max(1) as f64;
        let gx = left + pi as f64 * group_w + 4.0;
        let _ = writeln!(s, r#"<g class="prompt" data-id="{}"><title>{}</title>"#, esc(id), esc(&d.text));
        for (ci, &c) in counts.iter().enumerate() {
            let h = plot_h * c as f64 / total;
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{}" stroke="#333" stroke-width="0.3"/>"##,
                gx + ci as f64 * bar,
                top + plot_h - h,
                colors[ci]
            );
        }
        let label: String = d.text.chars().take(28).collect();
        let (lx, ly) = (gx + group_w / 2.0, top + plot_h + 8.0);
        let _ = writeln!(s, r#"<text x="{lx}" y="{ly}" transform="rotate(60 {lx} {ly})">{}</text></g>"#, esc(&label));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub model: String,
    pub error_mean: f64,
    pub bias_mean: f64,
}

impl ScatterPoint {
    pub fn inside(&self, bias_threshold: f64, alignment_threshold: f64) -> bool {
        self.bias_mean < bias_threshold && self.error_mean < alignment_threshold
    }
}

/// Mean error (x) against mean bias (y) with the threshold box shaded.
/// Points inside the box carry `class="inside"`.
pub fn scatter_svg(points: &[ScatterPoint], bias_threshold: f64, alignment_threshold: f64) -> String {
    let (left, top, size) = (60.0, 30.0, 400.0);
    let px = |v: f64| left + size * v.clamp(0.0, 1.0);
    let py = |v: f64| top + size * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        left + size + 160.0,
        top + size + 50.0
    );
    let _ = writeln!(
        s,
        r##"<rect class="reference-box" x="{left}" y="{}" width="{}" height="{}" fill="#d8f0d8"/>"##,
        py(bias_threshold),
        size * alignment_threshold,
        size * bias_threshold
    );
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{0}" y1="{top}" x2="{0}" y2="{1}" stroke="#c44" stroke-dasharray="4 3"/>"##,
        px(alignment_threshold),
        top + size
    );
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#c44" stroke-dasharray="4 3"/>"##,
        py(bias_threshold),
        left + size
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, px(v), top + size + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 5.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean alignment error</text>"#, left + size / 2.0, top + size + 35.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{0}" transform="rotate(-90 15 {0})" text-anchor="middle">mean representation bias</text>"#,
        top + size / 2.0
    );
    for p in points {
        let class = if p.inside(bias_threshold, alignment_threshold) { "inside" } else { "outside" };
        let (x, y) = (px(p.error_mean), py(p.bias_mean));
        let _ = writeln!(
            s,
            r##"<g class="{class}" data-model="{0}"><circle cx="{x}" cy="{y}" r="5" fill="#4c72b0"/><text x="{1}" y="{2}">{0}</text></g>"##,
            esc(&p.model),
            x + 7.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn write(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io { path: path.into(), source })
}

fn slug(model: &str) -> String {
    model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `report.csv`, `report.json`, two distribution plots per model and
/// `scatter.svg` into `out_dir`.
pub fn write_report(
    reports: &[FairnessReport],
    out_dir: &Path,
    bias_threshold: f64,
    alignment_threshold: f64,
) -> Result<ReportFiles, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io { path: out_dir.into(), source })?;
    let csv = out_dir.join("report.csv");
    write(&csv, to_csv(reports).as_bytes())?;
    let json = out_dir.join("report.json");
    let body = serde_json::to_vec_pretty(reports).map_err(|source| ReportError::Json { path: json.clone(), source })?;
    write(&json, &body)?;
    let mut plots = Vec::new();
    for r in reports {
        let prompts: Vec<_> = r.per_prompt.iter().collect();
        for (axis, name) in [(DemographicAxis::Gender, "gender"), (DemographicAxis::Skintone, "skintone")] {
            let p = out_dir.join(format!("{}_{name}.svg", slug(&r.model)));
            write(&p, distribution_svg(&r.model, axis, &prompts).as_bytes())?;
            plots.push(p);
        }
    }
    let points: Vec<ScatterPoint> = reports
        .iter()
        .filter_map(|r| {
            Some(ScatterPoint { model: r.model.clone(), error_mean: r.error_mean?, bias_mean: r.bias_mean? })
        })
        .collect();
    let scatter = out_dir.join("scatter.svg");
    write(&scatter, scatter_svg(&points, bias_threshold, alignment_threshold).as_bytes())?;
    plots.push(scatter);
    Ok(ReportFiles { csv, json, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_marks_points_in_box() {
        let pts = vec![
            ScatterPoint { model: "good".into(), error_mean: 0.1, bias_mean: 0.15 },
            ScatterPoint { model: "bad".into(), error_mean: 0.3, bias_mean: 0.1 },
        ];
        let svg = scatter_svg(&pts, 0.2, 0.2);
        assert!(svg.contains(r#"<g class="inside" data-model="good">"#));
        assert!(svg.contains(r#"<g class="outside" data-model="bad">"#));
        assert_eq!(svg.matches(r#"class="threshold""#).count(), 2);
    }

    #[test]
    fn csv_escapes_and_leaves_missing_blank() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(num(None), "");
        assert_eq!(num(Some(0.4)), "0.4");
    }

    #[test]
    fn bars_scale_to_shares() {
        let d = PromptDistribution { text: "a <nurse>".into(), gender: [3, 1, 0], skintone: [0; 6] };
        let id = "p-1".to_string();
        let svg = distribution_svg("m", DemographicAxis::Gender, &[(&id, &d)]);
        assert!(svg.contains(r#"height="180""#));
        assert!(svg.contains("a &lt;nurse&gt;"));
    }
}
