//! Metrics JSONL to CSV and static SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::trainer::MetricsRecord;

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 500.0;
pub const REPORT_CSV: &str = "report.csv";
pub const STEPS_SVG: &str = "steps.svg";
pub const TOKENS_SVG: &str = "tokens.svg";

/// `%g`-style formatting at six significant digits, trailing zeros removed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let out = if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    };
    if out == "-0" {
        "0".into()
    } else {
        out
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: MetricsRecord =
            serde_json::from_str(line).map_err(|e| LabError::Metrics { line: i + 1, detail: e.to_string() })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(LabError::Metrics { line: 0, detail: "metrics file is empty".into() });
    }
    Ok(records)
}

const CSV_HEADER: &str = "step,loss_mean,margin_mean,pref_prob_mean,curvature_weight_mean,expected_reward_exact,\
kl_to_tilted,tv_to_tilted,teacher_expected_reward,grad_norm,tokens_generated_cumulative";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            opt(r.loss_mean),
            opt(r.margin_mean),
            opt(r.pref_prob_mean),
            opt(r.curvature_weight_mean),
            sig6(r.expected_reward_exact),
            sig6(r.kl_to_tilted),
            sig6(r.tv_to_tilted),
            sig6(r.teacher_expected_reward),
            opt(r.grad_norm),
            r.tokens_generated_cumulative
        );
    }
    out
}

struct Series<'a> {
    title: &'a str,
    x_label: &'a str,
    points: Vec<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Draws one panel into the box `(left, top, width, height)`.
fn panel(out: &mut String, s: &Series<'_>, left: f64, top: f64, width: f64, height: f64) {
    let (x_lo, x_hi) = range(s.points.iter().map(|p| p.0));
    let (y_lo, y_hi) = range(s.points.iter().map(|p| p.1));
    let px = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * width;
    let py = |y: f64| top + height - (y - y_lo) / (y_hi - y_lo) * height;
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        sig6(left),
        sig6(top),
        sig6(width),
        sig6(height)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="13" font-weight="bold">{} vs {}</text>"#,
        sig6(left),
        sig6(top - 6.0),
        s.title,
        s.x_label
    );
    let label = |out: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="{anchor}">{text}</text>"#,
            sig6(x),
            sig6(y)
        );
    };
    label(out, left - 4.0, top + 10.0, "end", sig6(y_hi));
    label(out, left - 4.0, top + height, "end", sig6(y_lo));
    label(out, left, top + height + 12.0, "start", sig6(x_lo));
    label(out, left + width, top + height + 12.0, "end", sig6(x_hi));
    if s.points.is_empty() {
        return;
    }
    let coords: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", sig6(px(x)), sig6(py(y)))).collect();
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{}"/>"##,
        coords.join(" ")
    );
    for &(x, y) in &s.points {
        let _ = writeln!(out, r##"<circle cx="{}" cy="{}" r="2.5" fill="#1f5fa8"/>"##, sig6(px(x)), sig6(py(y)));
    }
}

fn svg(panels: &[Series<'_>]) -> String {
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SVG_WIDTH,
        h = SVG_HEIGHT
    );
    out.push('\n');
    out.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    out.push('\n');
    let (left, right, top, bottom, gap) = (90.0, 30.0, 30.0, 25.0, 45.0);
    let k = panels.len() as f64;
    let height = (SVG_HEIGHT - top - bottom - gap * (k - 1.0)) / k;
    for (i, s) in panels.iter().enumerate() {
        panel(&mut out, s, left, top + i as f64 * (height + gap), SVG_WIDTH - left - right, height);
    }
    out.push_str("</svg>\n");
    out
}

pub fn steps_svg(records: &[MetricsRecord]) -> String {
    let by_step = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect()
    };
    svg(&[
        Series { title: "expected_reward_exact", x_label: "step", points: by_step(&|r| Some(r.expected_reward_exact)) },
        Series { title: "loss_mean", x_label: "step", points: by_step(&|r| r.loss_mean) },
        Series { title: "kl_to_tilted", x_label: "step", points: by_step(&|r| Some(r.kl_to_tilted)) },
    ])
}

pub fn tokens_svg(records: &[MetricsRecord]) -> String {
    svg(&[Series {
        title: "expected_reward_exact",
        x_label: "tokens_generated_cumulative",
        points: records.iter().map(|r| (r.tokens_generated_cumulative as f64, r.expected_reward_exact)).collect(),
    }])
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub steps_svg: PathBuf,
    pub tokens_svg: PathBuf,
    pub rows: usize,
}

/// Renders `report.csv`, `steps.svg` and `tokens.svg` into `out_dir`. Output depends only on the input bytes.
pub fn render_report(metrics_path: &Path, out_dir: &Path) -> Result<ReportFiles> {
    let text = fs::read_to_string(metrics_path).map_err(|e| LabError::io(metrics_path, e))?;
    let records = parse_metrics(&text)?;
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let files = ReportFiles {
        csv: out_dir.join(REPORT_CSV),
        steps_svg: out_dir.join(STEPS_SVG),
        tokens_svg: out_dir.join(TOKENS_SVG),
        rows: records.len(),
    };
    for (path, body) in [
        (&files.csv, metrics_csv(&records)),
        (&files.steps_svg, steps_svg(&records)),
        (&files.tokens_svg, tokens_svg(&records)),
    ] {
        fs::write(path, body).map_err(|e| LabError::io(path, e))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.1666666666), "0.166667");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        assert_eq!(sig6(96000.0), "96000");
        assert_eq!(sig6(1.5e-7), "1.5e-7");
        assert_eq!(sig6(2.0e20), "2e20");
        assert_eq!(sig6(-1e-12), "-1e-12");
    }

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            loss_mean: None,
            margin_mean: None,
            pref_prob_mean: None,
            curvature_weight_mean: None,
            expected_reward_exact: 0.2,
            kl_to_tilted: 0.5,
            tv_to_tilted: 0.3,
            teacher_expected_reward: 0.6,
            grad_norm: None,
            tokens_generated_cumulative: 0,
        }
    }

    #[test]
    fn malformed_line_is_numbered() {
        let good = serde_json::to_string(&record(0)).unwrap();
        let text = format!("{good}\n{{\"step\": 1}}\n");
        assert!(matches!(parse_metrics(&text), Err(LabError::Metrics { line: 2, .. })));
        assert!(matches!(parse_metrics(""), Err(LabError::Metrics { line: 0, .. })));
    }

    #[test]
    fn single_point_chart() {
        let s = steps_svg(&[record(0)]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains(r#"width="800" height="500""#));
    }
}
