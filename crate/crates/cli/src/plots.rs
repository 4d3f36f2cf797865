//! Self-contained SVG line charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::results::{mean_std, ResultsError, ResultsTable, RunStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart; axes and legend marks are `<line>`s, so each series is exactly one `<polyline>`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = range(pts().map(|p| p.1));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let (bx, by) = (LEFT, TOP + ph);
    let _ = writeln!(out, r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#, LEFT + pw);
    let _ = writeln!(out, r#"<line x1="{bx}" y1="{TOP}" x2="{bx}" y2="{by}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{by}" x2="{px:.2}" y2="{}" stroke="black"/>"#, by + 4.0);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, by + 18.0, tick(xv));
        let _ = writeln!(out, r#"<line x1="{}" y1="{py:.2}" x2="{bx}" y2="{py:.2}" stroke="black"/>"#, bx - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, bx - 7.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn mean_curve(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let col: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
            ((i + 1) as f64, mean_std(&col).0)
        })
        .collect()
}

fn write_svg(dir: &Path, name: &str, svg: &str, written: &mut Vec<PathBuf>) -> Result<(), ResultsError> {
    let path = dir.join(name);
    std::fs::write(&path, svg).map_err(|source| ResultsError::Io { path: path.clone(), source })?;
    written.push(path);
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Loss curves per task and config, A_k over tasks, and accuracy vs. severity when several
/// severities ran. Charts whose data is missing are skipped with a warning.
pub fn emit_plots(table: &ResultsTable, dir: &Path) -> Result<Vec<PathBuf>, ResultsError> {
    std::fs::create_dir_all(dir).map_err(|source| ResultsError::Io { path: dir.into(), source })?;
    let mut written = Vec::new();
    let mut missing = Vec::new();
    let ok: Vec<_> = table.rows.iter().filter(|r| r.status == RunStatus::Ok && r.result.is_some()).collect();

    let mut a_series = Vec::new();
    for id in table.config_ids() {
        let runs: Vec<_> = ok.iter().filter(|r| r.config_id == id).filter_map(|r| r.result.as_ref()).collect();
        if runs.is_empty() {
            missing.push(format!("{id}: no successful runs"));
            continue;
        }
        let n_tasks = runs[0].traces.len();
        for t in 0..n_tasks {
            let ce: Vec<Vec<f64>> = runs.iter().filter_map(|r| r.traces.get(t)).map(|tr| tr.ce.clone()).collect();
            let kd: Vec<Vec<f64>> = runs.iter().filter_map(|r| r.traces.get(t)).map(|tr| tr.kd.clone()).collect();
            let mut series = Vec::new();
            if ce.iter().any(|c| !c.is_empty()) {
                series.push(Series { name: "CE".into(), points: mean_curve(&ce) });
            }
            if kd.iter().any(|c| !c.is_empty()) {
                series.push(Series { name: "KD".into(), points: mean_curve(&kd) });
            }
            if series.is_empty() {
                missing.push(format!("{id}: loss traces of task {}", t + 1));
                continue;
            }
            let svg = line_chart(&format!("{id}: task {} losses", t + 1), "epoch", "loss", &series);
            write_svg(dir, &format!("loss_{}_task{}.svg", file_stem(id), t + 1), &svg, &mut written)?;
        }
        let a: Vec<Vec<f64>> = runs.iter().map(|r| r.report.a.clone()).collect();
        a_series.push(Series { name: id.to_string(), points: mean_curve(&a) });
    }
    if a_series.is_empty() {
        missing.push("accuracy after each task".into());
    } else {
        let svg = line_chart("Average accuracy after each task", "task", "A_k", &a_series);
        write_svg(dir, "accuracy_per_task.svg", &svg, &mut written)?;
    }

    let mut severities: Vec<u8> = ok.iter().map(|r| r.severity).collect();
    severities.sort_unstable();
    severities.dedup();
    if severities.len() > 1 {
        let mut strategies = Vec::new();
        for r in &ok {
            if !strategies.contains(&r.strategy) {
                strategies.push(r.strategy);
            }
        }
        let series: Vec<Series> = strategies
            .iter()
            .map(|&k| Series {
                name: k.name().to_string(),
                points: severities
                    .iter()
                    .filter_map(|&s| {
                        let accs: Vec<f64> = ok
                            .iter()
                            .filter(|r| r.strategy == k && r.severity == s)
                            .filter_map(|r| r.result.as_ref().map(|res| res.report.acc_inc))
                            .collect();
                        (!accs.is_empty()).then(|| (s as f64, mean_std(&accs).0))
                    })
                    .collect(),
            })
            .collect();
        let svg = line_chart("Accuracy vs. corruption severity", "severity", "Acc_Inc", &series);
        write_svg(dir, "accuracy_vs_severity.svg", &svg, &mut written)?;
    }
    if !missing.is_empty() {
        log::warn!("skipped plots, missing: {}", missing.join("; "));
    }
    Ok(written)
}
