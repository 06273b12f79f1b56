//! Report generation from metrics CSV files: sweep plots as hand-rolled
//! SVG, a component-ablation table, and a plain-text summary.
//!
//! Reports are a pure function of their input rows; malformed rows are
//! skipped with a warning and never abort the report.

use crate::metrics::{harmonic_mean, MetricsRecord, CSV_HEADER};
use std::path::Path;
use thiserror::Error;

/// Tolerance for recomputing the harmonic-mean column from the accuracy
/// columns.
pub const HM_RECHECK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no valid rows in any input")]
    Empty,
}

/// Parse CSV text. Returns the valid rows plus one warning per skipped row.
pub fn parse_csv(text: &str) -> (Vec<MetricsRecord>, Vec<String>) {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == CSV_HEADER {
            continue;
        }
        match MetricsRecord::parse_csv_row(trimmed) {
            Some(rec) => {
                let recomputed = harmonic_mean(rec.base_acc, rec.novel_acc);
                if (recomputed - rec.hm).abs() > HM_RECHECK_TOL {
                    warnings.push(format!(
                        "line {}: stored hm {} disagrees with recomputed {recomputed} beyond {HM_RECHECK_TOL:e}, row skipped",
                        i + 1,
                        rec.hm
                    ));
                } else {
                    rows.push(rec);
                }
            }
            None => warnings.push(format!("line {}: malformed row skipped", i + 1)),
        }
    }
    (rows, warnings)
}

/// A finished report: named SVG plots, the ablation table, a text summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// (file name, SVG body) per swept variable.
    pub plots: Vec<(String, String)>,
    pub table: String,
    pub summary: String,
}

impl Report {
    pub fn write_to(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &self.plots {
            std::fs::write(dir.join(name), body)?;
        }
        std::fs::write(dir.join("ablation_table.txt"), &self.table)?;
        std::fs::write(dir.join("summary.txt"), &self.summary)?;
        Ok(())
    }
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// A minimal line plot: axes, tick labels at the extremes, one polyline,
/// a dot per point. Degenerates gracefully to a single dot.
pub fn svg_line_plot(title: &str, xlabel: &str, points: &[(f64, f64)]) -> String {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x"));
    let (x_min, x_max) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (y_min, y_max) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let x_span = if (x_max - x_min).abs() < 1e-12 { 1.0 } else { x_max - x_min };
    let y_span = if (y_max - y_min).abs() < 1e-12 { 1.0 } else { y_max - y_min };
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y_min) / y_span * (SVG_H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        SVG_W / 2.0
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        SVG_H - MARGIN,
        SVG_W - MARGIN
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>\n",
        SVG_H - MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>\n",
        SVG_W / 2.0,
        SVG_H - 10.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{x_min:.3}</text>\n",
        SVG_H - MARGIN + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{x_max:.3}</text>\n",
        SVG_W - MARGIN,
        SVG_H - MARGIN + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{y_min:.3}</text>\n",
        MARGIN - 4.0,
        SVG_H - MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{MARGIN}\" text-anchor=\"end\" font-size=\"10\">{y_max:.3}</text>\n",
        MARGIN - 4.0
    ));
    if pts.len() > 1 {
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
    }
    for &(x, y) in &pts {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean HM per distinct value of one swept variable, restricted to rows
/// with every component enabled. If no such rows exist (say a
/// baseline-only CSV), all rows are used so the plot still renders.
fn sweep_points(records: &[MetricsRecord], get: fn(&MetricsRecord) -> f64) -> Vec<(f64, f64)> {
    let mut full: Vec<&MetricsRecord> =
        records.iter().filter(|r| r.fif && r.stp && r.hld).collect();
    if full.is_empty() {
        full = records.iter().collect();
    }
    let mut xs: Vec<f64> = Vec::new();
    for r in &full {
        if !xs.iter().any(|&x| (x - get(r)).abs() < 1e-12) {
            xs.push(get(r));
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite sweep values"));
    xs.into_iter()
        .map(|x| {
            let hms: Vec<f64> = full
                .iter()
                .filter(|r| (get(r) - x).abs() < 1e-12)
                .map(|r| r.hm)
                .collect();
            (x, mean(&hms))
        })
        .collect()
}

fn component_label(r: &MetricsRecord) -> String {
    match (r.fif, r.stp, r.hld) {
        (false, false, false) => "baseline".into(),
        (false, true, false) => "stp".into(),
        (false, false, true) => "hld".into(),
        (false, true, true) => "stp+hld".into(),
        (true, true, true) => "full".into(),
        (fif, stp, hld) => format!("fif={},stp={},hld={}", fif as u8, stp as u8, hld as u8),
    }
}

/// Build the report from already-parsed rows.
pub fn build_report(records: &[MetricsRecord], warnings: &[String]) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let sweeps: [(&str, &str, fn(&MetricsRecord) -> f64); 3] = [
        ("hm_vs_q.svg", "mask threshold q", |r| r.q),
        ("hm_vs_lambda.svg", "lambda", |r| r.lambda),
        ("hm_vs_gamma.svg", "gamma", |r| r.gamma),
    ];
    let mut plots = Vec::new();
    for (file, xlabel, get) in sweeps {
        let points = sweep_points(records, get);
        if !points.is_empty() {
            plots.push((
                file.to_string(),
                svg_line_plot(&format!("mean HM vs {xlabel}"), xlabel, &points),
            ));
        }
    }

    // component table: mean accuracies per flag combination, in ladder order
    let mut labels: Vec<String> = Vec::new();
    for r in records {
        let l = component_label(r);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let ladder = ["baseline", "stp", "hld", "stp+hld", "full"];
    labels.sort_by_key(|l| ladder.iter().position(|x| x == l).unwrap_or(ladder.len()));
    let mut table = String::from("components      n   base    novel   hm\n");
    for label in &labels {
        let group: Vec<&MetricsRecord> =
            records.iter().filter(|r| component_label(r) == *label).collect();
        table.push_str(&format!(
            "{label:<14} {:>3}  {:.4}  {:.4}  {:.4}\n",
            group.len(),
            mean(&group.iter().map(|r| r.base_acc).collect::<Vec<_>>()),
            mean(&group.iter().map(|r| r.novel_acc).collect::<Vec<_>>()),
            mean(&group.iter().map(|r| r.hm).collect::<Vec<_>>()),
        ));
    }

    let best = records
        .iter()
        .max_by(|a, b| a.hm.partial_cmp(&b.hm).expect("finite hm"))
        .expect("nonempty");
    let mut summary = format!(
        "{} rows, {} skipped\nbest hm {:.4} (config {}, seed {}, q={}, lambda={}, gamma={})\n",
        records.len(),
        warnings.len(),
        best.hm,
        best.config_hash,
        best.seed,
        best.q,
        best.lambda,
        best.gamma
    );
    if !warnings.is_empty() {
        summary.push_str("warnings:\n");
        for w in warnings {
            summary.push_str(&format!("  {w}\n"));
        }
    }
    Ok(Report { plots, table, summary })
}

/// End to end: read CSV files, warn about bad rows on stderr, build the
/// report.
pub fn report_from_files(paths: &[std::path::PathBuf]) -> Result<Report, ReportError> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let (mut rows, warns) = parse_csv(&text);
        records.append(&mut rows);
        for w in warns {
            let tagged = format!("{}: {w}", path.display());
            eprintln!("warning: {tagged}");
            warnings.push(tagged);
        }
    }
    build_report(&records, &warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: f64, lambda: f64, gamma: f64, flags: (bool, bool, bool), hm_pair: (f64, f64)) -> MetricsRecord {
        let (base_acc, novel_acc) = hm_pair;
        MetricsRecord {
            config_hash: "h".into(),
            seed: 0,
            q,
            lambda,
            gamma,
            fif: flags.0,
            stp: flags.1,
            hld: flags.2,
            base_acc,
            novel_acc,
            hm: harmonic_mean(base_acc, novel_acc),
            epochs: 1,
            wall_ms: 5,
            losses: Vec::new(),
        }
    }

    #[test]
    fn malformed_and_inconsistent_rows_are_skipped_with_warnings() {
        let good = rec(30.0, 1.0, 3.0, (true, true, true), (0.75, 0.5));
        let mut bad_hm = good.clone();
        bad_hm.hm = 0.9;
        let text = format!(
            "{CSV_HEADER}\n{}\nnot,a,row\n{}\n",
            good.csv_row(),
            bad_hm.csv_row()
        );
        let (rows, warnings) = parse_csv(&text);
        assert_eq!(rows.len(), 1);
        assert_eq!(warnings.len(), 2);
        assert!(warnings[0].contains("malformed"));
        assert!(warnings[1].contains("recomputed"));
    }

    #[test]
    fn single_row_gives_single_point_plots() {
        let rows = vec![rec(30.0, 1.0, 3.0, (true, true, true), (0.75, 0.5))];
        let report = build_report(&rows, &[]).unwrap();
        assert_eq!(report.plots.len(), 3);
        for (_, svg) in &report.plots {
            assert_eq!(svg.matches("<circle").count(), 1);
            assert!(!svg.contains("polyline"));
        }
    }

    #[test]
    fn sweep_plot_has_one_point_per_distinct_value() {
        let rows = vec![
            rec(0.0, 1.0, 3.0, (true, true, true), (0.7, 0.4)),
            rec(15.0, 1.0, 3.0, (true, true, true), (0.7, 0.5)),
            rec(30.0, 1.0, 3.0, (true, true, true), (0.7, 0.6)),
            rec(30.0, 1.0, 3.0, (true, true, true), (0.8, 0.6)),
        ];
        let report = build_report(&rows, &[]).unwrap();
        let (_, q_plot) = &report.plots[0];
        assert_eq!(q_plot.matches("<circle").count(), 3);
        assert!(q_plot.contains("polyline"));
    }

    #[test]
    fn component_table_is_in_ladder_order() {
        let rows = vec![
            rec(30.0, 1.0, 3.0, (true, true, true), (0.8, 0.6)),
            rec(30.0, 1.0, 3.0, (false, false, false), (0.9, 0.2)),
            rec(30.0, 1.0, 3.0, (false, true, false), (0.85, 0.4)),
        ];
        let report = build_report(&rows, &[]).unwrap();
        let base_pos = report.table.find("baseline").unwrap();
        let stp_pos = report.table.find("stp").unwrap();
        let full_pos = report.table.find("full").unwrap();
        assert!(base_pos < stp_pos && stp_pos < full_pos, "{}", report.table);
    }

    #[test]
    fn report_is_pure_in_its_inputs() {
        let rows = vec![
            rec(0.0, 1.0, 3.0, (true, true, true), (0.7, 0.4)),
            rec(30.0, 1.0, 3.0, (false, false, false), (0.9, 0.2)),
        ];
        let a = build_report(&rows, &[]).unwrap();
        let b = build_report(&rows, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_only_rows_still_produce_plots() {
        let rows = vec![
            rec(30.0, 0.0, 0.0, (false, false, false), (0.9, 0.2)),
            rec(50.0, 0.0, 0.0, (false, false, false), (0.85, 0.3)),
        ];
        let report = build_report(&rows, &[]).unwrap();
        assert_eq!(report.plots.len(), 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(build_report(&[], &[]).is_err());
    }

    #[test]
    fn write_to_emits_all_artifacts() {
        let rows = vec![rec(30.0, 1.0, 3.0, (true, true, true), (0.75, 0.5))];
        let report = build_report(&rows, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write_to(dir.path()).unwrap();
        assert!(dir.path().join("hm_vs_q.svg").exists());
        assert!(dir.path().join("ablation_table.txt").exists());
        assert!(dir.path().join("summary.txt").exists());
    }
}
