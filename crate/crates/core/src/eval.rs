//! Trajectory error metrics, distribution summaries and gate-behavior
//! analysis, plus plain-text emitters (CSV, gnuplot columns, markdown).
//!
//! Estimates are compared against ground truth by linearly interpolating
//! the truth track to each estimate timestamp; estimate samples outside
//! the truth time span are discarded rather than extrapolated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{interp_position, PosSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimate samples fall inside the truth time span")]
    EmptyOverlap,
}

/// Error distribution of one method over one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub method: String,
    pub rmse: f64,
    pub mae: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    /// All per-sample Euclidean errors, sorted ascending.
    pub cdf_samples: Vec<f64>,
    /// (time, error) pairs in time order.
    pub per_step_errors: Vec<(f64, f64)>,
}

/// Percentile by linear interpolation between order statistics:
/// rank = p/100 * (n-1), interpolated between the two flanking samples.
/// `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    assert!((0.0..=100.0).contains(&p), "percentile out of range: {p}");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Compares an estimated trajectory against ground truth and summarises
/// the 3D Euclidean error distribution.
pub fn error_stats(
    method: &str,
    estimate: &[PosSample],
    truth: &[PosSample],
) -> Result<ErrorReport, EvalError> {
    let mut per_step = Vec::with_capacity(estimate.len());
    for s in estimate {
        let Some(t_pos) = interp_position(truth, s.t) else {
            continue;
        };
        let e = (s.position_vec() - t_pos).norm();
        per_step.push((s.t, e));
    }
    if per_step.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let mut sorted: Vec<f64> = per_step.iter().map(|&(_, e)| e).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mae = sorted.iter().sum::<f64>() / n;
    let rmse = (sorted.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(ErrorReport {
        method: method.to_string(),
        rmse,
        mae,
        p50: percentile(&sorted, 50.0),
        p95: percentile(&sorted, 95.0),
        p99: percentile(&sorted, 99.0),
        cdf_samples: sorted,
        per_step_errors: per_step,
    })
}

/// Empirical CDF points for plotting: starts at (min error, 0) and ends
/// at (max error, 1).
pub fn cdf_points(sorted: &[f64]) -> Vec<(f64, f64)> {
    assert!(!sorted.is_empty(), "cdf of an empty set");
    let n = sorted.len() as f64;
    let mut pts = Vec::with_capacity(sorted.len() + 1);
    pts.push((sorted[0], 0.0));
    for (i, &e) in sorted.iter().enumerate() {
        pts.push((e, (i + 1) as f64 / n));
    }
    pts
}

/// One inference step as seen by the gate: time, gate value and how many
/// anchors were visible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateStep {
    pub t: f64,
    pub alpha: f64,
    pub visible: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateAnalysis {
    /// (visible count, mean alpha, step count) for every count observed.
    pub by_count: Vec<(usize, f64, usize)>,
    /// Mean alpha over steps with fewer than 3 visible anchors.
    pub mean_sparse: Option<f64>,
    /// Mean alpha over steps with 3 or more visible anchors.
    pub mean_dense3: Option<f64>,
    /// Mean alpha over steps with 4 or more visible anchors.
    pub mean_dense4: Option<f64>,
    pub series: Vec<GateStep>,
}

/// Groups gate values by the number of visible anchors and reports
/// regime means. The interesting contrast is sparse (< 3 anchors, where
/// inertial features must dominate) against well-constrained (>= 4).
pub fn gate_analysis(series: &[GateStep]) -> GateAnalysis {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for s in series {
        let e = sums.entry(s.visible).or_insert((0.0, 0));
        e.0 += s.alpha;
        e.1 += 1;
    }
    let by_count: Vec<(usize, f64, usize)> = sums
        .iter()
        .map(|(&k, &(sum, n))| (k, sum / n as f64, n))
        .collect();
    let regime_mean = |pred: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (sum, n) = series
            .iter()
            .filter(|s| pred(s.visible))
            .fold((0.0, 0usize), |(s, n), step| (s + step.alpha, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    GateAnalysis {
        by_count,
        mean_sparse: regime_mean(&|v| v < 3),
        mean_dense3: regime_mean(&|v| v >= 3),
        mean_dense4: regime_mean(&|v| v >= 4),
        series: series.to_vec(),
    }
}

// ---- emitters ----

fn fmt_m(v: f64) -> String {
    format!("{v:.4}")
}

/// CSV with one row per method: rmse, mae and percentile errors in meters.
pub fn table_csv(reports: &[ErrorReport]) -> String {
    let mut out = String::from("method,rmse_m,mae_m,p50_m,p95_m,p99_m\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            fmt_m(r.rmse),
            fmt_m(r.mae),
            fmt_m(r.p50),
            fmt_m(r.p95),
            fmt_m(r.p99)
        ));
    }
    out
}

/// Markdown table of the same numbers, for the run summary.
pub fn table_markdown(reports: &[ErrorReport]) -> String {
    let mut out = String::from(
        "| Method | RMSE (m) | MAE (m) | P50 (m) | P95 (m) | P99 (m) |\n|---|---|---|---|---|---|\n",
    );
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.method,
            fmt_m(r.rmse),
            fmt_m(r.mae),
            fmt_m(r.p50),
            fmt_m(r.p95),
            fmt_m(r.p99)
        ));
    }
    out
}

/// Two-column plot data (error, cumulative fraction), gnuplot-ready.
pub fn cdf_plot_data(report: &ErrorReport) -> String {
    let mut out = format!("# empirical error CDF: {}\n# error_m cumulative\n", report.method);
    for (x, y) in cdf_points(&report.cdf_samples) {
        out.push_str(&format!("{x:.6} {y:.6}\n"));
    }
    out
}

/// Two-column plot data (time, error).
pub fn series_plot_data(report: &ErrorReport) -> String {
    let mut out = format!("# per-step error: {}\n# t_s error_m\n", report.method);
    for &(t, e) in &report.per_step_errors {
        out.push_str(&format!("{t:.6} {e:.6}\n"));
    }
    out
}

/// Three-column plot data (time, gate value, visible anchors) plus the
/// regime means as comments.
pub fn gate_plot_data(analysis: &GateAnalysis) -> String {
    let mut out = String::from("# fusion gate over time\n# t_s alpha visible\n");
    if let Some(m) = analysis.mean_sparse {
        out.push_str(&format!("# mean alpha, <3 anchors: {m:.4}\n"));
    }
    if let Some(m) = analysis.mean_dense4 {
        out.push_str(&format!("# mean alpha, >=4 anchors: {m:.4}\n"));
    }
    for s in &analysis.series {
        out.push_str(&format!("{:.6} {:.6} {}\n", s.t, s.alpha, s.visible));
    }
    out
}
