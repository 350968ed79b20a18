//! Posterior coverage, constraint satisfaction, and the metrics table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mog::{ConstraintTarget, GaussianMixture, LabelTable};
use crate::{Error, Result, Vec2};

/// Coverage radius in units of the component standard deviation.
pub const PC_RADIUS_SIGMAS: f64 = 2.0;

pub const METRICS_HEADER: &str = "method,constraint,pc,cs,n,seed,time_ms_per_sample,data_usage";

/// Percentage of points within `2σ` of a mode whose labels match every
/// constrained entry of `target`.
pub fn metric_pc(points: &[Vec2], gm: &GaussianMixture, table: &LabelTable, target: &ConstraintTarget) -> Result<f64> {
    let modes = target.check_feasible(table)?;
    Ok(coverage(points, gm, &modes))
}

/// Percentage of points within `2σ` of any mode.
pub fn metric_pc_any(points: &[Vec2], gm: &GaussianMixture) -> f64 {
    let modes: Vec<usize> = (0..gm.n_modes()).collect();
    coverage(points, gm, &modes)
}

fn coverage(points: &[Vec2], gm: &GaussianMixture, modes: &[usize]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let radius = PC_RADIUS_SIGMAS * gm.sigma();
    let hits = points.iter().filter(|x| modes.iter().any(|&k| (**x - gm.means()[k]).norm() <= radius)).count();
    100.0 * hits as f64 / points.len() as f64
}

/// Percentage: mean over points of the mean over constrained classifiers
/// of `p(y_j = c_j | x)`.
pub fn metric_cs(points: &[Vec2], gm: &GaussianMixture, table: &LabelTable, target: &ConstraintTarget) -> Result<f64> {
    cs_with(points, gm, table, target, |ps| ps.iter().sum::<f64>() / ps.len() as f64)
}

/// As [`metric_cs`] with the product over classifiers instead of the mean.
pub fn metric_cs_product(points: &[Vec2], gm: &GaussianMixture, table: &LabelTable, target: &ConstraintTarget) -> Result<f64> {
    cs_with(points, gm, table, target, |ps| ps.iter().product())
}

fn cs_with(points: &[Vec2], gm: &GaussianMixture, table: &LabelTable, target: &ConstraintTarget, combine: impl Fn(&[f64]) -> f64) -> Result<f64> {
    target.check_feasible(table)?;
    if points.is_empty() {
        return Ok(0.0);
    }
    let constrained: Vec<(usize, u8)> = target.constrained().collect();
    let total: f64 = points
        .iter()
        .map(|x| {
            let ps: Vec<f64> = constrained.iter().map(|&(j, c)| gm.label_prob(table, j, c, *x)).collect();
            combine(&ps)
        })
        .sum();
    Ok(100.0 * total / points.len() as f64)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub constraint: String,
    pub pc: f64,
    /// `None` for rows without a constraint (base-flow coverage).
    pub cs: Option<f64>,
    pub n: usize,
    pub seed: u64,
    /// `None` when timing is disabled or the cell failed.
    pub time_ms_per_sample: Option<f64>,
    pub data_usage: usize,
    /// Failure description; the metric columns are then `nan`.
    pub failure: Option<String>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let num = |v: f64| if self.failure.is_some() { "nan".to_string() } else { format!("{v:.4}") };
        let time = match (&self.failure, self.time_ms_per_sample) {
            (None, Some(t)) => format!("{t:.4}"),
            _ => "na".to_string(),
        };
        let usage = if self.failure.is_some() {
            "na".to_string()
        } else {
            self.data_usage.to_string()
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            quote(&self.constraint),
            num(self.pc),
            self.cs.map_or_else(|| "na".to_string(), num),
            self.n,
            self.seed,
            time,
            usage
        )
    }
}

fn quote(s: &str) -> String {
    if s.contains(',') {
        format!("\"{s}\"")
    } else {
        s.to_string()
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Writes terminals as CSV `idx,x1,x2`.
pub fn write_terminals_csv(indices: &[usize], points: &[Vec2], path: &Path) -> Result<()> {
    let mut out = String::from("idx,x1,x2\n");
    for (i, p) in indices.iter().zip(points) {
        let _ = writeln!(out, "{i},{},{}", p.x(), p.y());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
