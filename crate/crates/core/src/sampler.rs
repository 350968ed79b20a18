//! Guided explicit-Euler integration from the standard-Gaussian source.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::VelocityModel;
use crate::guidance::{guidance_step, GuidanceConfig, StepDiagnostics, ValueGradient};
use crate::mog::source_sample_at;
use crate::rewards::RewardSet;
use crate::rng::{CounterRng, Stream};
use crate::{Error, Result, Vec2};

/// Largest tolerated fraction of aborted trajectories in a batch.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

/// One integrated path on the uniform grid `t_i = i / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec2>,
    pub times: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn terminal(&self) -> Vec2 {
        *self.states.last().expect("trajectories hold at least one state")
    }

    pub fn steps(&self) -> usize {
        self.diagnostics.len()
    }
}

/// Integrates `x_{i+1} = x_i + (v(x_i, t_i) + g(x_i, t_i)) / N` from `x0`.
/// `key` seeds the per-step PCGrad orderings.
pub fn euler_sample(
    field: &dyn VelocityModel,
    set: &RewardSet,
    cfg: &GuidanceConfig,
    value: Option<&dyn ValueGradient>,
    x0: Vec2,
    n_steps: usize,
    key: u64,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Config("Euler sampling needs at least one step".into()));
    }
    if !x0.is_finite() {
        return Err(Error::AbortedTrajectory { last_valid_step: 0 });
    }
    let dt = 1.0 / n_steps as f64;
    let rng = CounterRng::new(key);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut diagnostics = Vec::with_capacity(n_steps);
    states.push(x0);
    let mut x = x0;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let abort = |e: Error| match e {
            Error::Numeric(_) => Error::AbortedTrajectory { last_valid_step: i },
            other => other,
        };
        let v = field.velocity(x, t).map_err(abort)?;
        let (g, diag) = guidance_step(field, set, cfg, value, x, t, rng.derive(Stream::PcGrad, i as u64)).map_err(abort)?;
        let next = x + (v + g) * dt;
        if !next.is_finite() {
            return Err(Error::AbortedTrajectory { last_valid_step: i });
        }
        x = next;
        states.push(x);
        diagnostics.push(diag);
    }
    let times = (0..=n_steps).map(|i| i as f64 * dt).collect();
    Ok(Trajectory { states, times, diagnostics })
}

/// Per-step diagnostics flattened for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub idx: usize,
    pub step: usize,
    pub t: f64,
    pub w: f64,
    pub delta_e: f64,
    pub mean_cos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Terminals of the successful trajectories, ordered by sample index.
    pub terminals: Vec<Vec2>,
    /// Sample index of each entry of `terminals`.
    pub indices: Vec<usize>,
    /// Number of aborted trajectories.
    pub failures: usize,
    /// Mean over steps and samples of `1 - mean pairwise cosine`.
    pub misalignment_integral: f64,
    pub mean_delta_e: f64,
    pub mean_w: f64,
    /// Fraction of successful trajectories with any step at `w > τ`.
    pub conflict_fraction: f64,
    /// Total wall time divided by `n`.
    pub time_ms_per_sample: f64,
    /// Present only when requested.
    pub diagnostics: Option<Vec<DiagnosticRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleOptions {
    pub keep_diagnostics: bool,
}

struct Summary {
    idx: usize,
    terminal: Vec2,
    misalign: f64,
    delta_e: f64,
    w: f64,
    max_w: f64,
    records: Vec<DiagnosticRecord>,
}

/// `n` independent trajectories from `x0 = source(seed, idx)`. Results do
/// not depend on the thread schedule. More than 1% aborted trajectories
/// fail the run.
#[allow(clippy::too_many_arguments)]
pub fn batch_sample(
    field: &dyn VelocityModel,
    set: &RewardSet,
    cfg: &GuidanceConfig,
    value: Option<&dyn ValueGradient>,
    n: usize,
    n_steps: usize,
    seed: u64,
    options: SampleOptions,
) -> Result<SampleReport> {
    if n == 0 {
        return Err(Error::Config("batch sampling needs n >= 1".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let rng = CounterRng::new(seed);
    let outcomes: Vec<Result<Summary>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x0 = source_sample_at(seed, idx as u64);
            let traj = euler_sample(field, set, cfg, value, x0, n_steps, rng.derive(Stream::PcGrad, idx as u64))?;
            let mut s = Summary {
                idx,
                terminal: traj.terminal(),
                misalign: 0.0,
                delta_e: 0.0,
                w: 0.0,
                max_w: 0.0,
                records: Vec::new(),
            };
            for (step, d) in traj.diagnostics.iter().enumerate() {
                s.misalign += 1.0 - d.mean_pairwise_cos;
                s.delta_e += d.delta_e;
                s.w += d.w;
                s.max_w = s.max_w.max(d.w);
                if options.keep_diagnostics {
                    s.records.push(DiagnosticRecord {
                        idx,
                        step,
                        t: traj.times[step],
                        w: d.w,
                        delta_e: d.delta_e,
                        mean_cos: d.mean_pairwise_cos,
                    });
                }
            }
            Ok(s)
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64() * 1e3;

    let mut report = SampleReport {
        terminals: Vec::with_capacity(n),
        indices: Vec::with_capacity(n),
        failures: 0,
        misalignment_integral: 0.0,
        mean_delta_e: 0.0,
        mean_w: 0.0,
        conflict_fraction: 0.0,
        time_ms_per_sample: elapsed / n as f64,
        diagnostics: options.keep_diagnostics.then(Vec::new),
    };
    let mut conflicted = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(s) => {
                report.terminals.push(s.terminal);
                report.indices.push(s.idx);
                report.misalignment_integral += s.misalign;
                report.mean_delta_e += s.delta_e;
                report.mean_w += s.w;
                if s.max_w > cfg.conflict_threshold {
                    conflicted += 1;
                }
                if let Some(d) = report.diagnostics.as_mut() {
                    d.extend(s.records);
                }
            }
            Err(Error::AbortedTrajectory { .. }) => report.failures += 1,
            Err(e) => return Err(e),
        }
    }
    if report.failures as f64 > MAX_ABORT_FRACTION * n as f64 {
        return Err(Error::RunFailed(format!(
            "{} of {n} trajectories aborted (limit {:.0}%)",
            report.failures,
            MAX_ABORT_FRACTION * 100.0
        )));
    }
    let ok = report.terminals.len();
    if ok > 0 {
        let denom = (ok * n_steps) as f64;
        report.misalignment_integral /= denom;
        report.mean_delta_e /= denom;
        report.mean_w /= denom;
        report.conflict_fraction = conflicted as f64 / ok as f64;
    }
    Ok(report)
}
