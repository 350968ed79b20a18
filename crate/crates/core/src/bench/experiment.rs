//! Experiment orchestration: flow training, scale calibration, guidance
//! training, sampling, metrics, grids, and figures for every
//! `(method, target, seed)` cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::figure::{emit_figure, Figure, LineSeries, PointSeries};
use super::landscape::{landscape_grid, Bounds, GridKind, GridOptions, Resolution};
use super::metrics::{metric_cs, metric_pc, metric_pc_any, write_metrics_csv, write_terminals_csv, MetricsRow};
use crate::cfm::{train_flow, FlowTrainConfig, VelocityField, VelocityModel};
use crate::guidance::{Engine, GuidanceConfig};
use crate::mog::{ConstraintTarget, GaussianMixture, LabelTable};
use crate::rewards::{ClassifierBank, RewardSet};
use crate::sampler::{batch_sample, SampleOptions, SampleReport};
use crate::value::{train_guidance, GuidanceTrainConfig, GuidanceUsage, ValueFunction};
use crate::{Error, Result};

/// The mixture and its label table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub mixture: GaussianMixture,
    pub labels: LabelTable,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            mixture: GaussianMixture::benchmark(),
            labels: LabelTable::benchmark(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub enabled: bool,
    pub bounds: Bounds,
    pub resolution: Resolution,
    /// Times at which learned value grids are written for car cells.
    pub value_times: Vec<f64>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bounds: Bounds::default(),
            resolution: Resolution::default(),
            value_times: vec![0.0, 0.5, 0.9],
        }
    }
}

/// Sweep for the guidance scale: the smallest candidate at which cov_g
/// reaches `cs_threshold` on every feasible single-classifier target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub enabled: bool,
    pub candidates: Vec<f64>,
    pub n: usize,
    pub cs_threshold: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            candidates: vec![0.5, 1.0, 2.0, 5.0, 10.0],
            n: 2000,
            cs_threshold: 99.0,
        }
    }
}

/// Everything one run needs. Cell seeds are added to the base seeds of
/// the flow, value, and network sections, so each seed trains its own
/// models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Engine>,
    pub targets: Vec<ConstraintTarget>,
    pub n_eval: usize,
    pub n_steps: usize,
    pub reward_weight: f64,
    /// Wall-clock columns make the metrics file non-reproducible, so they
    /// are opt-in.
    pub timing: bool,
    pub benchmark: BenchmarkConfig,
    pub flow: FlowTrainConfig,
    pub guidance: GuidanceConfig,
    pub value: GuidanceTrainConfig,
    pub landscape: LandscapeConfig,
    pub calibration: CalibrationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0],
            methods: vec![Engine::None, Engine::CovG, Engine::Pcgrad, Engine::Car],
            targets: ["[1,0]", "[0,0]", "[1,1]"].iter().map(|t| t.parse().expect("valid target")).collect(),
            n_eval: 10_000,
            n_steps: 100,
            reward_weight: 1.0,
            timing: false,
            benchmark: BenchmarkConfig::default(),
            flow: FlowTrainConfig::default(),
            guidance: GuidanceConfig::default(),
            value: GuidanceTrainConfig::default(),
            landscape: LandscapeConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_eval == 0 || self.n_steps == 0 {
            return Err(Error::Config("n_eval and n_steps must be positive".into()));
        }
        if !(self.reward_weight > 0.0) || !self.reward_weight.is_finite() {
            return Err(Error::Config("reward_weight must be positive".into()));
        }
        self.benchmark.mixture.validate()?;
        self.benchmark.labels.check_against(&self.benchmark.mixture)?;
        for t in &self.targets {
            t.check_feasible(&self.benchmark.labels)?;
        }
        self.flow.validate()?;
        self.guidance.validate()?;
        self.value.validate()?;
        self.landscape.bounds.validate()?;
        if self.landscape.resolution.nx < 2 || self.landscape.resolution.ny < 2 {
            return Err(Error::Config("landscape resolution must be at least 2x2".into()));
        }
        if self.landscape.value_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("value grid times must lie in [0, 1]".into()));
        }
        let cal = &self.calibration;
        if cal.enabled && (cal.candidates.is_empty() || cal.n == 0 || cal.candidates.iter().any(|s| !(*s > 0.0))) {
            return Err(Error::Config("calibration needs positive candidates and n >= 1".into()));
        }
        Ok(())
    }

    /// Flow settings for cell seed `seed`.
    pub fn flow_for_seed(&self, seed: u64) -> FlowTrainConfig {
        let mut f = self.flow.clone();
        f.seed = f.seed.wrapping_add(seed);
        f.network.seed = f.network.seed.wrapping_add(seed);
        f
    }

    /// Value-training settings for cell seed `seed`.
    pub fn value_for_seed(&self, seed: u64) -> GuidanceTrainConfig {
        let mut v = self.value.clone();
        v.seed = v.seed.wrapping_add(seed);
        v.network.seed = v.network.seed.wrapping_add(seed);
        v
    }
}

/// Directory-safe name of a target, e.g. `t1_0` or `t1_x`.
pub fn target_slug(target: &ConstraintTarget) -> String {
    let parts: Vec<String> = target.entries().iter().map(|c| c.map_or_else(|| "x".to_string(), |c| c.to_string())).collect();
    format!("t{}", parts.join("_"))
}

/// Outcome of a run; every file has already been written.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    /// Guidance scale used for each seed.
    pub scales: Vec<(u64, f64)>,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    /// Plain-text table of the metrics rows.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:<8} {:>6} {:>9} {:>9} {:>12}\n", "method", "target", "seed", "PC", "CS", "data_usage");
        for r in &self.rows {
            let cs = r.cs.map_or_else(|| "na".to_string(), |c| format!("{c:.2}"));
            let status = r.failure.as_deref().map_or(String::new(), |f| format!("  FAILED: {f}"));
            let _ = writeln!(
                out,
                "{:<8} {:<8} {:>6} {:>9.2} {:>9} {:>12}{status}",
                r.method, r.constraint, r.seed, r.pc, cs, r.data_usage
            );
        }
        out
    }
}

/// Summary columns of `diagnostics.csv`.
pub const DIAGNOSTICS_HEADER: &str = "method,constraint,seed,scale,misalignment_integral,mean_delta_e,mean_w,conflict_fraction,failures";

struct CellOutcome {
    row: MetricsRow,
    diagnostics: Option<String>,
}

/// Runs every configured cell and writes the report bundle under
/// `config.output_dir`. Existing checkpoints whose settings match are
/// reused; failing cells are recorded with a failure marker and do not
/// stop the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let out = &config.output_dir;
    mkdir(out)?;
    let bank = ClassifierBank::new(config.benchmark.mixture.clone(), config.benchmark.labels.clone())?;
    if config.landscape.enabled {
        write_reward_landscapes(config, &bank)?;
    }
    let mut rows = Vec::new();
    let mut diagnostics = vec![DIAGNOSTICS_HEADER.to_string()];
    let mut scales = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = out.join(format!("seed-{seed}"));
        mkdir(&seed_dir)?;
        let flow = load_or_train_flow(config, seed, &seed_dir);
        let scale = match &flow {
            Ok(field) => scale_for_seed(config, field, seed, &seed_dir),
            Err(_) => Ok(config.guidance.scale),
        };
        let cells = cell_list(config);
        let outcomes: Vec<CellOutcome> = cells
            .par_iter()
            .map(|(method, target)| {
                let failed = |msg: String| failure_outcome(config, *method, target.as_ref(), seed, msg);
                let field = match &flow {
                    Ok(f) => f,
                    Err(e) => return failed(format!("flow training: {e}")),
                };
                let scale = match &scale {
                    Ok(s) => *s,
                    Err(e) => return failed(format!("scale calibration: {e}")),
                };
                let dir = cell_dir(&seed_dir, *method, target.as_ref());
                match run_cell(config, field, &bank, *method, target.as_ref(), seed, scale, &dir) {
                    Ok(o) => {
                        let _ = std::fs::remove_file(dir.join("FAILED"));
                        o
                    }
                    Err(e) => {
                        let _ = mkdir(&dir).and_then(|_| {
                            let marker = dir.join("FAILED");
                            std::fs::write(&marker, format!("{e}\n")).map_err(|err| Error::io(&marker, err))
                        });
                        failed(e.to_string())
                    }
                }
            })
            .collect();
        for o in outcomes {
            rows.push(o.row);
            diagnostics.extend(o.diagnostics);
        }
        scales.push((seed, scale.unwrap_or(config.guidance.scale)));
    }
    write_metrics_csv(&rows, &out.join("metrics.csv"))?;
    let diag_path = out.join("diagnostics.csv");
    std::fs::write(&diag_path, diagnostics.join("\n") + "\n").map_err(|e| Error::io(&diag_path, e))?;
    let report = ExperimentReport {
        rows,
        scales,
        output_dir: out.clone(),
    };
    let summary = out.join("summary.txt");
    std::fs::write(&summary, report.table()).map_err(|e| Error::io(&summary, e))?;
    Ok(report)
}

/// Method/target cells in output order. With no targets, the unguided
/// method still yields a base-flow coverage cell.
fn cell_list(config: &ExperimentConfig) -> Vec<(Engine, Option<ConstraintTarget>)> {
    let mut cells = Vec::new();
    if config.methods.contains(&Engine::None) {
        cells.push((Engine::None, None));
    }
    for target in &config.targets {
        for &method in &config.methods {
            cells.push((method, Some(target.clone())));
        }
    }
    cells
}

fn cell_dir(seed_dir: &Path, method: Engine, target: Option<&ConstraintTarget>) -> PathBuf {
    seed_dir.join(method.name()).join(target.map_or_else(|| "any".to_string(), target_slug))
}

fn failure_outcome(config: &ExperimentConfig, method: Engine, target: Option<&ConstraintTarget>, seed: u64, msg: String) -> CellOutcome {
    CellOutcome {
        row: MetricsRow {
            method: method.name().to_string(),
            constraint: target.map_or_else(|| "any".to_string(), |t| t.to_string()),
            pc: f64::NAN,
            cs: Some(f64::NAN),
            n: config.n_eval,
            seed,
            time_ms_per_sample: None,
            data_usage: 0,
            failure: Some(msg),
        },
        diagnostics: None,
    }
}

/// Loads `flow.json` when it was trained with the same settings on the
/// same mixture, otherwise trains and saves it.
fn load_or_train_flow(config: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<VelocityField> {
    let flow_cfg = config.flow_for_seed(seed);
    let gm = &config.benchmark.mixture;
    let ck = seed_dir.join("flow.json");
    let stamp = seed_dir.join("flow.config.json");
    let stamp_text = serde_json::to_string_pretty(&(&flow_cfg, gm)).map_err(|e| Error::Parse(e.to_string()))?;
    if ck.exists() && std::fs::read_to_string(&stamp).ok().as_deref() == Some(stamp_text.as_str()) {
        if let Ok(field) = VelocityField::load(&ck) {
            if field.trained_on() == gm.descriptor_hash() {
                return Ok(field);
            }
        }
    }
    let training = train_flow(&flow_cfg, gm)?;
    training.field.save(&ck)?;
    training.write_log(&seed_dir.join("flow_loss.csv"))?;
    std::fs::write(&stamp, stamp_text).map_err(|e| Error::io(&stamp, e))?;
    Ok(training.field)
}

/// Single-classifier targets that some mode satisfies.
fn single_targets(table: &LabelTable) -> Vec<ConstraintTarget> {
    let g = table.n_classifiers();
    let mut out = Vec::new();
    for j in 0..g {
        for c in 0..=1u8 {
            let mut entries = vec![None; g];
            entries[j] = Some(c);
            if let Ok(t) = ConstraintTarget::new(entries) {
                if t.check_feasible(table).is_ok() {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Outcome of the guidance-scale sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleCalibration {
    pub scale: f64,
    /// False when no candidate met the threshold; `scale` is then the largest.
    pub reached: bool,
    /// `scale,constraint,cs` lines, one per candidate and target.
    pub log: String,
}

/// Runs the calibration sweep for `seed` whether or not it is enabled.
pub fn calibrate_scale(config: &ExperimentConfig, field: &dyn VelocityModel, seed: u64) -> Result<ScaleCalibration> {
    let cal = &config.calibration;
    let bank = ClassifierBank::new(config.benchmark.mixture.clone(), config.benchmark.labels.clone())?;
    let mut candidates = cal.candidates.clone();
    candidates.sort_by(f64::total_cmp);
    let targets = single_targets(&config.benchmark.labels);
    let mut log = String::from("scale,constraint,cs\n");
    let mut chosen = None;
    for &s in &candidates {
        let mut cfg = config.guidance.clone();
        cfg.engine = Engine::CovG;
        cfg.scale = s;
        let mut all_ok = true;
        for t in &targets {
            let set = RewardSet::for_target(bank.clone(), t, config.reward_weight)?;
            let report = batch_sample(field, &set, &cfg, None, cal.n, config.n_steps, seed, SampleOptions::default())?;
            let cs = metric_cs(&report.terminals, &config.benchmark.mixture, &config.benchmark.labels, t)?;
            let _ = writeln!(log, "{s},\"{t}\",{cs:.4}");
            all_ok &= cs >= cal.cs_threshold;
        }
        if all_ok {
            chosen = Some(s);
            break;
        }
    }
    Ok(ScaleCalibration {
        scale: chosen.unwrap_or(candidates[candidates.len() - 1]),
        reached: chosen.is_some(),
        log,
    })
}

/// The configured scale, or the calibrated one (logged to
/// `calibration.csv`) when the sweep is enabled.
fn scale_for_seed(config: &ExperimentConfig, field: &VelocityField, seed: u64, seed_dir: &Path) -> Result<f64> {
    if !config.calibration.enabled {
        return Ok(config.guidance.scale);
    }
    let cal = calibrate_scale(config, field, seed)?;
    let log = format!(
        "{}# chosen {}{}\n",
        cal.log,
        cal.scale,
        if cal.reached { "" } else { " (threshold not reached)" }
    );
    let path = seed_dir.join("calibration.csv");
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    Ok(cal.scale)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    field: &VelocityField,
    bank: &std::sync::Arc<ClassifierBank>,
    method: Engine,
    target: Option<&ConstraintTarget>,
    seed: u64,
    scale: f64,
    dir: &Path,
) -> Result<CellOutcome> {
    mkdir(dir)?;
    let gm = &config.benchmark.mixture;
    let table = &config.benchmark.labels;
    let mut cfg = config.guidance.clone();
    cfg.engine = method;
    cfg.scale = scale;
    // the unguided base-flow cell still needs a reward set for diagnostics
    let any_target = target.cloned().unwrap_or_else(|| single_targets(table).remove(0));
    let set = RewardSet::for_target(bank.clone(), &any_target, config.reward_weight)?;
    let (value, usage) = if method == Engine::Car {
        let t = target.ok_or_else(|| Error::Config("car needs a target".into()))?;
        let (v, u) = load_or_train_value(config, field, &set, &cfg, seed, dir)?;
        write_value_outputs(config, &v, &u, t, dir)?;
        (Some(v), Some(u))
    } else {
        (None, None)
    };
    let report = batch_sample(
        field,
        &set,
        &cfg,
        value.as_ref().map(|v| v as &dyn crate::guidance::ValueGradient),
        config.n_eval,
        config.n_steps,
        seed,
        SampleOptions::default(),
    )?;
    write_terminals_csv(&report.indices, &report.terminals, &dir.join("terminals.csv"))?;
    let (pc, cs) = match target {
        Some(t) => (metric_pc(&report.terminals, gm, table, t)?, Some(metric_cs(&report.terminals, gm, table, t)?)),
        None => (metric_pc_any(&report.terminals, gm), None),
    };
    let label = target.map_or_else(|| "any".to_string(), |t| t.to_string());
    emit_figure(
        &Figure::Scatter {
            title: format!("{} {label}", method.name()),
            bounds: config.landscape.bounds,
            series: vec![PointSeries {
                label: method.name().to_string(),
                points: report.terminals.clone(),
            }],
            markers: gm.means().to_vec(),
        },
        &dir.join("terminals.svg"),
    )?;
    let row = MetricsRow {
        method: method.name().to_string(),
        constraint: label.clone(),
        pc,
        cs,
        n: config.n_eval,
        seed,
        time_ms_per_sample: config.timing.then_some(report.time_ms_per_sample),
        data_usage: usage.as_ref().map_or(0, |u| u.trajectories_consumed),
        failure: None,
    };
    Ok(CellOutcome {
        row,
        diagnostics: Some(diagnostics_line(method, &label, seed, scale, &report)),
    })
}

fn diagnostics_line(method: Engine, label: &str, seed: u64, scale: f64, r: &SampleReport) -> String {
    format!(
        "{},\"{label}\",{seed},{scale},{:.6},{:.6},{:.6},{:.6},{}",
        method.name(),
        r.misalignment_integral,
        r.mean_delta_e,
        r.mean_w,
        r.conflict_fraction,
        r.failures
    )
}

/// Loads `value.json` and `usage.json` when the stamp matches, otherwise
/// runs guidance training and saves both.
fn load_or_train_value(
    config: &ExperimentConfig,
    field: &VelocityField,
    set: &RewardSet,
    cfg: &GuidanceConfig,
    seed: u64,
    dir: &Path,
) -> Result<(ValueFunction, GuidanceUsage)> {
    let train = config.value_for_seed(seed);
    let (ck, usage_path, stamp) = (dir.join("value.json"), dir.join("usage.json"), dir.join("value.config.json"));
    let stamp_text = serde_json::to_string_pretty(&(&train, cfg, config.reward_weight, field.params().digest())).map_err(|e| Error::Parse(e.to_string()))?;
    if ck.exists() && std::fs::read_to_string(&stamp).ok().as_deref() == Some(stamp_text.as_str()) {
        let loaded = ValueFunction::load(&ck).and_then(|v| {
            let text = std::fs::read_to_string(&usage_path).map_err(|e| Error::io(&usage_path, e))?;
            let usage: GuidanceUsage = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            Ok((v, usage))
        });
        if let Ok(pair) = loaded {
            return Ok(pair);
        }
    }
    let (value, usage) = train_guidance(field, set, cfg, &train)?;
    value.save(&ck)?;
    let usage_text = serde_json::to_string_pretty(&usage).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&usage_path, usage_text).map_err(|e| Error::io(&usage_path, e))?;
    std::fs::write(&stamp, stamp_text).map_err(|e| Error::io(&stamp, e))?;
    Ok((value, usage))
}

fn write_value_outputs(config: &ExperimentConfig, value: &ValueFunction, usage: &GuidanceUsage, target: &ConstraintTarget, dir: &Path) -> Result<()> {
    usage.write_log(&dir.join("guidance_log.csv"))?;
    emit_figure(
        &Figure::Line {
            title: format!("conflict fraction {target}"),
            x_label: "round".into(),
            y_label: "conflict fraction".into(),
            series: vec![LineSeries {
                label: target.to_string(),
                points: usage.rounds_log.iter().map(|r| (r.round as f64, r.conflict_fraction)).collect(),
            }],
        },
        &dir.join("conflict_fraction.svg"),
    )?;
    if !config.landscape.enabled {
        return Ok(());
    }
    for &t in &config.landscape.value_times {
        let grid = landscape_grid(
            GridKind::LearnedValue { t },
            None,
            Some(value),
            config.landscape.bounds,
            config.landscape.resolution,
            &GridOptions::default(),
        )?;
        let stem = format!("learned_value_t{t:.2}");
        grid.write_csv(&dir.join(format!("{stem}.grid.csv")))?;
        emit_figure(
            &Figure::Heatmap {
                title: format!("V at t={t:.2} {target}"),
                grid,
            },
            &dir.join(format!("{stem}.svg")),
        )?;
    }
    Ok(())
}

/// Energy, conflict, and dissipation grids of every target's reward set.
fn write_reward_landscapes(config: &ExperimentConfig, bank: &std::sync::Arc<ClassifierBank>) -> Result<()> {
    let dir = config.output_dir.join("landscapes");
    mkdir(&dir)?;
    let opts = GridOptions {
        epsilon_cos: config.guidance.epsilon_cos,
        conflict_mode: config.guidance.conflict_mode,
        routed: None,
    };
    for target in &config.targets {
        let set = RewardSet::for_target(bank.clone(), target, config.reward_weight)?;
        for kind in [GridKind::Energy, GridKind::ConflictW, GridKind::DeltaE] {
            let grid = landscape_grid(kind, Some(&set), None, config.landscape.bounds, config.landscape.resolution, &opts)?;
            let stem = format!("{}.{}", target_slug(target), kind.name());
            grid.write_csv(&dir.join(format!("{stem}.grid.csv")))?;
            emit_figure(
                &Figure::Heatmap {
                    title: target.to_string(),
                    grid,
                },
                &dir.join(format!("{stem}.svg")),
            )?;
        }
    }
    Ok(())
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            output_dir: dir.to_path_buf(),
            n_eval: 200,
            n_steps: 20,
            ..ExperimentConfig::default()
        };
        cfg.flow.steps = 60;
        cfg.flow.batch_size = 64;
        cfg.flow.network.hidden_dims = vec![16, 16];
        cfg.value.rounds_max = 2;
        cfg.value.rollouts_per_round = 16;
        cfg.value.grad_updates_per_round = 5;
        cfg.value.rollout_steps = 5;
        cfg.value.batch_size = 32;
        cfg.value.network.hidden_dims = vec![8, 8];
        cfg.landscape.resolution = Resolution { nx: 8, ny: 8 };
        cfg.landscape.value_times = vec![0.5];
        cfg
    }

    #[test]
    fn slugs_are_directory_safe() {
        assert_eq!(target_slug(&"[1,0]".parse().unwrap()), "t1_0");
        assert_eq!(target_slug(&"[_,1]".parse().unwrap()), "tx_1");
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("targets = [\"[0,1]\"]").is_err());
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("n_eval = 50\n[value]\nrounds_max = 3\n").unwrap();
        assert_eq!(cfg.n_eval, 50);
        assert_eq!(cfg.value.rounds_max, 3);
        assert_eq!(cfg.value.rollouts_per_round, GuidanceTrainConfig::default().rollouts_per_round);
    }

    #[test]
    fn single_targets_of_benchmark() {
        let names: Vec<String> = single_targets(&LabelTable::benchmark()).iter().map(|t| t.to_string()).collect();
        assert_eq!(names, ["[0,_]", "[1,_]", "[_,0]", "[_,1]"]);
    }

    #[test]
    fn base_flow_only_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            methods: vec![Engine::None],
            targets: vec![],
            ..tiny(dir.path())
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!((row.method.as_str(), row.constraint.as_str(), row.cs), ("none", "any", None));
        assert!((0.0..=100.0).contains(&row.pc));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(super::super::metrics::METRICS_HEADER));
        assert!(dir.path().join("seed-0/none/any/terminals.svg").exists());
    }

    #[test]
    fn full_run_writes_bundle_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            targets: vec!["[1,0]".parse().unwrap()],
            ..tiny(dir.path())
        };
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.rows.len(), 5);
        assert!(first.rows.iter().all(|r| r.failure.is_none()), "{}", first.table());
        let car = first.rows.iter().find(|r| r.method == "car").unwrap();
        assert!(car.data_usage > 0 && car.data_usage <= 32);
        for f in [
            "metrics.csv",
            "diagnostics.csv",
            "summary.txt",
            "landscapes/t1_0.energy.grid.csv",
            "landscapes/t1_0.conflict_w.svg",
            "seed-0/flow.json",
            "seed-0/car/t1_0/value.json",
            "seed-0/car/t1_0/guidance_log.csv",
            "seed-0/car/t1_0/conflict_fraction.svg",
            "seed-0/car/t1_0/learned_value_t0.50.grid.csv",
            "seed-0/pcgrad/t1_0/terminals.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let bytes = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let flow_mtime = std::fs::metadata(dir.path().join("seed-0/flow.json")).unwrap().modified().unwrap();
        let second = run_experiment(&cfg).unwrap();
        assert_eq!(second.rows, first.rows);
        assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), bytes);
        let again = std::fs::metadata(dir.path().join("seed-0/flow.json")).unwrap().modified().unwrap();
        assert_eq!(flow_mtime, again, "checkpoint should be reused");
    }

    #[test]
    fn failing_cell_is_marked_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            methods: vec![Engine::CovG, Engine::Car],
            targets: vec!["[1,0]".parse().unwrap()],
            landscape: LandscapeConfig {
                enabled: false,
                ..LandscapeConfig::default()
            },
            ..tiny(dir.path())
        };
        // a vector-valued value net is rejected when the car cell trains
        cfg.value.network.output_dim = 2;
        let report = run_experiment(&cfg).unwrap();
        let covg = report.rows.iter().find(|r| r.method == "cov_g").unwrap();
        assert!(covg.failure.is_none());
        let car = report.rows.iter().find(|r| r.method == "car").unwrap();
        assert!(car.failure.is_some());
        assert!(dir.path().join("seed-0/car/t1_0/FAILED").exists());
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.contains("car,\"[1,0]\",nan,nan,200,0,na,na"), "{csv}");
    }
}
