//! Benchmark harness: metrics, landscapes, spurious minima, experiment
//! orchestration, and figures.

pub mod experiment;
pub mod figure;
pub mod landscape;
pub mod metrics;
pub mod minima;

pub use experiment::{calibrate_scale, run_experiment, ExperimentConfig, ExperimentReport, ScaleCalibration};
pub use figure::{emit_figure, Figure, LineSeries, PointSeries};
pub use landscape::{landscape_grid, Bounds, GridKind, GridOptions, LandscapeGrid, Resolution};
pub use metrics::{metric_cs, metric_cs_product, metric_pc, metric_pc_any, MetricsRow};
pub use minima::{find_spurious_minima, SpuriousMinimum};
