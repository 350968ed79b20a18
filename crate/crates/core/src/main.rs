//! Command-line front end: train the flow and the CAR value function,
//! sample, evaluate, export landscapes, and run the full benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowguide::bench::experiment::target_slug;
use flowguide::bench::figure::{emit_figure, Figure, PointSeries};
use flowguide::bench::landscape::{landscape_grid, GridKind, GridOptions};
use flowguide::bench::metrics::{metric_cs, metric_pc, metric_pc_any, write_terminals_csv};
use flowguide::bench::{run_experiment, ExperimentConfig};
use flowguide::cfm::{compare_with_oracle, train_flow, VelocityField};
use flowguide::guidance::{Engine, ValueGradient};
use flowguide::mog::ConstraintTarget;
use flowguide::rewards::{ClassifierBank, RewardSet};
use flowguide::sampler::{batch_sample, SampleOptions};
use flowguide::value::{train_guidance, ValueFunction};
use flowguide::{Error, Result, Vec2};

#[derive(Parser)]
#[command(name = "flowguide", version, about = "Guided sampling for 2D flow matching under compositional rewards")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the velocity field and compare it with the analytic oracle.
    TrainFlow,
    /// Train the CAR value function for one target.
    TrainGuidance {
        #[arg(long)]
        target: ConstraintTarget,
        /// Flow checkpoint (default: <out>/flow.json).
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Draw guided samples and report PC / CS.
    Sample {
        #[arg(long)]
        method: Engine,
        #[arg(long)]
        target: ConstraintTarget,
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Value checkpoint for car (default: <out>/value-<target>.json).
        #[arg(long)]
        value: Option<PathBuf>,
        /// Number of samples (default: `n_eval`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a terminals CSV (`idx,x1,x2`) against a target.
    Eval {
        #[arg(long)]
        terminals: PathBuf,
        /// Omit for any-mode coverage only.
        #[arg(long)]
        target: Option<ConstraintTarget>,
    },
    /// Export a landscape grid as CSV and SVG heatmap.
    Landscape {
        #[arg(long)]
        target: ConstraintTarget,
        #[arg(long, value_enum, default_value_t = Kind::Energy)]
        kind: Kind,
        /// Time for learned-value grids.
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        /// Value checkpoint for learned-value grids.
        #[arg(long)]
        value: Option<PathBuf>,
    },
    /// Run the full experiment and print the metrics table.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Energy,
    ConflictW,
    DeltaE,
    LearnedValue,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    let seed = cfg.seeds[0];
    let gm = &cfg.benchmark.mixture;
    let table = &cfg.benchmark.labels;
    let bank = ClassifierBank::new(gm.clone(), table.clone())?;
    let flow_path = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| out.join("flow.json"));
    let value_path = |t: &ConstraintTarget| out.join(format!("value-{}.json", target_slug(t)));
    match &cli.command {
        Command::TrainFlow => {
            mkdir(&out)?;
            let training = train_flow(&cfg.flow_for_seed(seed), gm)?;
            training.field.save(&out.join("flow.json"))?;
            training.write_log(&out.join("flow_loss.csv"))?;
            let cmp = compare_with_oracle(&training.field, gm, -12.0, 14.0, 40, 20_000, seed)?;
            println!("saved {}", out.join("flow.json").display());
            println!(
                "velocity RMSE vs oracle {:.4} over {} points; terminal mean error {:.4}",
                cmp.velocity_rmse, cmp.points, cmp.terminal_mean_error
            );
        }
        Command::TrainGuidance { target, flow } => {
            mkdir(&out)?;
            let field = VelocityField::load(&flow_path(flow))?;
            let set = RewardSet::for_target(bank, target, cfg.reward_weight)?;
            let mut g = cfg.guidance.clone();
            g.engine = Engine::Car;
            let (value, usage) = train_guidance(&field, &set, &g, &cfg.value_for_seed(seed))?;
            value.save(&value_path(target))?;
            usage.write_log(&out.join(format!("guidance_log-{}.csv", target_slug(target))))?;
            println!(
                "saved {}: {} rounds, {} trajectories, final conflict fraction {:.4}{}",
                value_path(target).display(),
                usage.rounds,
                usage.trajectories_consumed,
                usage.final_conflict_fraction,
                if usage.converged { " (early stop)" } else { "" }
            );
        }
        Command::Sample {
            method,
            target,
            flow,
            value,
            n,
        } => {
            mkdir(&out)?;
            let field = VelocityField::load(&flow_path(flow))?;
            let set = RewardSet::for_target(bank, target, cfg.reward_weight)?;
            let mut g = cfg.guidance.clone();
            g.engine = *method;
            let vf = match method {
                Engine::Car => Some(ValueFunction::load(&value.clone().unwrap_or_else(|| value_path(target)))?),
                _ => None,
            };
            let n = n.unwrap_or(cfg.n_eval);
            let report = batch_sample(
                &field,
                &set,
                &g,
                vf.as_ref().map(|v| v as &dyn ValueGradient),
                n,
                cfg.n_steps,
                seed,
                SampleOptions::default(),
            )?;
            let stem = format!("terminals-{}-{}", method.name(), target_slug(target));
            write_terminals_csv(&report.indices, &report.terminals, &out.join(format!("{stem}.csv")))?;
            emit_figure(
                &Figure::Scatter {
                    title: format!("{} {target}", method.name()),
                    bounds: cfg.landscape.bounds,
                    series: vec![PointSeries {
                        label: method.name().to_string(),
                        points: report.terminals.clone(),
                    }],
                    markers: gm.means().to_vec(),
                },
                &out.join(format!("{stem}.svg")),
            )?;
            println!(
                "{} {target}: PC {:.2} CS {:.2} (n={}, failures {}, mean w {:.4}, {:.4} ms/sample)",
                method.name(),
                metric_pc(&report.terminals, gm, table, target)?,
                metric_cs(&report.terminals, gm, table, target)?,
                report.terminals.len(),
                report.failures,
                report.mean_w,
                report.time_ms_per_sample
            );
        }
        Command::Eval { terminals, target } => {
            let points = read_terminals(terminals)?;
            println!("PC(any) {:.2}", metric_pc_any(&points, gm));
            if let Some(t) = target {
                println!("PC {:.2} CS {:.2}", metric_pc(&points, gm, table, t)?, metric_cs(&points, gm, table, t)?);
            }
        }
        Command::Landscape { target, kind, t, value } => {
            mkdir(&out)?;
            let set = RewardSet::for_target(bank, target, cfg.reward_weight)?;
            let vf = match kind {
                Kind::LearnedValue => Some(ValueFunction::load(&value.clone().unwrap_or_else(|| value_path(target)))?),
                _ => None,
            };
            let grid_kind = match kind {
                Kind::Energy => GridKind::Energy,
                Kind::ConflictW => GridKind::ConflictW,
                Kind::DeltaE => GridKind::DeltaE,
                Kind::LearnedValue => GridKind::LearnedValue { t: *t },
            };
            let opts = GridOptions {
                epsilon_cos: cfg.guidance.epsilon_cos,
                conflict_mode: cfg.guidance.conflict_mode,
                routed: None,
            };
            let grid = landscape_grid(grid_kind, Some(&set), vf.as_ref(), cfg.landscape.bounds, cfg.landscape.resolution, &opts)?;
            let stem = format!("{}.{}", target_slug(target), grid_kind.name());
            grid.write_csv(&out.join(format!("{stem}.grid.csv")))?;
            let (lo, hi) = grid.min_max();
            emit_figure(
                &Figure::Heatmap {
                    title: target.to_string(),
                    grid,
                },
                &out.join(format!("{stem}.svg")),
            )?;
            println!("wrote {stem}.grid.csv (min {lo:.4}, max {hi:.4})");
        }
        Command::Report => {
            let report = run_experiment(&cfg)?;
            print!("{}", report.table());
            for (seed, scale) in &report.scales {
                println!("seed {seed}: guidance scale {scale}");
            }
            println!("bundle written to {}", report.output_dir.display());
        }
    }
    Ok(())
}

fn read_terminals(path: &Path) -> Result<Vec<Vec2>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("expected idx,x1,x2 in {line:?}")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
            Ok(Vec2::new(num(cols[1])?, num(cols[2])?))
        })
        .collect()
}
