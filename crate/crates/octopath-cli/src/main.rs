//! Command-line front end for the full pipeline: simulate teacher runs,
//! build datasets, train checkpoints, predict, plan, benchmark, run the
//! ablation sweep, and build octree maps from point-cloud files.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use octopath::config::{parse_config, RunConfig};
use octopath::eval::Method;
use octopath::geom::{Pose2, Vec2, Vec3};
use octopath::model::Head;
use octopath::pipeline;

#[derive(Parser)]
#[command(name = "octopath", version, about = "Octree-based local trajectory prediction workbench")]
struct Cli {
    /// Config file with `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Classification,
    Regression,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate worlds and collect self-supervised teacher drive logs.
    Simulate {
        /// Log-set tag; independent tags give independent worlds.
        #[arg(long, default_value = "train")]
        tag: String,
    },
    /// Convert drive logs into a dataset container.
    Dataset {
        /// Directory of .jsonl drive logs.
        #[arg(long)]
        logs: PathBuf,
        /// Output container path (defaults to <out>/dataset.opd).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model head on a dataset container.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "classification")]
        head: HeadArg,
    },
    /// Predict a trajectory at one log tick using a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        tick: usize,
    },
    /// Hybrid A* on a serialized octree map; writes the pose CSV.
    Plan {
        #[arg(long)]
        map: PathBuf,
        /// Start pose: x y theta.
        #[arg(long, num_args = 3, allow_negative_numbers = true)]
        start: Vec<f64>,
        /// Goal position: x y.
        #[arg(long, num_args = 2, allow_negative_numbers = true)]
        goal: Vec<f64>,
    },
    /// Benchmark methods over held-out logs; writes report and curve files.
    Bench {
        #[arg(long)]
        logs: PathBuf,
        /// Classification checkpoint (required for the octopath method).
        #[arg(long)]
        classification: Option<PathBuf>,
        /// Regression checkpoint (required for the regression method).
        #[arg(long)]
        regression: Option<PathBuf>,
        /// Comma-separated subset of octopath,regression,hybrid_astar,oracle.
        #[arg(long, value_delimiter = ',', default_value = "octopath,regression,hybrid_astar")]
        methods: Vec<String>,
    },
    /// Octree-resolution x hidden-size ablation sweep.
    Sweep {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Build an octree map from a whitespace-separated x y z point file.
    MapBuild {
        #[arg(long)]
        cloud: PathBuf,
        /// Sensor origin: x y z.
        #[arg(long, num_args = 3, allow_negative_numbers = true, default_values_t = [0.0, 0.0, 0.0])]
        origin: Vec<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { tag } => {
            let dir = cli.out.join("logs").join(&tag);
            let summary = pipeline::simulate(&cfg, &dir, &tag)?;
            println!(
                "simulated {} runs ({} ticks total, {} aborted) -> {}",
                summary.log_paths.len(),
                summary.total_ticks,
                summary.aborted_runs,
                dir.display()
            );
        }
        Command::Dataset { logs, output } => {
            let out_file = output.unwrap_or_else(|| cli.out.join("dataset.opd"));
            let summary = pipeline::build_dataset_file(&cfg, &logs, &out_file)?;
            println!(
                "dataset: {} samples from {} runs ({} of {} anchors dropped) -> {}",
                summary.n_samples,
                summary.n_runs,
                summary.dropped,
                summary.anchors,
                out_file.display()
            );
            if summary.drop_warning {
                eprintln!(
                    "warning: {:.1}% of anchors dropped (labels outside the window); \
                     consider a larger window or shorter horizon",
                    100.0 * summary.dropped as f64 / summary.anchors as f64
                );
            }
        }
        Command::Train { dataset, head } => {
            let (head, name) = match head {
                HeadArg::Classification => (Head::Classification, "classification"),
                HeadArg::Regression => (Head::Regression, "regression"),
            };
            let ckpt = cli.out.join(format!("{name}.opm"));
            let curve = cli.out.join(format!("{name}_curve.csv"));
            let summary = pipeline::train_from_container(&cfg, &dataset, head, &ckpt, &curve)?;
            println!(
                "trained {name} head: {} epochs in {:.1}s, best epoch {} (loss {:.4}), \
                 checkpoint {} bytes -> {}",
                summary.epochs_run,
                summary.seconds,
                summary.best_epoch,
                summary.best_val,
                summary.checkpoint_bytes,
                ckpt.display()
            );
        }
        Command::Predict { checkpoint, log, tick } => {
            let out_csv = cli.out.join("prediction.csv");
            pipeline::predict_at_tick(&cfg, &checkpoint, &log, tick, &out_csv)?;
            println!("prediction -> {}", out_csv.display());
        }
        Command::Plan { map, start, goal } => {
            let out_csv = cli.out.join("plan.csv");
            let plan = pipeline::plan_on_map(
                &cfg,
                &map,
                Pose2::new(start[0], start[1], start[2]),
                Vec2::new(goal[0], goal[1]),
                &out_csv,
            )?;
            println!(
                "plan: {} poses, length {:.2} m, cost {:.2} ({} expansions) -> {}",
                plan.poses.len(),
                plan.length,
                plan.cost,
                plan.expansions,
                out_csv.display()
            );
        }
        Command::Bench { logs, classification, regression, methods } => {
            let mut parsed = Vec::new();
            for m in methods.iter().filter(|m| !m.trim().is_empty()) {
                match Method::parse(m.trim()) {
                    Some(method) => parsed.push(method),
                    None => bail!("unknown method `{m}`"),
                }
            }
            let out_dir = cli.out.join("bench");
            let artifacts = pipeline::bench(
                &cfg,
                &logs,
                classification.as_deref(),
                regression.as_deref(),
                &parsed,
                &out_dir,
            )?;
            for r in &artifacts.records {
                println!(
                    "{:>10} {:>12}: rmse {:.3} m (mean ex {:.3}, ey {:.3}; {} windows, {} failures)",
                    r.scenario, r.method, r.rmse, r.mean_ex, r.mean_ey, r.windows, r.failures
                );
            }
            for f in &artifacts.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { logs } => {
            let out_csv = cli.out.join("sweep.csv");
            let rows = pipeline::sweep(&cfg, &logs, &out_csv)?;
            for r in &rows {
                println!(
                    "res {:.2} m, hidden {:>4}: rmse {:.3} m, {:.1}s train ({} classes, {} samples)",
                    r.resolution, r.hidden_dim, r.rmse, r.train_seconds, r.n_classes, r.n_samples
                );
            }
            println!("wrote {}", out_csv.display());
        }
        Command::MapBuild { cloud, origin } => {
            let out_map = cli.out.join("map.oct");
            let map = pipeline::map_build(
                &cfg,
                &cloud,
                Vec3::new(origin[0], origin[1], origin[2]),
                &out_map,
            )?;
            println!(
                "map: {} nodes ({} leaves) at {} m resolution -> {}",
                map.node_count(),
                map.leaf_count(),
                map.resolution(),
                out_map.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
