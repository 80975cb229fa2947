//! End-to-end pipeline stages behind the CLI subcommands: simulate worlds
//! and collect teacher logs, build the dataset container, train checkpoints,
//! benchmark methods, run the ablation sweep, and file-level map building.
//! Every stage derives its randomness from the config's global seed, so a
//! full pipeline run is byte-reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{derive_seed, ConfigError, RunConfig};
use crate::dataset::{
    build_samples, position_of_cell, split_dataset, Dataset, DatasetError, GridSpec,
    MapBuilderConfig, Split,
};
use crate::eval::{
    error_curve_csv, error_curve_svg, latency_bench, report_csv, run_benchmark, BenchContext,
    EvalError, Method, MetricsRecord, Scenario,
};
use crate::geom::{Pose2, Rect, Vec2, Vec3};
use crate::model::{
    curve_to_csv, load_checkpoint, predict, save_checkpoint, train, DecodeMode, Head, ModelError,
    ModelSpec, TrainConfig,
};
use crate::octree::{parse_point_cloud, MapError, OctreeMap};
use crate::planner::{hybrid_astar, motion_primitives, PlanError, PlannerConfig};
use crate::world::{
    collect_run, make_route, DriveLog, DynamicObstacle, ReferencePath, RouteKind, Shape, World,
    WorldError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

/// Reference route for a named kind, sized to the configured world square.
pub fn route_for_kind(cfg: &RunConfig, kind: &str) -> Result<ReferencePath, PipelineError> {
    let s = cfg.world_size;
    let spacing = cfg.sim_route_spacing;
    let kind_spec = match kind {
        "line" => RouteKind::Line {
            start: Vec2::new(2.0, s / 2.0),
            end: Vec2::new(s - 2.0, s / 2.0),
        },
        "s_curve" => RouteKind::SCurve {
            start: Vec2::new(2.0, s * 0.35),
            heading: 0.0,
            radius_first: s * 0.2,
            radius_second: s * 0.2,
            angle_first: 1.4,
            angle_second: 1.4,
        },
        "circle" => RouteKind::Circle {
            center: Vec2::new(s / 2.0, s / 2.0),
            radius: s / 2.0 - 4.0,
        },
        other => {
            return Err(ConfigError::Invalid {
                key: "sim.routes".into(),
                msg: format!("unknown route kind `{other}`"),
            }
            .into())
        }
    };
    Ok(make_route(&kind_spec, spacing)?)
}

fn world_for_run(cfg: &RunConfig, route: &ReferencePath, seed: u64) -> World {
    let bounds = Rect::new(Vec2::ZERO, Vec2::new(cfg.world_size, cfg.world_size));
    let mut world = if cfg.world_obstacles > 0 {
        World::with_random_obstacles(
            bounds,
            route,
            cfg.world_obstacles,
            cfg.world_start_clearance,
            seed,
        )
    } else {
        World::empty(bounds, seed)
    };
    if cfg.world_dynamic_obstacles > 0 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5);
        for _ in 0..cfg.world_dynamic_obstacles {
            let c = Vec2::new(
                rng.gen_range(3.0..cfg.world_size - 3.0),
                rng.gen_range(3.0..cfg.world_size - 3.0),
            );
            if route.distance_to(c) < cfg.world_start_clearance {
                continue;
            }
            world.dynamics.push(DynamicObstacle {
                shape: Shape::Circle { center: c, radius: 0.4 },
                velocity: Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            });
        }
    }
    world
}

#[derive(Debug, Clone)]
pub struct SimSummary {
    pub log_paths: Vec<PathBuf>,
    pub aborted_runs: usize,
    pub total_ticks: usize,
}

/// Simulate every configured route kind x runs_per_route and write one
/// JSONL drive log per run. `tag` keeps independent log sets (e.g. train vs
/// eval) reproducibly distinct.
pub fn simulate(cfg: &RunConfig, out_dir: &Path, tag: &str) -> Result<SimSummary, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let mut summary = SimSummary { log_paths: Vec::new(), aborted_runs: 0, total_ticks: 0 };
    let mut run_id: u32 = 0;
    for kind in &cfg.sim_routes {
        let route = route_for_kind(cfg, kind)?;
        for run in 0..cfg.sim_runs_per_route {
            let seed = derive_seed(cfg.seed, &format!("sim/{tag}/{kind}/{run}"));
            let world = world_for_run(cfg, &route, seed);
            let log = collect_run(
                &world,
                &route,
                &cfg.kin,
                cfg.sim_dt,
                cfg.sim_ticks,
                &cfg.teacher,
                run_id,
            )?;
            summary.aborted_runs += log.aborted as usize;
            summary.total_ticks += log.ticks.len();
            let path = out_dir.join(format!("{kind}_{run:02}.jsonl"));
            write_file(&path, log.to_jsonl().as_bytes())?;
            summary.log_paths.push(path);
            run_id += 1;
        }
    }
    Ok(summary)
}

/// Sorted JSONL logs in a directory.
pub fn read_logs(dir: &Path) -> Result<Vec<(String, DriveLog)>, PipelineError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let text = fs::read_to_string(&path)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        out.push((stem, DriveLog::from_jsonl(&text)?));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_runs: usize,
    pub dropped: usize,
    pub anchors: usize,
    /// True when more than 5% of candidate anchors were dropped.
    pub drop_warning: bool,
}

/// Build the dataset container from every log in `logs_dir`.
pub fn build_dataset_file(
    cfg: &RunConfig,
    logs_dir: &Path,
    out_file: &Path,
) -> Result<DatasetSummary, PipelineError> {
    let logs = read_logs(logs_dir)?;
    if logs.is_empty() {
        return Err(PipelineError::Io(format!("no .jsonl logs in {}", logs_dir.display())));
    }
    let map_cfg = MapBuilderConfig { fusion: cfg.fusion(), margin: None };
    let mut samples = Vec::new();
    let mut dropped = 0;
    let mut anchors = 0;
    for (_, log) in &logs {
        match build_samples(log, &cfg.grid, cfg.tau_i, cfg.tau_o, &map_cfg) {
            Ok(out) => {
                samples.extend(out.samples);
                dropped += out.dropped;
                anchors += out.anchors;
            }
            Err(DatasetError::InsufficientLog(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let n_runs = {
        let mut runs: Vec<u32> = samples.iter().map(|s| s.run_id).collect();
        runs.sort_unstable();
        runs.dedup();
        runs.len()
    };
    let dataset = split_dataset(
        cfg.grid,
        cfg.tau_i,
        cfg.tau_o,
        samples,
        cfg.split_ratios,
        derive_seed(cfg.seed, "split"),
    )?;
    write_file(out_file, &dataset.serialize())?;
    Ok(DatasetSummary {
        n_samples: dataset.samples.len(),
        n_runs,
        dropped,
        anchors,
        drop_warning: anchors > 0 && (dropped as f64) / (anchors as f64) > 0.05,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub checkpoint_bytes: usize,
    pub seconds: f64,
}

/// Train one head on a dataset container and write the checkpoint (params
/// only) and learning-curve CSV.
pub fn train_from_container(
    cfg: &RunConfig,
    dataset_path: &Path,
    head: Head,
    ckpt_out: &Path,
    curve_out: &Path,
) -> Result<TrainSummary, PipelineError> {
    let bytes = fs::read(dataset_path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dataset_path.display())))?;
    let dataset = Dataset::deserialize(&bytes)?;
    let spec = ModelSpec::for_grid(
        &dataset.spec,
        dataset.tau_i,
        dataset.tau_o,
        cfg.hidden_dim,
        cfg.embed_dim,
        head,
    );
    let tag = match head {
        Head::Classification => "train/classification",
        Head::Regression => "train/regression",
    };
    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, tag),
        teacher_forcing: cfg.teacher_forcing,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let result = train(&dataset, spec, &train_cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let ckpt = save_checkpoint(&result.params, &dataset.spec, None);
    write_file(ckpt_out, &ckpt)?;
    write_file(curve_out, curve_to_csv(&result.curve).as_bytes())?;
    Ok(TrainSummary {
        epochs_run: result.curve.len(),
        best_epoch: result.best_epoch,
        best_val: result.best_val,
        checkpoint_bytes: ckpt.len(),
        seconds,
    })
}

/// Group logs into scenarios by route kind (the filename prefix).
pub fn scenarios_from_logs(logs: Vec<(String, DriveLog)>) -> Vec<Scenario> {
    let mut scenarios: Vec<Scenario> = Vec::new();
    for (stem, log) in logs {
        let kind = stem.rsplit_once('_').map(|(k, _)| k.to_string()).unwrap_or(stem);
        match scenarios.iter_mut().find(|s| s.name == kind) {
            Some(s) => s.logs.push(log),
            None => scenarios.push(Scenario { name: kind, logs: vec![log] }),
        }
    }
    scenarios
}

pub struct BenchArtifacts {
    pub records: Vec<MetricsRecord>,
    pub files: Vec<PathBuf>,
}

/// Benchmark the requested methods over held-out logs; writes report.csv,
/// per-scenario error-curve CSV/SVG, and the latency report.
pub fn bench(
    cfg: &RunConfig,
    logs_dir: &Path,
    cls_ckpt: Option<&Path>,
    reg_ckpt: Option<&Path>,
    methods: &[Method],
    out_dir: &Path,
) -> Result<BenchArtifacts, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let logs = read_logs(logs_dir)?;
    let scenarios = scenarios_from_logs(logs);

    let load = |path: Option<&Path>, head: Head| -> Result<Option<_>, PipelineError> {
        match path {
            None => Ok(None),
            Some(p) => {
                let bytes = fs::read(p)
                    .map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))?;
                let ckpt = load_checkpoint(&bytes)?;
                if ckpt.params.spec.head != head {
                    return Err(ModelError::HeadMismatch {
                        expected: head,
                        got: ckpt.params.spec.head,
                    }
                    .into());
                }
                if ckpt.grid != cfg.grid {
                    return Err(ConfigError::Invalid {
                        key: "grid".into(),
                        msg: format!(
                            "checkpoint grid {:?} does not match configured grid {:?}",
                            ckpt.grid, cfg.grid
                        ),
                    }
                    .into());
                }
                Ok(Some(ckpt.params))
            }
        }
    };
    let classification = load(cls_ckpt, Head::Classification)?;
    let regression = load(reg_ckpt, Head::Regression)?;

    let needs_cls = methods.contains(&Method::Octopath);
    let needs_reg = methods.contains(&Method::Regression);
    if needs_cls && classification.is_none() {
        return Err(EvalError::MissingArtifact("classification checkpoint".into()).into());
    }
    if needs_reg && regression.is_none() {
        return Err(EvalError::MissingArtifact("regression checkpoint".into()).into());
    }

    let ctx = BenchContext {
        grid: cfg.grid,
        tau_i: cfg.tau_i,
        tau_o: cfg.tau_o,
        map_cfg: MapBuilderConfig { fusion: cfg.fusion(), margin: None },
        kin: cfg.kin,
        stride: cfg.bench_stride,
        decode: if cfg.bench_beam > 1 {
            DecodeMode::Beam(cfg.bench_beam)
        } else {
            DecodeMode::Greedy
        },
        classification,
        regression,
        plan_speed: cfg.teacher.v_cruise,
        plan_curvatures: cfg.teacher.n_curvatures,
        plan_duration: cfg.teacher.prim_duration,
        footprint_radius: cfg.teacher.footprint_radius,
    };
    let records = run_benchmark(&scenarios, methods, &ctx)?;

    let mut files = Vec::new();
    let report_path = out_dir.join("report.csv");
    write_file(&report_path, report_csv(&records).as_bytes())?;
    files.push(report_path);
    for scenario in &scenarios {
        let csv_path = out_dir.join(format!("error_curve_{}.csv", scenario.name));
        write_file(&csv_path, error_curve_csv(&records, &scenario.name).as_bytes())?;
        files.push(csv_path);
        let svg_path = out_dir.join(format!("error_curve_{}.svg", scenario.name));
        write_file(&svg_path, error_curve_svg(&records, &scenario.name).as_bytes())?;
        files.push(svg_path);
    }
    if let Some(params) = ctx.classification.as_ref() {
        let report = latency_bench(params, &cfg.grid, cfg.latency_trials.max(10))?;
        let latency_path = out_dir.join("latency.csv");
        write_file(&latency_path, report.to_csv().as_bytes())?;
        files.push(latency_path);
    }
    Ok(BenchArtifacts { records, files })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub resolution: f64,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub rmse: f64,
    pub train_seconds: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("resolution,hidden_dim,n_classes,n_samples,rmse,train_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.resolution, r.hidden_dim, r.n_classes, r.n_samples, r.rmse, r.train_seconds
        ));
    }
    s
}

/// Resolution x hidden-size ablation: rebuild the dataset at each octree
/// resolution (window metric extent fixed), train briefly, report held-out
/// RMSE and training time.
pub fn sweep(cfg: &RunConfig, logs_dir: &Path, out_csv: &Path) -> Result<Vec<SweepRow>, PipelineError> {
    let logs = read_logs(logs_dir)?;
    if logs.is_empty() {
        return Err(PipelineError::Io(format!("no .jsonl logs in {}", logs_dir.display())));
    }
    let extent_x = cfg.grid.width as f64 * cfg.grid.resolution;
    let extent_y = cfg.grid.height as f64 * cfg.grid.resolution;
    let mut rows = Vec::new();
    for &res in &cfg.sweep_resolutions {
        let grid = GridSpec {
            width: (extent_x / res).round().max(2.0) as usize,
            height: (extent_y / res).round().max(2.0) as usize,
            resolution: res,
        };
        let mut fusion_cfg = MapBuilderConfig { fusion: cfg.fusion(), margin: None };
        fusion_cfg.fusion.max_range = cfg.fusion().max_range;
        let mut samples = Vec::new();
        let mut truths_by_sample = Vec::new();
        for (_, log) in &logs {
            match build_samples(log, &grid, cfg.tau_i, cfg.tau_o, &fusion_cfg) {
                Ok(out) => {
                    truths_by_sample.extend(out.truths);
                    samples.extend(out.samples);
                }
                Err(DatasetError::InsufficientLog(..)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let dataset = split_dataset(
            grid,
            cfg.tau_i,
            cfg.tau_o,
            samples,
            cfg.split_ratios,
            derive_seed(cfg.seed, "sweep/split"),
        )?;
        let test_idx = dataset.indices_of(Split::Test);
        for &hidden in &cfg.sweep_hidden_dims {
            let spec = ModelSpec::for_grid(
                &grid,
                cfg.tau_i,
                cfg.tau_o,
                hidden,
                cfg.embed_dim.min(hidden),
                Head::Classification,
            );
            let train_cfg = TrainConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.sweep_epochs,
                batch_size: cfg.batch_size,
                seed: derive_seed(cfg.seed, &format!("sweep/{res}/{hidden}")),
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let result = train(&dataset, spec, &train_cfg)?;
            let train_seconds = start.elapsed().as_secs_f64();

            let mut rmses = Vec::new();
            for &i in &test_idx {
                let sample = &dataset.samples[i];
                let pred = predict(
                    &result.params,
                    &grid,
                    &sample.windows,
                    &sample.ref_window,
                    sample.anchor,
                    DecodeMode::Greedy,
                )?;
                rmses.push(crate::eval::rmse(&pred.points, &truths_by_sample[i])?);
            }
            let rmse = if rmses.is_empty() {
                f64::NAN
            } else {
                rmses.iter().sum::<f64>() / rmses.len() as f64
            };
            rows.push(SweepRow {
                resolution: res,
                hidden_dim: hidden,
                n_classes: grid.n_classes(),
                n_samples: dataset.samples.len(),
                rmse,
                train_seconds,
            });
        }
    }
    write_file(out_csv, sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Predict a trajectory at one log tick with a trained checkpoint; writes a
/// CSV of (step, x, y, class, probability).
pub fn predict_at_tick(
    cfg: &RunConfig,
    ckpt_path: &Path,
    log_path: &Path,
    tick: usize,
    out_csv: &Path,
) -> Result<(), PipelineError> {
    let ckpt_bytes = fs::read(ckpt_path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", ckpt_path.display())))?;
    let ckpt = load_checkpoint(&ckpt_bytes)?;
    if ckpt.grid != cfg.grid {
        return Err(ConfigError::Invalid {
            key: "grid".into(),
            msg: format!(
                "checkpoint grid {:?} does not match configured grid {:?}",
                ckpt.grid, cfg.grid
            ),
        }
        .into());
    }
    let text = fs::read_to_string(log_path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", log_path.display())))?;
    let log = DriveLog::from_jsonl(&text)?;
    let spec = ckpt.params.spec;
    let (tau_i, tau_o) = (spec.tau_i, spec.tau_o);
    if tick < tau_i || tick + tau_o >= log.ticks.len() {
        return Err(PipelineError::Io(format!(
            "tick {tick} outside valid anchor range [{}, {}]",
            tau_i,
            log.ticks.len().saturating_sub(tau_o + 1)
        )));
    }
    let map_cfg = MapBuilderConfig { fusion: cfg.fusion(), margin: None };
    let windows = crate::dataset::window_sequence(&log, &ckpt.grid, &map_cfg)?;
    let anchor = log.ticks[tick].state.pose();
    let mut ref_window = Vec::with_capacity(tau_i + tau_o + 1);
    for k in tick - tau_i..=tick + tau_o {
        let pos = Vec2::new(log.ticks[k].state.x, log.ticks[k].state.y);
        let near = log.route.nearest_index(pos);
        ref_window.push(anchor.to_ego(log.route.points[near]));
    }
    let mode = if cfg.bench_beam > 1 { DecodeMode::Beam(cfg.bench_beam) } else { DecodeMode::Greedy };
    let pred = predict(
        &ckpt.params,
        &ckpt.grid,
        &windows[tick - tau_i..=tick],
        &ref_window,
        anchor,
        mode,
    )?;
    let mut csv = String::from("step,x,y,class,probability\n");
    for (k, ((p, c), d)) in pred.points.iter().zip(&pred.classes).zip(&pred.dists).enumerate() {
        csv.push_str(&format!("{},{},{},{},{}\n", k + 1, p.x, p.y, c, d[*c as usize]));
    }
    write_file(out_csv, csv.as_bytes())?;
    Ok(())
}

/// Plan on a serialized octree map file and write the pose CSV.
pub fn plan_on_map(
    cfg: &RunConfig,
    map_path: &Path,
    start: Pose2,
    goal: Vec2,
    out_csv: &Path,
) -> Result<crate::planner::PlanResult, PipelineError> {
    let bytes =
        fs::read(map_path).map_err(|e| PipelineError::Io(format!("{}: {e}", map_path.display())))?;
    let map = OctreeMap::deserialize(&bytes)?;
    let grid = map.project_2d(map.origin().z, map.origin().z + map.resolution() * 0.5);
    let prims = motion_primitives(
        &cfg.kin,
        cfg.teacher.v_cruise,
        cfg.teacher.n_curvatures,
        cfg.teacher.prim_duration,
    )?;
    let mut pcfg = PlannerConfig::for_grid(&grid);
    pcfg.footprint_radius = cfg.teacher.footprint_radius;
    let plan = hybrid_astar(&grid, start, goal, &prims, &pcfg)?;
    write_file(out_csv, plan.to_csv().as_bytes())?;
    Ok(plan)
}

/// Integrate a point-cloud text file into a fresh octree map file.
pub fn map_build(
    cfg: &RunConfig,
    cloud_path: &Path,
    sensor_origin: Vec3,
    out_map: &Path,
) -> Result<OctreeMap, PipelineError> {
    let text = fs::read_to_string(cloud_path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", cloud_path.display())))?;
    let points = parse_point_cloud(&text)?;
    if points.is_empty() {
        return Err(PipelineError::Io("point cloud is empty".into()));
    }
    let mut min = Vec2::new(sensor_origin.x, sensor_origin.y);
    let mut max = min;
    let mut z_min = sensor_origin.z;
    for p in &points {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
        z_min = z_min.min(p.z);
    }
    let res = cfg.grid.resolution;
    let mut map = OctreeMap::fit_bounds(
        Rect::new(min, max),
        res,
        1.0,
        z_min - res,
        cfg.fusion(),
    )?;
    map.integrate_scan(sensor_origin, &points)?;
    write_file(out_map, &map.serialize())?;
    Ok(map)
}

/// Decode a predicted class sequence into global points (exposed for tests).
pub fn decode_classes(
    classes: &[u32],
    anchor: Pose2,
    grid: &GridSpec,
) -> Result<Vec<Vec2>, PipelineError> {
    classes
        .iter()
        .map(|c| position_of_cell(*c, anchor, grid).map_err(PipelineError::from))
        .collect()
}
