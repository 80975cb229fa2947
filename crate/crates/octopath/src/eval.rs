//! Error metrics and the scenario x method benchmark harness.
//!
//! Per evaluation window (one anchor tick), each method produces tau_o
//! predicted positions which are compared against the logged future
//! positions: per-axis absolute errors aggregate over all (window, step)
//! pairs; the reported RMSE is the mean over windows of the per-window RMSE;
//! the per-timestep series is the mean/std of the position-error magnitude
//! at each step over windows.

use std::time::Instant;

use crate::dataset::{build_samples_from_windows, replay_log, GridSpec, MapBuilderConfig, SampleSequence};
use crate::geom::{Pose2, Vec2};
use crate::kinematics::KinematicParams;
use crate::model::{
    predict, predict_regression, DecodeMode, Head, ModelParams,
};
use crate::planner::{hybrid_astar, motion_primitives, PlannerConfig};
use crate::world::DriveLog;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("{0}")]
    Dataset(String),
}

impl From<crate::dataset::DatasetError> for EvalError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        EvalError::Dataset(e.to_string())
    }
}

/// Root mean square position error over the horizon (per-window formula).
pub fn rmse(pred: &[Vec2], gt: &[Vec2]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvalError::Shape(format!(
            "length mismatch: {} predictions vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let dx = p.x - g.x;
            let dy = p.y - g.y;
            dx * dx + dy * dy
        })
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisErrors {
    pub mean_ex: f64,
    pub max_ex: f64,
    pub mean_ey: f64,
    pub max_ey: f64,
}

/// Absolute per-step axis errors in the global frame.
pub fn axis_errors(pred: &[Vec2], gt: &[Vec2]) -> Result<AxisErrors, EvalError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvalError::Shape("length mismatch".into()));
    }
    let mut out = AxisErrors { mean_ex: 0.0, max_ex: 0.0, mean_ey: 0.0, max_ey: 0.0 };
    for (p, g) in pred.iter().zip(gt) {
        let ex = (p.x - g.x).abs();
        let ey = (p.y - g.y).abs();
        out.mean_ex += ex;
        out.mean_ey += ey;
        out.max_ex = out.max_ex.max(ex);
        out.max_ey = out.max_ey.max(ey);
    }
    out.mean_ex /= pred.len() as f64;
    out.mean_ey /= pred.len() as f64;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Octopath,
    Regression,
    HybridAstar,
    /// Ground-truth replay; a self-comparison sanity method.
    Oracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Octopath => "octopath",
            Method::Regression => "regression",
            Method::HybridAstar => "hybrid_astar",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "octopath" => Some(Method::Octopath),
            "regression" => Some(Method::Regression),
            "hybrid_astar" => Some(Method::HybridAstar),
            "oracle" => Some(Method::Oracle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub scenario: String,
    pub method: String,
    pub mean_ex: f64,
    pub max_ex: f64,
    pub mean_ey: f64,
    pub max_ey: f64,
    pub rmse: f64,
    /// Position-error magnitude per future step: mean/std over windows.
    pub per_step: Vec<StepStat>,
    pub windows: usize,
    /// Windows the method failed to produce a prediction for (planner
    /// NoPath etc.); they are excluded from the aggregates.
    pub failures: usize,
}

/// One named evaluation scenario: a set of held-out logs.
pub struct Scenario {
    pub name: String,
    pub logs: Vec<DriveLog>,
}

/// Everything the benchmark needs beyond the logs themselves.
pub struct BenchContext {
    pub grid: GridSpec,
    pub tau_i: usize,
    pub tau_o: usize,
    pub map_cfg: MapBuilderConfig,
    pub kin: KinematicParams,
    /// Evaluate every `stride`-th anchor.
    pub stride: usize,
    pub decode: DecodeMode,
    pub classification: Option<ModelParams>,
    pub regression: Option<ModelParams>,
    /// Planner speed and arc settings for the hybrid A* method.
    pub plan_speed: f64,
    pub plan_curvatures: usize,
    pub plan_duration: f64,
    pub footprint_radius: f64,
}

fn method_predict(
    method: Method,
    ctx: &BenchContext,
    sample: &SampleSequence,
    truth: &[Vec2],
    grid_at_anchor: &crate::octree::Grid2D,
    dt: f64,
) -> Result<Option<Vec<Vec2>>, EvalError> {
    match method {
        Method::Oracle => Ok(Some(truth.to_vec())),
        Method::Octopath => {
            let params = ctx
                .classification
                .as_ref()
                .ok_or_else(|| EvalError::MissingArtifact("classification checkpoint".into()))?;
            let pred = predict(
                params,
                &ctx.grid,
                &sample.windows,
                &sample.ref_window,
                sample.anchor,
                ctx.decode,
            )
            .map_err(|e| EvalError::Shape(e.to_string()))?;
            Ok(Some(pred.points))
        }
        Method::Regression => {
            let params = ctx
                .regression
                .as_ref()
                .ok_or_else(|| EvalError::MissingArtifact("regression checkpoint".into()))?;
            let pred = predict_regression(params, &sample.windows, &sample.ref_window, sample.anchor)
                .map_err(|e| EvalError::Shape(e.to_string()))?;
            Ok(Some(pred.points))
        }
        Method::HybridAstar => {
            let goal = sample.anchor.to_world(*sample.ref_window.last().unwrap());
            let prims = match motion_primitives(
                &ctx.kin,
                ctx.plan_speed,
                ctx.plan_curvatures,
                ctx.plan_duration,
            ) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let mut cfg = PlannerConfig::for_grid(grid_at_anchor);
            cfg.footprint_radius = ctx.footprint_radius;
            match hybrid_astar(grid_at_anchor, sample.anchor, goal, &prims, &cfg) {
                Ok(plan) => {
                    let times: Vec<f64> = (1..=ctx.tau_o).map(|k| k as f64 * dt).collect();
                    Ok(Some(plan.sample_at_times(&times).iter().map(|p| p.position()).collect()))
                }
                Err(_) => Ok(None),
            }
        }
    }
}

/// Run every scenario x method cell and aggregate the error metrics.
pub fn run_benchmark(
    scenarios: &[Scenario],
    methods: &[Method],
    ctx: &BenchContext,
) -> Result<Vec<MetricsRecord>, EvalError> {
    if matches!(ctx.classification, Some(ref p) if p.spec.head != Head::Classification) {
        return Err(EvalError::Shape("classification checkpoint has wrong head".into()));
    }
    if matches!(ctx.regression, Some(ref p) if p.spec.head != Head::Regression) {
        return Err(EvalError::Shape("regression checkpoint has wrong head".into()));
    }
    let mut records = Vec::new();
    for scenario in scenarios {
        // Per-method accumulators.
        struct Acc {
            ex: Vec<f64>,
            ey: Vec<f64>,
            window_rmse: Vec<f64>,
            per_step: Vec<Vec<f64>>,
            failures: usize,
        }
        let mut accs: Vec<Acc> = methods
            .iter()
            .map(|_| Acc {
                ex: Vec::new(),
                ey: Vec::new(),
                window_rmse: Vec::new(),
                per_step: vec![Vec::new(); ctx.tau_o],
                failures: 0,
            })
            .collect();

        for log in &scenario.logs {
            let need_grids = methods.contains(&Method::HybridAstar);
            let replay = replay_log(log, &ctx.grid, &ctx.map_cfg, need_grids)?;
            let built =
                build_samples_from_windows(log, &ctx.grid, ctx.tau_i, ctx.tau_o, &replay.windows)?;
            for (idx, sample) in built.samples.iter().enumerate() {
                if idx % ctx.stride != 0 {
                    continue;
                }
                let truth = &built.truths[idx];
                let tick = built.anchor_ticks[idx];
                let empty_grid;
                let grid_at_anchor = if need_grids {
                    &replay.grids[tick]
                } else {
                    empty_grid = crate::octree::Grid2D::filled(
                        Vec2::ZERO,
                        ctx.grid.resolution,
                        1,
                        1,
                        crate::octree::CellState::Unknown,
                    );
                    &empty_grid
                };
                for (mi, method) in methods.iter().enumerate() {
                    match method_predict(*method, ctx, sample, truth, grid_at_anchor, log.dt)? {
                        None => accs[mi].failures += 1,
                        Some(pred) => {
                            let acc = &mut accs[mi];
                            for (k, (p, g)) in pred.iter().zip(truth.iter()).enumerate() {
                                acc.ex.push((p.x - g.x).abs());
                                acc.ey.push((p.y - g.y).abs());
                                acc.per_step[k].push(p.dist(*g));
                            }
                            acc.window_rmse.push(rmse(&pred, truth)?);
                        }
                    }
                }
            }
        }

        for (mi, method) in methods.iter().enumerate() {
            let acc = &accs[mi];
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
            let per_step = acc
                .per_step
                .iter()
                .map(|v| {
                    let m = mean(v);
                    let var = if v.len() > 1 {
                        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
                    } else {
                        0.0
                    };
                    StepStat { mean: m, std: var.sqrt() }
                })
                .collect();
            records.push(MetricsRecord {
                scenario: scenario.name.clone(),
                method: method.name().to_string(),
                mean_ex: mean(&acc.ex),
                max_ex: max(&acc.ex),
                mean_ey: mean(&acc.ey),
                max_ey: max(&acc.ey),
                rmse: mean(&acc.window_rmse),
                per_step,
                windows: acc.window_rmse.len(),
                failures: acc.failures,
            });
        }
    }
    Ok(records)
}

/// Benchmark table: one row per scenario x method.
pub fn report_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("scenario,method,mean_ex,max_ex,mean_ey,max_ey,rmse\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.scenario, r.method, r.mean_ex, r.max_ex, r.mean_ey, r.max_ey, r.rmse
        ));
    }
    s
}

/// Per-timestep error curves for one scenario.
pub fn error_curve_csv(records: &[MetricsRecord], scenario: &str) -> String {
    let mut s = String::from("timestep,mean,std,method\n");
    for r in records.iter().filter(|r| r.scenario == scenario) {
        for (k, stat) in r.per_step.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", k + 1, stat.mean, stat.std, r.method));
        }
    }
    s
}

/// Simple SVG plot of the per-timestep mean error (solid line) with a
/// +-1 std band per method.
pub fn error_curve_svg(records: &[MetricsRecord], scenario: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let rel: Vec<&MetricsRecord> = records.iter().filter(|r| r.scenario == scenario).collect();
    let n_steps = rel.iter().map(|r| r.per_step.len()).max().unwrap_or(0);
    let y_max = rel
        .iter()
        .flat_map(|r| r.per_step.iter().map(|s| s.mean + s.std))
        .fold(0.1f64, f64::max);
    let sx = |k: f64| M + k / (n_steps.max(2) - 1) as f64 * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v / y_max) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">future step</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">position error [m]</text>\n",
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
    );
    for (i, r) in rel.iter().enumerate() {
        let color = colors[i % colors.len()];
        // Shaded band.
        let mut band = String::from("M");
        for (k, s) in r.per_step.iter().enumerate() {
            band.push_str(&format!(" {:.2},{:.2}", sx(k as f64), sy(s.mean + s.std)));
        }
        for (k, s) in r.per_step.iter().enumerate().rev() {
            band.push_str(&format!(" {:.2},{:.2}", sx(k as f64), sy((s.mean - s.std).max(0.0))));
        }
        svg.push_str(&format!(
            "<path d=\"{band} Z\" fill=\"{color}\" opacity=\"0.15\" stroke=\"none\"/>\n"
        ));
        let pts: Vec<String> = r
            .per_step
            .iter()
            .enumerate()
            .map(|(k, s)| format!("{:.2},{:.2}", sx(k as f64), sy(s.mean)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - M + 4.0 - 120.0,
            M + 16.0 * i as f64,
            r.method
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub samples_ms: Vec<f64>,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub paths_per_second: f64,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("min_ms,{}\n", self.min_ms));
        s.push_str(&format!("median_ms,{}\n", self.median_ms));
        s.push_str(&format!("p95_ms,{}\n", self.p95_ms));
        s.push_str(&format!("paths_per_second,{}\n", self.paths_per_second));
        s.push_str(&format!("trials,{}\n", self.samples_ms.len()));
        s
    }
}

/// Wall-time distribution of single-sample greedy prediction on this host.
/// Warmup iterations are excluded; no absolute target is asserted.
pub fn latency_bench(
    params: &ModelParams,
    grid: &GridSpec,
    n_trials: usize,
) -> Result<LatencyReport, EvalError> {
    if n_trials < 10 {
        return Err(EvalError::InvalidArg(format!("n_trials {n_trials} < 10")));
    }
    let spec = params.spec;
    let windows: Vec<Vec<i8>> = (0..=spec.tau_i)
        .map(|t| (0..grid.n_classes()).map(|k| ((k + t) % 3) as i8 - 1).collect())
        .collect();
    let ref_window: Vec<Vec2> = (0..spec.tau_i + spec.tau_o + 1)
        .map(|k| Vec2::new(0.25 * k as f64, 0.05 * k as f64))
        .collect();
    let anchor = Pose2::new(0.0, 0.0, 0.0);
    let run = || {
        predict(params, grid, &windows, &ref_window, anchor, DecodeMode::Greedy)
            .map_err(|e| EvalError::Shape(e.to_string()))
    };
    for _ in 0..10 {
        run()?;
    }
    let mut samples_ms = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let start = Instant::now();
        run()?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let min_ms = sorted[0];
    let median_ms = sorted[sorted.len() / 2];
    let p95_ms = sorted[((sorted.len() as f64 * 0.95) as usize).min(sorted.len() - 1)];
    Ok(LatencyReport {
        samples_ms,
        min_ms,
        median_ms,
        p95_ms,
        paths_per_second: 1000.0 / median_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec2> {
        v.iter().map(|(x, y)| Vec2::new(*x, *y)).collect()
    }

    #[test]
    fn rmse_examples() {
        let gt = pts(&[(1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]);
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);

        let shifted: Vec<Vec2> = gt.iter().map(|p| Vec2::new(p.x + 3.0, p.y + 4.0)).collect();
        assert!((rmse(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);

        let a = pts(&[(1.0, 0.0), (0.0, 0.0)]);
        let b = pts(&[(0.0, 0.0), (0.0, 1.0)]);
        assert!((rmse(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        assert!(rmse(&a, &gt).is_err());
    }

    #[test]
    fn rmse_symmetry_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let a: Vec<Vec2> =
                (0..n).map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
            let b: Vec<Vec2> =
                (0..n).map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
            let r1 = rmse(&a, &b).unwrap();
            let r2 = rmse(&b, &a).unwrap();
            assert!((r1 - r2).abs() < 1e-12);

            let theta = rng.gen_range(-3.0..3.0);
            let t = Vec2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let f = |p: &Vec2| p.rotate(theta).add(t);
            let ar: Vec<Vec2> = a.iter().map(f).collect();
            let br: Vec<Vec2> = b.iter().map(f).collect();
            assert!((rmse(&ar, &br).unwrap() - r1).abs() < 1e-9);
        }
    }

    #[test]
    fn rmse_agrees_with_independent_formula() {
        // Second route: accumulate squared axis errors separately and
        // combine at the end.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(1..15);
            let a: Vec<Vec2> =
                (0..n).map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
            let b: Vec<Vec2> =
                (0..n).map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (p, g) in a.iter().zip(&b) {
                sx += (p.x - g.x) * (p.x - g.x);
                sy += (p.y - g.y) * (p.y - g.y);
            }
            let independent = ((sx + sy) / n as f64).sqrt();
            assert!((rmse(&a, &b).unwrap() - independent).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_error_examples() {
        let gt = pts(&[(0.0, 0.0), (1.0, 1.0)]);
        let pred: Vec<Vec2> = gt.iter().map(|p| Vec2::new(p.x + 1.0, p.y + 2.0)).collect();
        let e = axis_errors(&pred, &gt).unwrap();
        assert_eq!((e.mean_ex, e.max_ex, e.mean_ey, e.max_ey), (1.0, 1.0, 2.0, 2.0));

        let zero = axis_errors(&gt, &gt).unwrap();
        assert_eq!((zero.mean_ex, zero.max_ex, zero.mean_ey, zero.max_ey), (0.0, 0.0, 0.0, 0.0));

        let single = axis_errors(&pts(&[(-3.0, 0.0)]), &pts(&[(0.0, 0.0)])).unwrap();
        assert_eq!(single.mean_ex, 3.0);
        assert_eq!(single.max_ex, 3.0);
    }

    #[test]
    fn report_csv_has_table_columns() {
        let rec = MetricsRecord {
            scenario: "sim".into(),
            method: "oracle".into(),
            mean_ex: 0.0,
            max_ex: 0.0,
            mean_ey: 0.0,
            max_ey: 0.0,
            rmse: 0.0,
            per_step: vec![StepStat { mean: 0.0, std: 0.0 }; 3],
            windows: 5,
            failures: 0,
        };
        let csv = report_csv(&[rec.clone()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "scenario,method,mean_ex,max_ex,mean_ey,max_ey,rmse");
        assert_eq!(lines.next().unwrap(), "sim,oracle,0,0,0,0,0");

        let curve = error_curve_csv(&[rec], "sim");
        assert!(curve.starts_with("timestep,mean,std,method\n"));
        assert_eq!(curve.lines().count(), 4);
    }
}
