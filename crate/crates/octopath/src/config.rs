//! Plain-text `key = value` run configuration with dotted section prefixes,
//! strict unknown-key rejection, and deterministic per-stage seed fan-out
//! from one global seed.

use std::path::Path;

use crate::dataset::GridSpec;
use crate::kinematics::KinematicParams;
use crate::octree::SensorFusionParams;
use crate::world::TeacherConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(String),
    #[error("config error at `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

/// Full pipeline configuration. Every field has a default; a config file
/// only overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // World / scenario generation.
    pub world_size: f64,
    pub world_obstacles: usize,
    pub world_start_clearance: f64,
    pub world_dynamic_obstacles: usize,
    // Simulation / teacher.
    pub sim_dt: f64,
    pub sim_ticks: u64,
    pub sim_runs_per_route: usize,
    pub sim_routes: Vec<String>,
    pub sim_route_spacing: f64,
    pub teacher: TeacherConfig,
    // Window / label grid.
    pub grid: GridSpec,
    // Dataset horizons and split.
    pub tau_i: usize,
    pub tau_o: usize,
    pub split_ratios: [f64; 3],
    // Kinematics.
    pub kin: KinematicParams,
    // Model.
    pub hidden_dim: usize,
    pub embed_dim: usize,
    // Training.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub teacher_forcing: bool,
    // Benchmark.
    pub bench_stride: usize,
    pub bench_beam: usize,
    pub latency_trials: usize,
    // Ablation sweep.
    pub sweep_resolutions: Vec<f64>,
    pub sweep_hidden_dims: Vec<usize>,
    pub sweep_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world_size: 20.0,
            world_obstacles: 6,
            world_start_clearance: 2.0,
            world_dynamic_obstacles: 0,
            sim_dt: 0.25,
            sim_ticks: 160,
            sim_runs_per_route: 6,
            sim_routes: vec!["line".into(), "s_curve".into(), "circle".into()],
            sim_route_spacing: 0.25,
            teacher: TeacherConfig::default(),
            grid: GridSpec::default(),
            tau_i: 4,
            tau_o: 10,
            split_ratios: [0.8, 0.1, 0.1],
            kin: KinematicParams::default(),
            hidden_dim: 128,
            embed_dim: 32,
            learning_rate: 0.0003,
            epochs: 200,
            batch_size: 32,
            teacher_forcing: true,
            bench_stride: 5,
            bench_beam: 0,
            latency_trials: 100,
            sweep_resolutions: vec![0.2, 0.4],
            sweep_hidden_dims: vec![32, 64],
            sweep_epochs: 30,
        }
    }
}

impl RunConfig {
    pub fn fusion(&self) -> SensorFusionParams {
        self.teacher.fusion
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tau_o < 1 {
            return Err(bad("dataset.tau_o", "must be >= 1"));
        }
        if self.grid.width == 0 || self.grid.height == 0 {
            return Err(bad("grid.width", "grid dimensions must be >= 1"));
        }
        if !(self.grid.resolution > 0.0) {
            return Err(bad("grid.resolution", "must be positive"));
        }
        if !(self.sim_dt > 0.0) {
            return Err(bad("sim.dt", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad("train.learning_rate", "must be positive"));
        }
        if self.epochs < 1 {
            return Err(bad("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(bad("train.batch_size", "must be >= 1"));
        }
        let ratio_sum: f64 = self.split_ratios.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(bad("dataset.ratios", format!("must sum to 1, got {ratio_sum}")));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(bad("model.hidden_dim", "model dimensions must be >= 1"));
        }
        for r in &self.sim_routes {
            if !matches!(r.as_str(), "line" | "s_curve" | "circle") {
                return Err(bad("sim.routes", format!("unknown route kind `{r}`")));
            }
        }
        if self.bench_stride == 0 {
            return Err(bad("bench.stride", "must be >= 1"));
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| bad(key, format!("{e}")))
        }
        fn list_f64(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
            v.split(',').map(|s| p::<f64>(key, s.trim())).collect()
        }
        fn list_usize(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
            v.split(',').map(|s| p::<usize>(key, s.trim())).collect()
        }

        match key {
            "seed" => self.seed = p(key, value)?,
            "world.size" => self.world_size = p(key, value)?,
            "world.obstacles" => self.world_obstacles = p(key, value)?,
            "world.start_clearance" => self.world_start_clearance = p(key, value)?,
            "world.dynamic_obstacles" => self.world_dynamic_obstacles = p(key, value)?,
            "sim.dt" => self.sim_dt = p(key, value)?,
            "sim.ticks" => self.sim_ticks = p(key, value)?,
            "sim.runs_per_route" => self.sim_runs_per_route = p(key, value)?,
            "sim.routes" => {
                self.sim_routes = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "sim.route_spacing" => self.sim_route_spacing = p(key, value)?,
            "sim.v_cruise" => self.teacher.v_cruise = p(key, value)?,
            "sim.n_beams" => self.teacher.n_beams = p(key, value)?,
            "sim.max_range" => self.teacher.max_range = p(key, value)?,
            "sim.footprint_radius" => self.teacher.footprint_radius = p(key, value)?,
            "sim.goal_lookahead" => self.teacher.goal_lookahead = p(key, value)?,
            "sim.track_lookahead" => self.teacher.track_lookahead = p(key, value)?,
            "sim.replan_every" => self.teacher.replan_every = p(key, value)?,
            "sim.n_curvatures" => self.teacher.n_curvatures = p(key, value)?,
            "sim.prim_duration" => self.teacher.prim_duration = p(key, value)?,
            "map.p_hit" => self.teacher.fusion.p_hit = p(key, value)?,
            "map.p_miss" => self.teacher.fusion.p_miss = p(key, value)?,
            "map.l_min" => self.teacher.fusion.l_min = p(key, value)?,
            "map.l_max" => self.teacher.fusion.l_max = p(key, value)?,
            "map.occ_threshold" => self.teacher.fusion.occ_threshold = p(key, value)?,
            "map.max_range" => self.teacher.fusion.max_range = p(key, value)?,
            "grid.width" => self.grid.width = p(key, value)?,
            "grid.height" => self.grid.height = p(key, value)?,
            "grid.resolution" => {
                self.grid.resolution = p(key, value)?;
                self.teacher.map_resolution = self.grid.resolution;
            }
            "dataset.tau_i" => self.tau_i = p(key, value)?,
            "dataset.tau_o" => self.tau_o = p(key, value)?,
            "dataset.ratios" => {
                let v = list_f64(key, value)?;
                if v.len() != 3 {
                    return Err(bad(key, "expected three comma-separated ratios"));
                }
                self.split_ratios = [v[0], v[1], v[2]];
            }
            "kin.r" => self.kin.r = p(key, value)?,
            "kin.y_icr0" => self.kin.y_icr0 = p(key, value)?,
            "kin.omega_wheel_max" => self.kin.omega_wheel_max = p(key, value)?,
            "model.hidden_dim" => self.hidden_dim = p(key, value)?,
            "model.embed_dim" => self.embed_dim = p(key, value)?,
            "train.learning_rate" => self.learning_rate = p(key, value)?,
            "train.epochs" => self.epochs = p(key, value)?,
            "train.batch_size" => self.batch_size = p(key, value)?,
            "train.teacher_forcing" => self.teacher_forcing = p(key, value)?,
            "bench.stride" => self.bench_stride = p(key, value)?,
            "bench.beam" => self.bench_beam = p(key, value)?,
            "bench.latency_trials" => self.latency_trials = p(key, value)?,
            "sweep.resolutions" => self.sweep_resolutions = list_f64(key, value)?,
            "sweep.hidden_dims" => self.sweep_hidden_dims = list_usize(key, value)?,
            "sweep.epochs" => self.sweep_epochs = p(key, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped,
/// unknown keys are rejected. Defaults apply for everything absent.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Invalid {
                key: format!("line {}", lineno + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read and parse a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-stage seed from the one global seed: FNV-1a over the
/// tag, mixed through splitmix64. Stages stay independently reproducible.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.tau_o, 10);
        assert_eq!(cfg.learning_rate, 0.0003);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = parse_config_str("foo = 1\n").unwrap_err();
        match err {
            ConfigError::Invalid { key, msg } => {
                assert_eq!(key, "foo");
                assert!(msg.contains("unknown key"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected_with_key_path() {
        let err = parse_config_str("dataset.tau_o = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "dataset.tau_o"));

        let err = parse_config_str("train.learning_rate = -1\n").unwrap_err();
        assert!(
            matches!(err, ConfigError::Invalid { ref key, .. } if key == "train.learning_rate")
        );

        let err = parse_config_str("dataset.ratios = 0.5,0.5,0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "dataset.ratios"));
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = parse_config_str(
            "# comment\n\
             seed = 7\n\
             grid.resolution = 0.4   # inline comment\n\
             sim.routes = line, circle\n\
             sweep.hidden_dims = 16,32,64\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.resolution, 0.4);
        assert_eq!(cfg.teacher.map_resolution, 0.4);
        assert_eq!(cfg.sim_routes, vec!["line", "circle"]);
        assert_eq!(cfg.sweep_hidden_dims, vec![16, 32, 64]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_config(Path::new("/nonexistent/config.txt")).unwrap_err();
        assert!(matches!(err, ConfigError::Io(_)));
    }

    #[test]
    fn seed_derivation_is_stable_and_distinct() {
        let a = derive_seed(42, "simulate");
        let b = derive_seed(42, "simulate");
        let c = derive_seed(42, "train");
        let d = derive_seed(43, "simulate");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
