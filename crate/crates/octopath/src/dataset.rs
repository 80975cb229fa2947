//! Turn drive logs into classification training samples: per-timestep
//! ego-frame occupancy windows, a reference-route window over the full
//! horizon, and future-position cell labels derived from the robot's own
//! driven path. Also owns the split logic and the dataset container format.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Pose2, Rect, Vec2, Vec3};
use crate::octree::{ego_window, OctreeMap, SensorFusionParams};
use crate::world::DriveLog;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("label out of window: ego ({0:.3}, {1:.3}) m")]
    LabelOutOfWindow(f64, f64),
    #[error("invalid class {0} (n_classes {1})")]
    InvalidClass(u32, u32),
    #[error("insufficient log: {0} ticks, need at least {1}")]
    InsufficientLog(usize, usize),
    #[error("insufficient runs: {0} runs for {1} nonempty splits")]
    InsufficientRuns(usize, usize),
    #[error("split ratios must sum to 1, got {0}")]
    InvalidRatios(f64),
    #[error("format error: {0}")]
    Format(String),
}

/// Geometry of the label/window grid. `width` counts forward cells, `height`
/// lateral cells; class index is `i * height + j` matching the window layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
}

impl GridSpec {
    pub fn n_classes(&self) -> usize {
        self.width * self.height
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { width: 40, height: 40, resolution: 0.2 }
    }
}

/// Class index of a global point in the anchor's window grid. Half-open cell
/// intervals; forward x in [0, W*res), lateral y in [-H*res/2, H*res/2).
pub fn cell_of_position(p: Vec2, anchor: Pose2, spec: &GridSpec) -> Result<u32, DatasetError> {
    let e = anchor.to_ego(p);
    let res = spec.resolution;
    let half = spec.height as f64 * res / 2.0;
    if e.x < 0.0 || e.x >= spec.width as f64 * res || e.y < -half || e.y >= half {
        return Err(DatasetError::LabelOutOfWindow(e.x, e.y));
    }
    let i = (e.x / res).floor() as usize;
    let j = ((e.y + half) / res).floor() as usize;
    let i = i.min(spec.width - 1);
    let j = j.min(spec.height - 1);
    Ok((i * spec.height + j) as u32)
}

/// Global-frame center of a window cell; inverse of `cell_of_position` up to
/// half-cell quantization.
pub fn position_of_cell(class: u32, anchor: Pose2, spec: &GridSpec) -> Result<Vec2, DatasetError> {
    let n = spec.n_classes() as u32;
    if class >= n {
        return Err(DatasetError::InvalidClass(class, n));
    }
    let i = (class as usize) / spec.height;
    let j = (class as usize) % spec.height;
    let res = spec.resolution;
    let half = spec.height as f64 * res / 2.0;
    let e = Vec2::new((i as f64 + 0.5) * res, (j as f64 + 0.5) * res - half);
    Ok(anchor.to_world(e))
}

/// One training sample anchored at tick t: tau_i+1 windows (t-tau_i..t),
/// the route window over [t-tau_i, t+tau_o] in the anchor frame, and tau_o
/// future cell labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub run_id: u32,
    pub anchor: Pose2,
    pub windows: Vec<Vec<i8>>,
    pub ref_window: Vec<Vec2>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub tau_i: usize,
    pub tau_o: usize,
    pub samples: Vec<SampleSequence>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Octree construction settings used while replaying a log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapBuilderConfig {
    pub fusion: SensorFusionParams,
    /// Extra map extent around the log's bounding box, meters. Defaults to
    /// the window reach so windows never sample past the map edge.
    pub margin: Option<f64>,
}

impl Default for MapBuilderConfig {
    fn default() -> Self {
        MapBuilderConfig { fusion: SensorFusionParams::default(), margin: None }
    }
}

/// Samples plus bookkeeping the spec requires: dropped-sample accounting and
/// exact future positions for metric evaluation.
#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub samples: Vec<SampleSequence>,
    /// Global-frame future positions (t+1..t+tau_o), aligned with `samples`.
    pub truths: Vec<Vec<Vec2>>,
    /// Log tick index of each sample's anchor, aligned with `samples`.
    pub anchor_ticks: Vec<usize>,
    pub dropped: usize,
    /// Total candidate anchors: log length - tau_i - tau_o.
    pub anchors: usize,
}

fn log_bounds(log: &DriveLog) -> Rect {
    let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut grow = |p: Vec2| {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
    };
    for t in &log.ticks {
        grow(Vec2::new(t.state.x, t.state.y));
        for e in &t.endpoints {
            grow(e.xy());
        }
    }
    for p in &log.route.points {
        grow(*p);
    }
    Rect::new(min, max)
}

/// Octree replay of a log: per-tick ego windows and (optionally) the
/// projected grid after each tick's scan.
pub struct LogReplay {
    pub windows: Vec<Vec<i8>>,
    pub grids: Vec<crate::octree::Grid2D>,
}

/// Replay the log through a persistent octree: integrate every scan up to
/// each tick, project, and sample the window in that tick's ego frame.
pub fn replay_log(
    log: &DriveLog,
    spec: &GridSpec,
    cfg: &MapBuilderConfig,
    keep_grids: bool,
) -> Result<LogReplay, DatasetError> {
    let res = spec.resolution;
    let reach = spec.width.max(spec.height) as f64 * res;
    let margin = cfg.margin.unwrap_or(reach) + res;
    let map_err = |e: crate::octree::MapError| DatasetError::Format(e.to_string());
    let mut map = OctreeMap::fit_bounds(log_bounds(log), res, margin, 0.0, cfg.fusion)
        .map_err(map_err)?;
    let mut windows = Vec::with_capacity(log.ticks.len());
    let mut grids = Vec::new();
    for t in &log.ticks {
        map.integrate_scan_flagged(
            Vec3::new(t.state.x, t.state.y, 0.0),
            &t.endpoints,
            &t.hits,
        )
        .map_err(map_err)?;
        let grid = map.project_2d(0.0, res * 0.5);
        let win = ego_window(&grid, t.state.pose(), spec.width, spec.height, res);
        windows.push(win.values);
        if keep_grids {
            grids.push(grid);
        }
    }
    Ok(LogReplay { windows, grids })
}

/// Per-tick ego windows only; see `replay_log`.
pub fn window_sequence(
    log: &DriveLog,
    spec: &GridSpec,
    cfg: &MapBuilderConfig,
) -> Result<Vec<Vec<i8>>, DatasetError> {
    Ok(replay_log(log, spec, cfg, false)?.windows)
}

/// Build one sample per anchor t in [tau_i, L-1-tau_o]. Anchors whose future
/// positions leave the window are dropped and counted.
pub fn build_samples(
    log: &DriveLog,
    spec: &GridSpec,
    tau_i: usize,
    tau_o: usize,
    cfg: &MapBuilderConfig,
) -> Result<BuildOutput, DatasetError> {
    let l = log.ticks.len();
    let need = tau_i + tau_o + 1;
    if l < need {
        return Err(DatasetError::InsufficientLog(l, need));
    }
    let windows = window_sequence(log, spec, cfg)?;
    build_samples_from_windows(log, spec, tau_i, tau_o, &windows)
}

/// Sample construction over precomputed per-tick windows (see `replay_log`).
pub fn build_samples_from_windows(
    log: &DriveLog,
    spec: &GridSpec,
    tau_i: usize,
    tau_o: usize,
    windows: &[Vec<i8>],
) -> Result<BuildOutput, DatasetError> {
    let l = log.ticks.len();
    let need = tau_i + tau_o + 1;
    if l < need {
        return Err(DatasetError::InsufficientLog(l, need));
    }
    if windows.len() != l {
        return Err(DatasetError::Format(format!(
            "window sequence length {} does not match log length {l}",
            windows.len()
        )));
    }
    let anchors = l - tau_i - tau_o;
    let mut samples = Vec::with_capacity(anchors);
    let mut truths = Vec::with_capacity(anchors);
    let mut anchor_ticks = Vec::with_capacity(anchors);
    let mut dropped = 0usize;

    'anchor: for t in tau_i..l - tau_o {
        let anchor = log.ticks[t].state.pose();
        let mut labels = Vec::with_capacity(tau_o);
        let mut truth = Vec::with_capacity(tau_o);
        for s in 1..=tau_o {
            let p = Vec2::new(log.ticks[t + s].state.x, log.ticks[t + s].state.y);
            match cell_of_position(p, anchor, spec) {
                Ok(c) => {
                    labels.push(c);
                    truth.push(p);
                }
                Err(_) => {
                    dropped += 1;
                    continue 'anchor;
                }
            }
        }
        let mut ref_window = Vec::with_capacity(tau_i + tau_o + 1);
        for k in t - tau_i..=t + tau_o {
            let pos = Vec2::new(log.ticks[k].state.x, log.ticks[k].state.y);
            let near = log.route.nearest_index(pos);
            ref_window.push(anchor.to_ego(log.route.points[near]));
        }
        samples.push(SampleSequence {
            run_id: log.run_id,
            anchor,
            windows: windows[t - tau_i..=t].to_vec(),
            ref_window,
            labels,
        });
        truths.push(truth);
        anchor_ticks.push(t);
    }
    Ok(BuildOutput { samples, truths, anchor_ticks, dropped, anchors })
}

/// Deterministic split by whole runs (never by individual samples), so no
/// run's samples leak across splits.
pub fn split_dataset(
    spec: GridSpec,
    tau_i: usize,
    tau_o: usize,
    samples: Vec<SampleSequence>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(DatasetError::InvalidRatios(sum));
    }
    let mut runs: Vec<u32> = Vec::new();
    for s in &samples {
        if !runs.contains(&s.run_id) {
            runs.push(s.run_id);
        }
    }
    let nonempty = ratios.iter().filter(|r| **r > 0.0).count();
    if runs.len() < nonempty {
        return Err(DatasetError::InsufficientRuns(runs.len(), nonempty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    runs.shuffle(&mut rng);

    let r = runs.len() as f64;
    let mut n_train = (ratios[0] * r).round() as usize;
    let mut n_val = (ratios[1] * r).round() as usize;
    // Every nonempty split keeps at least one run; remainder goes to test.
    if ratios[0] > 0.0 {
        n_train = n_train.max(1);
    }
    if ratios[1] > 0.0 {
        n_val = n_val.max(1);
    }
    while n_train + n_val + usize::from(ratios[2] > 0.0) > runs.len() {
        if n_train > 1 {
            n_train -= 1;
        } else {
            n_val -= 1;
        }
    }
    let split_of_run = |run: u32| -> Split {
        let idx = runs.iter().position(|r| *r == run).unwrap();
        if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let splits = samples.iter().map(|s| split_of_run(s.run_id)).collect();
    Ok(Dataset { spec, tau_i, tau_o, samples, splits })
}

const MAGIC: &[u8; 4] = b"OPD1";

impl Dataset {
    /// Binary container: magic "OPD1", header (grid spec, tau_i, tau_o,
    /// sample count), then per sample: run id, split, anchor pose f64x3,
    /// windows as i8, ref window as f64 pairs, labels as u32. Little-endian.
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.spec.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.height as u32).to_le_bytes());
        buf.extend_from_slice(&self.spec.resolution.to_le_bytes());
        buf.extend_from_slice(&(self.tau_i as u32).to_le_bytes());
        buf.extend_from_slice(&(self.tau_o as u32).to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for (sample, split) in self.samples.iter().zip(&self.splits) {
            buf.extend_from_slice(&sample.run_id.to_le_bytes());
            buf.push(match split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            });
            for v in [sample.anchor.x, sample.anchor.y, sample.anchor.theta] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for w in &sample.windows {
                buf.extend_from_slice(&w.iter().map(|v| *v as u8).collect::<Vec<_>>());
            }
            for p in &sample.ref_window {
                buf.extend_from_slice(&p.x.to_le_bytes());
                buf.extend_from_slice(&p.y.to_le_bytes());
            }
            for l in &sample.labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        buf
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Dataset, DatasetError> {
        let mut cur = Reader { buf: bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(DatasetError::Format("bad magic".into()));
        }
        let width = cur.u32()? as usize;
        let height = cur.u32()? as usize;
        let resolution = cur.f64()?;
        let spec = GridSpec { width, height, resolution };
        if spec.n_classes() == 0 || !resolution.is_finite() || resolution <= 0.0 {
            return Err(DatasetError::Format("bad grid spec".into()));
        }
        let tau_i = cur.u32()? as usize;
        let tau_o = cur.u32()? as usize;
        let n_samples = cur.u64()? as usize;
        let window_len = spec.n_classes();
        let mut samples = Vec::with_capacity(n_samples);
        let mut splits = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let run_id = cur.u32()?;
            let split = match cur.u8()? {
                0 => Split::Train,
                1 => Split::Val,
                2 => Split::Test,
                other => {
                    return Err(DatasetError::Format(format!("bad split tag {other}")));
                }
            };
            let anchor = Pose2::new(cur.f64()?, cur.f64()?, cur.f64()?);
            let mut windows = Vec::with_capacity(tau_i + 1);
            for _ in 0..=tau_i {
                let raw = cur.take(window_len)?;
                windows.push(raw.iter().map(|b| *b as i8).collect());
            }
            let mut ref_window = Vec::with_capacity(tau_i + tau_o + 1);
            for _ in 0..tau_i + tau_o + 1 {
                ref_window.push(Vec2::new(cur.f64()?, cur.f64()?));
            }
            let mut labels = Vec::with_capacity(tau_o);
            for _ in 0..tau_o {
                let l = cur.u32()?;
                if l as usize >= spec.n_classes() {
                    return Err(DatasetError::Format(format!("label {l} out of range")));
                }
                labels.push(l);
            }
            samples.push(SampleSequence { run_id, anchor, windows, ref_window, labels });
            splits.push(split);
        }
        if cur.pos != bytes.len() {
            return Err(DatasetError::Format("trailing bytes".into()));
        }
        Ok(Dataset { spec, tau_i, tau_o, samples, splits })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Format("unexpected end of stream".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::EgoState;
    use crate::world::{DriveLog, ReferencePath, TickRecord};
    use rand::{Rng, SeedableRng};

    fn spec_40() -> GridSpec {
        GridSpec { width: 40, height: 40, resolution: 0.2 }
    }

    #[test]
    fn cell_of_position_examples() {
        let spec = spec_40();
        let anchor = Pose2::new(0.0, 0.0, 0.0);
        assert_eq!(cell_of_position(Vec2::new(0.1, 0.1), anchor, &spec).unwrap(), 20);
        // Boundary point belongs to the next cell (half-open convention).
        let c = cell_of_position(Vec2::new(0.2, 0.1), anchor, &spec).unwrap();
        assert_eq!(c, 1 * 40 + 20);
        // Behind the robot.
        assert!(matches!(
            cell_of_position(Vec2::new(-0.1, 0.0), anchor, &spec),
            Err(DatasetError::LabelOutOfWindow(..))
        ));
    }

    #[test]
    fn position_of_cell_examples() {
        let spec = spec_40();
        let anchor = Pose2::new(0.0, 0.0, 0.0);
        let p = position_of_cell(20, anchor, &spec).unwrap();
        assert!((p.x - 0.1).abs() < 1e-12 && (p.y - 0.1).abs() < 1e-12);
        assert!(matches!(
            position_of_cell(1600, anchor, &spec),
            Err(DatasetError::InvalidClass(1600, 1600))
        ));
    }

    #[test]
    fn roundtrip_quantization_bound() {
        let spec = spec_40();
        let bound = spec.resolution * std::f64::consts::SQRT_2 / 2.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20_000 {
            let anchor = Pose2::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-3.1..3.1),
            );
            let e = Vec2::new(
                rng.gen_range(0.0..spec.width as f64 * spec.resolution - 1e-9),
                rng.gen_range(-4.0..4.0 - 1e-9),
            );
            let p = anchor.to_world(e);
            let c = cell_of_position(p, anchor, &spec).unwrap();
            let back = position_of_cell(c, anchor, &spec).unwrap();
            assert!(back.dist(p) <= bound + 1e-9);
        }
    }

    fn synthetic_straight_log(l: usize, step: f64, run_id: u32) -> DriveLog {
        let route = ReferencePath {
            points: (0..=400).map(|i| Vec2::new(i as f64 * 0.25, 0.0)).collect(),
            spacing: 0.25,
        };
        let ticks = (0..l)
            .map(|k| TickRecord {
                tick: k as u64,
                time: k as f64 * 0.25,
                state: EgoState::at_pose(k as f64 * step, 0.0, 0.0),
                wheels: [0.0, 0.0],
                endpoints: Vec::new(),
                hits: Vec::new(),
            })
            .collect();
        DriveLog { run_id, dt: 0.25, route, ticks, aborted: false }
    }

    #[test]
    fn build_samples_counts_and_monotone_labels() {
        let spec = spec_40();
        let log = synthetic_straight_log(100, 0.25, 0);
        let out = build_samples(&log, &spec, 4, 10, &MapBuilderConfig::default()).unwrap();
        assert_eq!(out.anchors, 86);
        assert_eq!(out.samples.len() + out.dropped, 86);
        // Straight constant-speed motion: forward cell index strictly increases.
        for s in &out.samples {
            let fwd: Vec<u32> = s.labels.iter().map(|c| c / 40).collect();
            for w in fwd.windows(2) {
                assert!(w[1] > w[0], "labels not strictly increasing: {fwd:?}");
            }
        }
        // Labels decode to within the quantization bound of the truth.
        let bound = spec.resolution * std::f64::consts::SQRT_2 / 2.0;
        for (s, truth) in out.samples.iter().zip(&out.truths) {
            for (c, p) in s.labels.iter().zip(truth) {
                let back = position_of_cell(*c, s.anchor, &spec).unwrap();
                assert!(back.dist(*p) <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn too_short_log_is_rejected() {
        let spec = spec_40();
        let log = synthetic_straight_log(10, 0.25, 0);
        assert!(matches!(
            build_samples(&log, &spec, 4, 10, &MapBuilderConfig::default()),
            Err(DatasetError::InsufficientLog(10, 15))
        ));
    }

    #[test]
    fn dropped_sample_accounting_is_exact() {
        let spec = GridSpec { width: 8, height: 8, resolution: 0.2 };
        // L-shaped path: anchors near the corner watch the future leave the
        // narrow window laterally, anchors far from it keep all labels.
        let route = ReferencePath {
            points: (0..=400).map(|i| Vec2::new(i as f64 * 0.25, 0.0)).collect(),
            spacing: 0.25,
        };
        let mut poses = Vec::new();
        for k in 0..20 {
            poses.push(Pose2::new(k as f64 * 0.2, 0.0, 0.0));
        }
        for k in 0..20 {
            poses.push(Pose2::new(3.8, (k + 1) as f64 * 0.2, std::f64::consts::FRAC_PI_2));
        }
        let ticks = poses
            .iter()
            .enumerate()
            .map(|(k, p)| TickRecord {
                tick: k as u64,
                time: k as f64 * 0.25,
                state: EgoState::at_pose(p.x, p.y, p.theta),
                wheels: [0.0, 0.0],
                endpoints: Vec::new(),
                hits: Vec::new(),
            })
            .collect();
        let log = DriveLog { run_id: 0, dt: 0.25, route, ticks, aborted: false };

        let out = build_samples(&log, &spec, 2, 4, &MapBuilderConfig::default()).unwrap();
        assert_eq!(out.anchors, 40 - 2 - 4);
        assert_eq!(out.samples.len() + out.dropped, out.anchors);
        assert!(out.dropped > 0, "expected drops near the corner");
        assert!(!out.samples.is_empty(), "expected surviving samples");
    }

    #[test]
    fn split_by_runs() {
        let spec = spec_40();
        let mut samples = Vec::new();
        for run in 0..10u32 {
            let log = synthetic_straight_log(25, 0.25, run);
            let out = build_samples(&log, &spec, 4, 10, &MapBuilderConfig::default()).unwrap();
            samples.extend(out.samples);
        }
        let ds = split_dataset(spec, 4, 10, samples.clone(), [0.8, 0.1, 0.1], 9).unwrap();

        // 10 runs -> 8/1/1 runs.
        use std::collections::BTreeMap;
        let mut run_split: BTreeMap<u32, Split> = BTreeMap::new();
        for (s, sp) in ds.samples.iter().zip(&ds.splits) {
            if let Some(prev) = run_split.insert(s.run_id, *sp) {
                assert_eq!(prev, *sp, "run {} appears in two splits", s.run_id);
            }
        }
        let count = |sp: Split| run_split.values().filter(|v| **v == sp).count();
        assert_eq!(count(Split::Train), 8);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 1);

        // Determinism.
        let ds2 = split_dataset(spec, 4, 10, samples.clone(), [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(ds.splits, ds2.splits);

        // Fewer runs than nonempty splits.
        let two_runs: Vec<SampleSequence> =
            samples.iter().filter(|s| s.run_id < 2).cloned().collect();
        assert!(matches!(
            split_dataset(spec, 4, 10, two_runs, [0.8, 0.1, 0.1], 9),
            Err(DatasetError::InsufficientRuns(2, 3))
        ));
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let spec = spec_40();
        let log = synthetic_straight_log(30, 0.25, 1);
        let out = build_samples(&log, &spec, 4, 10, &MapBuilderConfig::default()).unwrap();
        let ds = split_dataset(spec, 4, 10, out.samples, [0.8, 0.1, 0.1], 3);
        // Single run cannot be split three ways.
        assert!(ds.is_err());

        let mut samples = Vec::new();
        for run in 0..4u32 {
            let log = synthetic_straight_log(25, 0.25, run);
            samples.extend(build_samples(&log, &spec, 4, 10, &MapBuilderConfig::default())
                .unwrap()
                .samples);
        }
        let ds = split_dataset(spec, 4, 10, samples, [0.5, 0.25, 0.25], 3).unwrap();
        let bytes = ds.serialize();
        let back = Dataset::deserialize(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.serialize(), bytes);

        assert!(Dataset::deserialize(&bytes[..bytes.len() - 1]).is_err());
        assert!(Dataset::deserialize(b"XXXX").is_err());
    }
}
