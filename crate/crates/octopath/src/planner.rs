//! Hybrid A* over a projected tri-state grid: kinematically feasible arc
//! primitives, a per-cell continuous vehicle state, and an obstacle-aware
//! holonomic heuristic. Unknown space is traversable at a cost penalty;
//! occupied space blocks the footprint disk.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geom::{Pose2, Vec2};
use crate::kinematics::{body_to_wheel, step_exact, ControlSignal, EgoState, KinematicParams, KinematicsError};
use crate::octree::{CellState, Grid2D};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("no path found")]
    NoPath,
    #[error("invalid goal: {0}")]
    InvalidGoal(String),
    #[error("invalid start: {0}")]
    InvalidStart(String),
    #[error("invalid primitive set: {0}")]
    InvalidPrimitives(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// One constant-control arc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub v_x: f64,
    pub omega_z: f64,
    pub duration: f64,
}

impl Primitive {
    pub fn control(&self) -> ControlSignal {
        ControlSignal::new(self.v_x, self.omega_z)
    }

    pub fn arc_length(&self) -> f64 {
        self.v_x.abs() * self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSet {
    pub primitives: Vec<Primitive>,
}

/// Build a symmetric arc set at fixed speed: `n_curvatures` curvatures evenly
/// spaced in [-kappa_max, kappa_max], with kappa_max determined by the wheel
/// speed bound. Always contains the straight primitive.
pub fn motion_primitives(
    params: &KinematicParams,
    v_x: f64,
    n_curvatures: usize,
    duration: f64,
) -> Result<PrimitiveSet, PlanError> {
    if n_curvatures == 0 || n_curvatures % 2 == 0 {
        return Err(PlanError::InvalidPrimitives(format!(
            "n_curvatures must be odd and nonzero, got {n_curvatures}"
        )));
    }
    if !(v_x > 0.0) || !(duration > 0.0) {
        return Err(PlanError::InvalidPrimitives("v_x and duration must be positive".into()));
    }
    // Straight-line feasibility bounds the speed itself.
    body_to_wheel(ControlSignal::new(v_x, 0.0), params)?;
    let omega_max = (params.r * params.omega_wheel_max - v_x) / params.y_icr0;
    let kappa_max = omega_max / v_x;
    let mut primitives = Vec::with_capacity(n_curvatures);
    if n_curvatures == 1 || kappa_max == 0.0 {
        primitives.push(Primitive { v_x, omega_z: 0.0, duration });
    } else {
        let step = 2.0 * kappa_max / (n_curvatures - 1) as f64;
        for i in 0..n_curvatures {
            let kappa = -kappa_max + i as f64 * step;
            primitives.push(Primitive { v_x, omega_z: kappa * v_x, duration });
        }
    }
    Ok(PrimitiveSet { primitives })
}

/// 8-connected Dijkstra distance-to-goal over non-occupied cells, meters.
/// Occupied cells and cells unreachable from the goal hold +inf.
pub fn holonomic_heuristic(grid: &Grid2D, goal: (i64, i64)) -> Result<Vec<f64>, PlanError> {
    let (gx, gy) = goal;
    if gx < 0 || gy < 0 || gx >= grid.nx as i64 || gy >= grid.ny as i64 {
        return Err(PlanError::InvalidGoal(format!("goal cell ({gx}, {gy}) outside grid")));
    }
    if grid.get(gx, gy) == CellState::Occupied {
        return Err(PlanError::InvalidGoal(format!("goal cell ({gx}, {gy}) is occupied")));
    }
    let res = grid.resolution;
    let diag = res * std::f64::consts::SQRT_2;
    let mut dist = vec![f64::INFINITY; grid.nx * grid.ny];
    let idx = |x: i64, y: i64| x as usize * grid.ny + y as usize;
    let mut heap: BinaryHeap<DijkstraEntry> = BinaryHeap::new();
    dist[idx(gx, gy)] = 0.0;
    heap.push(DijkstraEntry { d: 0.0, x: gx, y: gy });
    while let Some(DijkstraEntry { d, x, y }) = heap.pop() {
        if d > dist[idx(x, y)] {
            continue;
        }
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= grid.nx as i64 || ny >= grid.ny as i64 {
                    continue;
                }
                if grid.get(nx, ny) == CellState::Occupied {
                    continue;
                }
                let step = if dx != 0 && dy != 0 { diag } else { res };
                let nd = d + step;
                if nd < dist[idx(nx, ny)] {
                    dist[idx(nx, ny)] = nd;
                    heap.push(DijkstraEntry { d: nd, x: nx, y: ny });
                }
            }
        }
    }
    Ok(dist)
}

struct DijkstraEntry {
    d: f64,
    x: i64,
    y: i64,
}

impl PartialEq for DijkstraEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for DijkstraEntry {}
impl PartialOrd for DijkstraEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for DijkstraEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance; ties broken on cell index for determinism.
        other
            .d
            .total_cmp(&self.d)
            .then_with(|| (other.x, other.y).cmp(&(self.x, self.y)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlannerConfig {
    pub theta_bins: usize,
    /// Goal position tolerance in meters; heading at the goal is free.
    pub goal_tolerance: f64,
    pub footprint_radius: f64,
    /// Cost multiplier per meter traveled through unknown cells.
    pub unknown_penalty: f64,
    pub max_expansions: usize,
}

impl PlannerConfig {
    pub fn for_grid(grid: &Grid2D) -> Self {
        PlannerConfig {
            theta_bins: 36,
            goal_tolerance: 1.5 * grid.resolution,
            footprint_radius: 0.4,
            unknown_penalty: 1.5,
            max_expansions: 2_000_000,
        }
    }
}

/// One pose on the planned path with its accumulated cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanPose {
    pub pose: Pose2,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub poses: Vec<PlanPose>,
    /// Primitive taken between consecutive poses; `poses.len() - 1` entries.
    pub primitives: Vec<Primitive>,
    pub cost: f64,
    pub length: f64,
    pub expansions: usize,
}

impl PlanResult {
    /// Pose at each requested time from the start of the path, following the
    /// primitive sequence; times beyond the end clamp to the final pose.
    pub fn sample_at_times(&self, times: &[f64]) -> Vec<Pose2> {
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            out.push(self.pose_at_time(t));
        }
        out
    }

    pub fn pose_at_time(&self, t: f64) -> Pose2 {
        if self.primitives.is_empty() || t <= 0.0 {
            return self.poses[0].pose;
        }
        let mut acc = 0.0;
        for (k, prim) in self.primitives.iter().enumerate() {
            if t < acc + prim.duration {
                if t - acc <= 0.0 {
                    return self.poses[k].pose;
                }
                let state = pose_state(self.poses[k].pose);
                let s = step_exact(&state, prim.control(), t - acc);
                return Pose2::new(s.x, s.y, s.theta);
            }
            acc += prim.duration;
        }
        self.poses.last().unwrap().pose
    }

    pub fn total_duration(&self) -> f64 {
        self.primitives.iter().map(|p| p.duration).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,theta,g\n");
        for p in &self.poses {
            s.push_str(&format!("{},{},{},{}\n", p.pose.x, p.pose.y, p.pose.theta, p.g));
        }
        s
    }
}

fn pose_state(p: Pose2) -> EgoState {
    EgoState::at_pose(p.x, p.y, p.theta)
}

/// True when the footprint disk at `p` covers the center of any occupied cell.
pub fn footprint_collides(grid: &Grid2D, p: Vec2, radius: f64) -> bool {
    let r_cells = (radius / grid.resolution).ceil() as i64 + 1;
    let (cx, cy) = (
        ((p.x - grid.origin.x) / grid.resolution).floor() as i64,
        ((p.y - grid.origin.y) / grid.resolution).floor() as i64,
    );
    for ix in cx - r_cells..=cx + r_cells {
        for iy in cy - r_cells..=cy + r_cells {
            if grid.get(ix, iy) == CellState::Occupied {
                let cx_w = grid.origin.x + (ix as f64 + 0.5) * grid.resolution;
                let cy_w = grid.origin.y + (iy as f64 + 0.5) * grid.resolution;
                if p.dist(Vec2::new(cx_w, cy_w)) <= radius {
                    return true;
                }
            }
        }
    }
    false
}

struct HeapEntry {
    f: f64,
    h: f64,
    seq: u64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap: lowest f, then lowest h, then insertion order.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct SearchNode {
    pose: Pose2,
    g: f64,
    parent: usize,
    prim: Option<Primitive>,
}

/// Plan from `start` to within `cfg.goal_tolerance` of `goal`.
///
/// Search state is (x, y, theta) with per-(cell, theta-bin) dominance on g.
/// f = g + max(euclidean, holonomic heuristic). Cost is path length with
/// meters through unknown cells weighted by `cfg.unknown_penalty`.
pub fn hybrid_astar(
    grid: &Grid2D,
    start: Pose2,
    goal: Vec2,
    prims: &PrimitiveSet,
    cfg: &PlannerConfig,
) -> Result<PlanResult, PlanError> {
    if prims.primitives.is_empty() {
        return Err(PlanError::InvalidPrimitives("empty primitive set".into()));
    }
    let goal_cell = grid
        .cell_of(goal)
        .ok_or_else(|| PlanError::InvalidGoal(format!("goal ({}, {}) outside grid", goal.x, goal.y)))?;
    let field = holonomic_heuristic(grid, goal_cell)?;
    if footprint_collides(grid, start.position(), cfg.footprint_radius) {
        return Err(PlanError::InvalidStart("start pose is in collision".into()));
    }
    let start_cell = grid
        .cell_of(start.position())
        .ok_or_else(|| PlanError::InvalidStart("start pose outside grid".into()))?;
    if field[start_cell.0 as usize * grid.ny + start_cell.1 as usize].is_infinite() {
        return Err(PlanError::NoPath);
    }

    let bins = cfg.theta_bins;
    let bin_of = |theta: f64| -> usize {
        let two_pi = std::f64::consts::TAU;
        let norm = (theta + std::f64::consts::PI).rem_euclid(two_pi);
        ((norm / two_pi * bins as f64) as usize).min(bins - 1)
    };
    let heuristic = |p: Vec2| -> f64 {
        let euclid = p.dist(goal);
        match grid.cell_of(p) {
            Some((ix, iy)) => euclid.max(field[ix as usize * grid.ny + iy as usize]),
            None => euclid,
        }
    };

    let mut best_g = vec![f64::INFINITY; grid.nx * grid.ny * bins];
    let cell_key = |p: Vec2, theta: f64| -> Option<usize> {
        grid.cell_of(p)
            .map(|(ix, iy)| (ix as usize * grid.ny + iy as usize) * bins + bin_of(theta))
    };

    let mut nodes = vec![SearchNode { pose: start, g: 0.0, parent: usize::MAX, prim: None }];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let h0 = heuristic(start.position());
    heap.push(HeapEntry { f: h0, h: h0, seq, node: 0 });
    best_g[cell_key(start.position(), start.theta).unwrap()] = 0.0;

    let sub_step = grid.resolution / 2.0;
    let mut expansions = 0usize;

    while let Some(entry) = heap.pop() {
        let node_idx = entry.node;
        let (pose, g) = (nodes[node_idx].pose, nodes[node_idx].g);
        if let Some(key) = cell_key(pose.position(), pose.theta) {
            if g > best_g[key] + 1e-12 {
                continue;
            }
        }
        if pose.position().dist(goal) <= cfg.goal_tolerance {
            return Ok(reconstruct(&nodes, node_idx, expansions));
        }
        expansions += 1;
        if expansions > cfg.max_expansions {
            return Err(PlanError::NoPath);
        }

        for prim in &prims.primitives {
            let u = prim.control();
            let end_state = step_exact(&pose_state(pose), u, prim.duration);
            let end_pose = Pose2::new(end_state.x, end_state.y, end_state.theta);
            let Some(key) = cell_key(end_pose.position(), end_pose.theta) else {
                continue;
            };

            // Sweep the primitive at <= res/2 arc spacing for collisions and
            // traversal cost.
            let n_sub = ((prim.arc_length() / sub_step).ceil() as usize).max(1);
            let sub_dt = prim.duration / n_sub as f64;
            let ds = prim.arc_length() / n_sub as f64;
            let mut s = pose_state(pose);
            let mut seg_cost = 0.0;
            let mut blocked = false;
            for _ in 0..n_sub {
                s = step_exact(&s, u, sub_dt);
                let p = Vec2::new(s.x, s.y);
                if grid.cell_of(p).is_none() || footprint_collides(grid, p, cfg.footprint_radius) {
                    blocked = true;
                    break;
                }
                let mult = match grid.state_at(p) {
                    CellState::Unknown => cfg.unknown_penalty,
                    _ => 1.0,
                };
                seg_cost += ds * mult;
            }
            if blocked {
                continue;
            }

            let g_new = g + seg_cost;
            if g_new + 1e-12 >= best_g[key] {
                continue;
            }
            best_g[key] = g_new;
            nodes.push(SearchNode { pose: end_pose, g: g_new, parent: node_idx, prim: Some(*prim) });
            let h = heuristic(end_pose.position());
            seq += 1;
            heap.push(HeapEntry { f: g_new + h, h, seq, node: nodes.len() - 1 });
        }
    }
    Err(PlanError::NoPath)
}

fn reconstruct(nodes: &[SearchNode], mut idx: usize, expansions: usize) -> PlanResult {
    let mut poses = Vec::new();
    let mut prims = Vec::new();
    loop {
        let n = &nodes[idx];
        poses.push(PlanPose { pose: n.pose, g: n.g });
        if let Some(p) = n.prim {
            prims.push(p);
        }
        if n.parent == usize::MAX {
            break;
        }
        idx = n.parent;
    }
    poses.reverse();
    prims.reverse();
    let cost = poses.last().unwrap().g;
    let length: f64 = prims.iter().map(|p| p.arc_length()).sum();
    PlanResult { poses, primitives: prims, cost, length, expansions }
}
