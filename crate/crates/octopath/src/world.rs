//! Deterministic 2D world: static/dynamic obstacle fields, simulated planar
//! LiDAR (endpoints at z = 0), reference-route generators, and a teacher
//! driver that produces self-supervised drive logs by replanning hybrid A*
//! toward a lookahead route point and tracking the plan with pure pursuit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Rect, Vec2, Vec3};
use crate::kinematics::{body_to_wheel, step_exact, ControlSignal, EgoState, KinematicParams};
use crate::octree::{MapError, OctreeMap, SensorFusionParams};
use crate::planner::{hybrid_astar, motion_primitives, PlanResult, PlannerConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WorldError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<MapError> for WorldError {
    fn from(e: MapError) -> Self {
        WorldError::InvalidScenario(e.to_string())
    }
}

/// Static obstacle shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Circle { center: Vec2, radius: f64 },
    Rect { min: Vec2, max: Vec2 },
}

impl Shape {
    /// Distance from a point to the shape boundary (<= 0 inside).
    pub fn distance(&self, p: Vec2) -> f64 {
        match *self {
            Shape::Circle { center, radius } => p.dist(center) - radius,
            Shape::Rect { min, max } => {
                let cx = p.x.clamp(min.x, max.x);
                let cy = p.y.clamp(min.y, max.y);
                let outside = p.dist(Vec2::new(cx, cy));
                if outside > 0.0 {
                    outside
                } else {
                    // Inside: negative distance to the nearest face.
                    let dx = (p.x - min.x).min(max.x - p.x);
                    let dy = (p.y - min.y).min(max.y - p.y);
                    -dx.min(dy)
                }
            }
        }
    }

    fn translate(&self, d: Vec2) -> Shape {
        match *self {
            Shape::Circle { center, radius } => Shape::Circle { center: center.add(d), radius },
            Shape::Rect { min, max } => Shape::Rect { min: min.add(d), max: max.add(d) },
        }
    }

    fn bounding_box(&self) -> Rect {
        match *self {
            Shape::Circle { center, radius } => Rect::new(
                Vec2::new(center.x - radius, center.y - radius),
                Vec2::new(center.x + radius, center.y + radius),
            ),
            Shape::Rect { min, max } => Rect::new(min, max),
        }
    }

    /// Nearest ray intersection parameter (t > eps along the unit `dir`).
    fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match *self {
            Shape::Circle { center, radius } => {
                let oc = origin.sub(center);
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t1 = -b - sq;
                if t1 > EPS {
                    return Some(t1);
                }
                let t2 = -b + sq;
                if t2 > EPS {
                    return Some(t2);
                }
                None
            }
            Shape::Rect { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for (o, d, lo, hi) in
                    [(origin.x, dir.x, min.x, max.x), (origin.y, dir.y, min.y, max.y)]
                {
                    if d.abs() < 1e-15 {
                        if o < lo || o > hi {
                            return None;
                        }
                    } else {
                        let (a, b) = ((lo - o) / d, (hi - o) / d);
                        t_enter = t_enter.max(a.min(b));
                        t_exit = t_exit.min(a.max(b));
                    }
                }
                if t_enter > t_exit || t_exit < EPS {
                    return None;
                }
                if t_enter > EPS {
                    Some(t_enter)
                } else {
                    Some(t_exit)
                }
            }
        }
    }
}

/// Obstacle translating at constant velocity, reflecting off the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    pub shape: Shape,
    pub velocity: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bounds: Rect,
    pub statics: Vec<Shape>,
    pub dynamics: Vec<DynamicObstacle>,
    pub seed: u64,
}

impl World {
    pub fn empty(bounds: Rect, seed: u64) -> Self {
        World { bounds, statics: Vec::new(), dynamics: Vec::new(), seed }
    }

    /// Scatter `n` random circle/rect obstacles with at least `clearance`
    /// meters between each obstacle boundary and the route start.
    pub fn with_random_obstacles(
        bounds: Rect,
        route: &ReferencePath,
        n: usize,
        start_clearance: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut statics = Vec::new();
        let start = route.points[0];
        let margin = 1.0;
        let mut attempts = 0;
        while statics.len() < n && attempts < n * 200 {
            attempts += 1;
            let cx = rng.gen_range(bounds.min.x + margin..bounds.max.x - margin);
            let cy = rng.gen_range(bounds.min.y + margin..bounds.max.y - margin);
            let shape = if rng.gen_bool(0.6) {
                Shape::Circle { center: Vec2::new(cx, cy), radius: rng.gen_range(0.3..0.7) }
            } else {
                let hw = rng.gen_range(0.25..0.6);
                let hh = rng.gen_range(0.25..0.6);
                Shape::Rect {
                    min: Vec2::new(cx - hw, cy - hh),
                    max: Vec2::new(cx + hw, cy + hh),
                }
            };
            if shape.distance(start) < start_clearance {
                continue;
            }
            statics.push(shape);
        }
        World { bounds, statics, dynamics: Vec::new(), seed }
    }

    fn shapes(&self) -> impl Iterator<Item = &Shape> {
        self.statics.iter().chain(self.dynamics.iter().map(|d| &d.shape))
    }

    /// True when a disk at `center` overlaps any obstacle.
    pub fn collides_disk(&self, center: Vec2, radius: f64) -> bool {
        self.shapes().any(|s| s.distance(center) <= radius)
    }

    /// Range along a ray to the nearest obstacle or bounds wall.
    fn ray_range(&self, origin: Vec2, dir: Vec2) -> f64 {
        let mut best = self.bounds_exit(origin, dir);
        for s in self.shapes() {
            if let Some(t) = s.ray_hit(origin, dir) {
                if t < best {
                    best = t;
                }
            }
        }
        best
    }

    fn bounds_exit(&self, origin: Vec2, dir: Vec2) -> f64 {
        let mut t = f64::INFINITY;
        if dir.x > 1e-15 {
            t = t.min((self.bounds.max.x - origin.x) / dir.x);
        } else if dir.x < -1e-15 {
            t = t.min((self.bounds.min.x - origin.x) / dir.x);
        }
        if dir.y > 1e-15 {
            t = t.min((self.bounds.max.y - origin.y) / dir.y);
        } else if dir.y < -1e-15 {
            t = t.min((self.bounds.min.y - origin.y) / dir.y);
        }
        t.max(0.0)
    }
}

/// Advance dynamic obstacles by `velocity * dt`, reflecting at the bounds.
pub fn step_world(world: &World, dt: f64) -> World {
    debug_assert!(dt > 0.0);
    let mut out = world.clone();
    for dy in &mut out.dynamics {
        let moved = dy.shape.translate(dy.velocity.scale(dt));
        let bb = moved.bounding_box();
        let mut v = dy.velocity;
        if bb.min.x < world.bounds.min.x || bb.max.x > world.bounds.max.x {
            v.x = -v.x;
        }
        if bb.min.y < world.bounds.min.y || bb.max.y > world.bounds.max.y {
            v.y = -v.y;
        }
        // Only move along axes that stay inside; the flipped component
        // re-enters on the next step.
        let step_ok = |lo: f64, hi: f64, blo: f64, bhi: f64| lo >= blo && hi <= bhi;
        let apply = Vec2::new(
            if step_ok(bb.min.x, bb.max.x, world.bounds.min.x, world.bounds.max.x) {
                dy.velocity.x * dt
            } else {
                0.0
            },
            if step_ok(bb.min.y, bb.max.y, world.bounds.min.y, world.bounds.max.y) {
                dy.velocity.y * dt
            } else {
                0.0
            },
        );
        dy.shape = dy.shape.translate(apply);
        dy.velocity = v;
    }
    out
}

/// One simulated LiDAR sweep: `n_beams` rays spanning 360 degrees starting
/// at the pose heading. Endpoints carry z = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub endpoints: Vec<Vec3>,
    pub hits: Vec<bool>,
}

pub fn lidar_scan(world: &World, pose: crate::geom::Pose2, n_beams: usize, max_range: f64) -> Scan {
    let origin = pose.position();
    debug_assert!(world.bounds.contains(origin));
    let mut endpoints = Vec::with_capacity(n_beams);
    let mut hits = Vec::with_capacity(n_beams);
    for k in 0..n_beams {
        let ang = pose.theta + k as f64 * std::f64::consts::TAU / n_beams as f64;
        let dir = Vec2::new(ang.cos(), ang.sin());
        let range = world.ray_range(origin, dir);
        let (t, hit) = if range <= max_range { (range, true) } else { (max_range, false) };
        let p = origin.add(dir.scale(t));
        endpoints.push(Vec3::new(p.x, p.y, 0.0));
        hits.push(hit);
    }
    Scan { endpoints, hits }
}

/// Global reference route, evenly spaced points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    pub points: Vec<Vec2>,
    pub spacing: f64,
}

impl ReferencePath {
    pub fn nearest_index(&self, p: Vec2) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.points.iter().enumerate() {
            let d = p.dist(*q);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Index reached by walking `dist` meters forward from `from`.
    pub fn advance(&self, from: usize, dist: f64) -> usize {
        let mut acc = 0.0;
        let mut i = from;
        while i + 1 < self.points.len() && acc < dist {
            acc += self.points[i].dist(self.points[i + 1]);
            i += 1;
        }
        i
    }

    /// Distance from a point to the route polyline.
    pub fn distance_to(&self, p: Vec2) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            best = best.min(point_segment_distance(p, w[0], w[1]));
        }
        if self.points.len() == 1 {
            best = p.dist(self.points[0]);
        }
        best
    }

    pub fn total_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let denom = ab.dot(ab);
    if denom < 1e-18 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / denom).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

/// Route generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RouteKind {
    Line {
        start: Vec2,
        end: Vec2,
    },
    SCurve {
        start: Vec2,
        heading: f64,
        radius_first: f64,
        radius_second: f64,
        angle_first: f64,
        angle_second: f64,
    },
    Circle {
        center: Vec2,
        radius: f64,
    },
    Waypoints {
        points: Vec<Vec2>,
    },
}

/// Build an evenly spaced reference route.
pub fn make_route(kind: &RouteKind, spacing: f64) -> Result<ReferencePath, WorldError> {
    if !(spacing > 0.0) {
        return Err(WorldError::InvalidGeometry("spacing must be positive".into()));
    }
    let points = match kind {
        RouteKind::Line { start, end } => {
            let len = start.dist(*end);
            if len <= 0.0 {
                return Err(WorldError::InvalidGeometry("line of zero length".into()));
            }
            let n_seg = (len / spacing).round().max(1.0) as usize;
            (0..=n_seg)
                .map(|i| {
                    let t = i as f64 / n_seg as f64;
                    start.add(end.sub(*start).scale(t))
                })
                .collect()
        }
        RouteKind::Circle { center, radius } => {
            if !(*radius > 0.0) {
                return Err(WorldError::InvalidGeometry("circle radius must be positive".into()));
            }
            let circumference = std::f64::consts::TAU * radius;
            let n = ((circumference / spacing).round() as usize).max(3);
            (0..n)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / n as f64;
                    center.add(Vec2::new(radius * a.cos(), radius * a.sin()))
                })
                .collect()
        }
        RouteKind::SCurve {
            start,
            heading,
            radius_first,
            radius_second,
            angle_first,
            angle_second,
        } => {
            if !(*radius_first > 0.0) || !(*radius_second > 0.0) {
                return Err(WorldError::InvalidGeometry("s-curve radii must be positive".into()));
            }
            if !(*angle_first > 0.0) || !(*angle_second > 0.0) {
                return Err(WorldError::InvalidGeometry("s-curve angles must be positive".into()));
            }
            let mut pts = vec![*start];
            let mut state = EgoState::at_pose(start.x, start.y, *heading);
            // Two tangent arcs of opposite curvature, sampled at `spacing`.
            for (radius, angle, sign) in
                [(*radius_first, *angle_first, 1.0), (*radius_second, *angle_second, -1.0)]
            {
                let arc_len = radius * angle;
                let n = (arc_len / spacing).round().max(1.0) as usize;
                let u = ControlSignal::new(1.0, sign / radius);
                let dt = arc_len / n as f64;
                for _ in 0..n {
                    state = step_exact(&state, u, dt);
                    pts.push(Vec2::new(state.x, state.y));
                }
            }
            pts
        }
        RouteKind::Waypoints { points } => {
            if points.len() < 2 {
                return Err(WorldError::InvalidGeometry("need at least two waypoints".into()));
            }
            resample_polyline(points, spacing)
        }
    };
    Ok(ReferencePath { points, spacing })
}

fn resample_polyline(points: &[Vec2], spacing: f64) -> Vec<Vec2> {
    let mut out = vec![points[0]];
    let mut carry = 0.0;
    for w in points.windows(2) {
        let seg = w[1].sub(w[0]);
        let len = seg.norm();
        if len < 1e-12 {
            continue;
        }
        let dir = seg.scale(1.0 / len);
        let mut s = spacing - carry;
        while s <= len {
            out.push(w[0].add(dir.scale(s)));
            s += spacing;
        }
        carry = len - (s - spacing);
    }
    let end = *points.last().unwrap();
    if out.last().unwrap().dist(end) > 0.5 * spacing {
        out.push(end);
    } else {
        *out.last_mut().unwrap() = end;
    }
    out
}

/// Per-tick record of the teacher run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub state: EgoState,
    pub wheels: [f64; 2],
    pub endpoints: Vec<Vec3>,
    pub hits: Vec<bool>,
}

/// One teacher run: fixed-period records plus the active route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveLog {
    pub run_id: u32,
    pub dt: f64,
    pub route: ReferencePath,
    pub ticks: Vec<TickRecord>,
    pub aborted: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header { run_id: u32, dt: f64, spacing: f64, route: Vec<[f64; 2]> },
    Tick {
        tick: u64,
        time: f64,
        pose: [f64; 3],
        vel: [f64; 3],
        wheels: [f64; 2],
        endpoints: Vec<[f64; 3]>,
        hits: Vec<bool>,
    },
    End { aborted: bool },
}

impl DriveLog {
    /// One JSON record per line: header, ticks, end marker.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = LogLine::Header {
            run_id: self.run_id,
            dt: self.dt,
            spacing: self.route.spacing,
            route: self.route.points.iter().map(|p| [p.x, p.y]).collect(),
        };
        out.push_str(&serde_json::to_string(&header).unwrap());
        out.push('\n');
        for t in &self.ticks {
            let line = LogLine::Tick {
                tick: t.tick,
                time: t.time,
                pose: [t.state.x, t.state.y, t.state.theta],
                vel: [t.state.v_x, t.state.v_y, t.state.omega_z],
                wheels: t.wheels,
                endpoints: t.endpoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
                hits: t.hits.clone(),
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        let end = LogLine::End { aborted: self.aborted };
        out.push_str(&serde_json::to_string(&end).unwrap());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<DriveLog, WorldError> {
        let mut header: Option<(u32, f64, ReferencePath)> = None;
        let mut ticks = Vec::new();
        let mut aborted = false;
        let mut saw_end = false;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(line)
                .map_err(|e| WorldError::Format(format!("line {}: {e}", ln + 1)))?;
            match parsed {
                LogLine::Header { run_id, dt, spacing, route } => {
                    let points = route.iter().map(|p| Vec2::new(p[0], p[1])).collect();
                    header = Some((run_id, dt, ReferencePath { points, spacing }));
                }
                LogLine::Tick { tick, time, pose, vel, wheels, endpoints, hits } => {
                    ticks.push(TickRecord {
                        tick,
                        time,
                        state: EgoState {
                            x: pose[0],
                            y: pose[1],
                            theta: pose[2],
                            v_x: vel[0],
                            v_y: vel[1],
                            omega_z: vel[2],
                        },
                        wheels,
                        endpoints: endpoints.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
                        hits,
                    });
                }
                LogLine::End { aborted: a } => {
                    aborted = a;
                    saw_end = true;
                }
            }
        }
        let (run_id, dt, route) =
            header.ok_or_else(|| WorldError::Format("missing header record".into()))?;
        if !saw_end {
            return Err(WorldError::Format("missing end record".into()));
        }
        Ok(DriveLog { run_id, dt, route, ticks, aborted })
    }
}

/// Teacher driver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub v_cruise: f64,
    pub n_beams: usize,
    pub max_range: f64,
    pub footprint_radius: f64,
    /// Planner goal distance along the route ahead of the ego.
    pub goal_lookahead: f64,
    /// Pure-pursuit lookahead along the current plan.
    pub track_lookahead: f64,
    pub replan_every: u64,
    pub n_curvatures: usize,
    pub prim_duration: f64,
    pub map_resolution: f64,
    pub map_margin: f64,
    /// Planner expansion budget per replan; blocked goals fail fast.
    pub max_expansions: usize,
    pub fusion: SensorFusionParams,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            v_cruise: 1.0,
            n_beams: 360,
            max_range: 20.0,
            footprint_radius: 0.4,
            goal_lookahead: 3.0,
            track_lookahead: 0.9,
            replan_every: 3,
            n_curvatures: 7,
            prim_duration: 0.75,
            map_resolution: 0.2,
            map_margin: 2.0,
            max_expansions: 4000,
            fusion: SensorFusionParams::default(),
        }
    }
}

/// Drive the route with the teacher and record a log. The run ends early at
/// the route end; it aborts with a partial log (flagged) on collision.
pub fn collect_run(
    world: &World,
    route: &ReferencePath,
    params: &KinematicParams,
    dt: f64,
    ticks: u64,
    teacher: &TeacherConfig,
    run_id: u32,
) -> Result<DriveLog, WorldError> {
    if route.points.len() < 2 {
        return Err(WorldError::InvalidScenario("route needs at least two points".into()));
    }
    let start = route.points[0];
    if !world.bounds.contains(start) {
        return Err(WorldError::InvalidScenario("route start outside world bounds".into()));
    }
    if world.collides_disk(start, teacher.footprint_radius) {
        return Err(WorldError::InvalidScenario("route start is in collision".into()));
    }

    let heading = {
        let d = route.points[1].sub(start);
        d.y.atan2(d.x)
    };
    let mut state = EgoState::at_pose(start.x, start.y, heading);
    let mut world_now = world.clone();

    let mut map = OctreeMap::fit_bounds(
        world.bounds,
        teacher.map_resolution,
        teacher.map_margin,
        0.0,
        teacher.fusion,
    )?;
    let prims = motion_primitives(params, teacher.v_cruise, teacher.n_curvatures, teacher.prim_duration)
        .map_err(|e| WorldError::InvalidScenario(format!("primitive set: {e}")))?;

    let mut plan: Option<PlanResult> = None;
    let mut log = DriveLog {
        run_id,
        dt,
        route: route.clone(),
        ticks: Vec::new(),
        aborted: false,
    };

    for k in 0..ticks {
        let pose = state.pose();

        // Stop when the route end is reached. Closed routes (circles) start
        // next to their own endpoint, so ending also requires the nearest
        // route point to sit at the tail of the route.
        let end = *route.points.last().unwrap();
        let near = route.nearest_index(pose.position());
        if near + 2 >= route.points.len() && pose.position().dist(end) < route.spacing.max(0.5) {
            break;
        }

        let scan = lidar_scan(&world_now, pose, teacher.n_beams, teacher.max_range);
        map.integrate_scan_flagged(
            Vec3::new(pose.x, pose.y, 0.0),
            &scan.endpoints,
            &scan.hits,
        )?;

        if plan.is_none() || k % teacher.replan_every == 0 {
            let grid = map.project_2d(0.0, teacher.map_resolution * 0.5);
            let near = route.nearest_index(pose.position());
            let mut cfg = PlannerConfig::for_grid(&grid);
            cfg.footprint_radius = teacher.footprint_radius + 0.3;
            cfg.goal_tolerance = (1.5 * grid.resolution).max(0.3);
            // The teacher has to drive into unexplored space along its own
            // route; penalizing unknown cells would both bloat the search
            // and push it off the reference. Unreachable goals must fail
            // fast, not exhaust the whole state space.
            cfg.unknown_penalty = 1.0;
            cfg.max_expansions = teacher.max_expansions;
            // Route points can sit inside mapped obstacles; slide the goal
            // forward along the route (then shrink back) to a free point.
            let mut goal = None;
            for extra in [0.0, 1.0, 2.0, 3.0, -1.0, -2.0] {
                let lookahead = teacher.goal_lookahead + extra;
                if lookahead < 0.5 {
                    continue;
                }
                let candidate = route.points[route.advance(near, lookahead)];
                if !crate::planner::footprint_collides(&grid, candidate, cfg.footprint_radius) {
                    goal = Some(candidate);
                    break;
                }
            }
            if let Some(goal) = goal {
                if let Ok(p) = hybrid_astar(&grid, pose, goal, &prims, &cfg) {
                    plan = Some(p);
                }
            }
        }

        // Pure pursuit toward a lookahead target on the plan (falling back to
        // the route when no plan is available yet).
        let target = match &plan {
            Some(p) => lookahead_on_poses(
                &p.poses.iter().map(|pp| pp.pose.position()).collect::<Vec<_>>(),
                pose.position(),
                teacher.track_lookahead,
            ),
            None => {
                let near = route.nearest_index(pose.position());
                let idx = route.advance(near, teacher.track_lookahead);
                route.points[idx]
            }
        };
        let mut u = pursuit_control(pose, target, teacher.v_cruise, params);
        // Reactive brake against the map the teacher has actually built: if
        // the next pose would put the footprint onto mapped-occupied space,
        // creep until the next replan instead of driving in at speed.
        let predicted = step_exact(&state, u, dt);
        if map_occupied_at(&map, Vec2::new(predicted.x, predicted.y), teacher.footprint_radius + 0.1) {
            u = ControlSignal::new(u.v_x * 0.25, u.omega_z * 0.25);
        }
        let wheels = body_to_wheel(u, params)
            .map_err(|e| WorldError::InvalidScenario(format!("teacher control: {e}")))?;

        log.ticks.push(TickRecord {
            tick: k,
            time: k as f64 * dt,
            state: EgoState { v_x: u.v_x, v_y: 0.0, omega_z: u.omega_z, ..state },
            wheels: [wheels.0, wheels.1],
            endpoints: scan.endpoints.clone(),
            hits: scan.hits.clone(),
        });

        state = step_exact(&state, u, dt);
        world_now = step_world(&world_now, dt);

        if world_now.collides_disk(Vec2::new(state.x, state.y), teacher.footprint_radius)
            || !world_now.bounds.contains(Vec2::new(state.x, state.y))
        {
            log.aborted = true;
            break;
        }
    }
    Ok(log)
}

/// Occupied-voxel check of the z = 0 layer around a point: the disk covers
/// the center of some occupied voxel.
fn map_occupied_at(map: &OctreeMap, p: Vec2, radius: f64) -> bool {
    let res = map.resolution();
    let origin = map.origin();
    let z = origin.z + res * 0.5;
    let ix = ((p.x - origin.x) / res).floor();
    let iy = ((p.y - origin.y) / res).floor();
    let r_cells = (radius / res).ceil() as i64 + 1;
    for dx in -r_cells..=r_cells {
        for dy in -r_cells..=r_cells {
            let cx = origin.x + (ix + dx as f64 + 0.5) * res;
            let cy = origin.y + (iy + dy as f64 + 0.5) * res;
            if p.dist(Vec2::new(cx, cy)) > radius {
                continue;
            }
            if map.query_state(Vec3::new(cx, cy, z)) == crate::octree::CellState::Occupied {
                return true;
            }
        }
    }
    false
}

fn lookahead_on_poses(path: &[Vec2], from: Vec2, lookahead: f64) -> Vec2 {
    if path.is_empty() {
        return from;
    }
    let mut near = 0;
    let mut near_d = f64::INFINITY;
    for (i, p) in path.iter().enumerate() {
        let d = from.dist(*p);
        if d < near_d {
            near_d = d;
            near = i;
        }
    }
    let mut acc = 0.0;
    let mut i = near;
    while i + 1 < path.len() && acc < lookahead {
        acc += path[i].dist(path[i + 1]);
        i += 1;
    }
    path[i]
}

/// Curvature-based pursuit of a target point, slowing down in tight turns so
/// the wheel speed bound is never violated.
fn pursuit_control(
    pose: crate::geom::Pose2,
    target: Vec2,
    v_cruise: f64,
    params: &KinematicParams,
) -> ControlSignal {
    let local = pose.to_ego(target);
    let l2 = local.dot(local);
    let omega_allow = (params.r * params.omega_wheel_max * 0.98 - 1e-6) / params.y_icr0;
    if l2 < 1e-12 {
        return ControlSignal::new(v_cruise.min(params.r * params.omega_wheel_max * 0.98), 0.0);
    }
    if local.x <= 0.0 {
        // Target behind: rotate toward it at low speed.
        let sign = if local.y >= 0.0 { 1.0 } else { -1.0 };
        let v = 0.1 * v_cruise;
        let omega = sign * (omega_allow - v / params.y_icr0).max(0.1);
        return ControlSignal::new(v, omega);
    }
    let kappa = 2.0 * local.y / l2;
    // |v (1 +- kappa y0)| <= r omega_max; scale v down, keep the curvature.
    let v_max = params.r * params.omega_wheel_max * 0.98 / (1.0 + kappa.abs() * params.y_icr0);
    let v = v_cruise.min(v_max);
    ControlSignal::new(v, kappa * v)
}
