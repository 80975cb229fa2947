//! Probabilistic octree occupancy map built from range-sensor scans.
//!
//! The map covers a bounded cube subdivided down to a minimum voxel scale
//! (the resolution). Each stored leaf carries a clamped log-odds occupancy
//! belief; voxels never touched by a scan have no node at all and query as
//! `Unknown`. Beams carve free space between the sensor and the endpoint
//! and mark the endpoint voxel occupied.

use serde::{Deserialize, Serialize};

use crate::geom::{Pose2, Rect, Vec2, Vec3};

/// Tri-state occupancy classification of a voxel or projected 2D cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellState {
    Occupied,
    Free,
    Unknown,
}

impl CellState {
    /// Network input encoding: occupied +1, free -1, unknown 0.
    pub fn encode(self) -> i8 {
        match self {
            CellState::Occupied => 1,
            CellState::Free => -1,
            CellState::Unknown => 0,
        }
    }
}

/// Inverse sensor-model constants for log-odds fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFusionParams {
    pub p_hit: f64,
    pub p_miss: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub occ_threshold: f64,
    pub max_range: f64,
}

impl Default for SensorFusionParams {
    fn default() -> Self {
        SensorFusionParams {
            p_hit: 0.7,
            p_miss: 0.4,
            l_min: logit(0.12),
            l_max: logit(0.97),
            occ_threshold: 0.5,
            max_range: 20.0,
        }
    }
}

impl SensorFusionParams {
    pub fn validate(&self) -> Result<(), MapError> {
        let ok = self.p_hit > 0.5
            && self.p_hit < 1.0
            && self.p_miss > 0.0
            && self.p_miss < 0.5
            && self.l_min < 0.0
            && self.l_max > 0.0
            && self.occ_threshold > 0.0
            && self.occ_threshold < 1.0
            && self.max_range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MapError::InvalidGeometry(format!(
                "sensor fusion params out of range: {self:?}"
            )))
        }
    }

    pub fn logit_hit(&self) -> f64 {
        logit(self.p_hit)
    }

    pub fn logit_miss(&self) -> f64 {
        logit(self.p_miss)
    }
}

/// ln(p / (1 - p)).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MapError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("format error: {0}")]
    Format(String),
}

enum Node {
    Branch([Option<Box<Node>>; 8]),
    Leaf(f64),
}

/// Fixed-size ego-frame crop of a projected occupancy grid, encoded for the
/// network input: occupied +1, free -1, unknown 0. Cell (i, j) covers
/// forward [i*res, (i+1)*res) and lateral [j*res - h*res/2, ...), indexed as
/// `i * height + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoWindow {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub values: Vec<i8>,
    pub frame: Pose2,
}

/// Dense 2D tri-state grid produced by projecting the octree.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub origin: Vec2,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<CellState>,
}

impl Grid2D {
    pub fn filled(origin: Vec2, resolution: f64, nx: usize, ny: usize, state: CellState) -> Self {
        Grid2D { origin, resolution, nx, ny, cells: vec![state; nx * ny] }
    }

    pub fn get(&self, ix: i64, iy: i64) -> CellState {
        if ix < 0 || iy < 0 || ix >= self.nx as i64 || iy >= self.ny as i64 {
            return CellState::Unknown;
        }
        self.cells[ix as usize * self.ny + iy as usize]
    }

    pub fn set(&mut self, ix: usize, iy: usize, state: CellState) {
        self.cells[ix * self.ny + iy] = state;
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(i64, i64)> {
        let ix = ((p.x - self.origin.x) / self.resolution).floor() as i64;
        let iy = ((p.y - self.origin.y) / self.resolution).floor() as i64;
        if ix < 0 || iy < 0 || ix >= self.nx as i64 || iy >= self.ny as i64 {
            None
        } else {
            Some((ix, iy))
        }
    }

    /// Tri-state at a world point; outside the grid extent is Unknown.
    pub fn state_at(&self, p: Vec2) -> CellState {
        match self.cell_of(p) {
            Some((ix, iy)) => self.get(ix, iy),
            None => CellState::Unknown,
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (ix as f64 + 0.5) * self.resolution,
            self.origin.y + (iy as f64 + 0.5) * self.resolution,
        )
    }
}

/// Sample a fixed-size window of `grid` in the frame of `pose`.
///
/// Window x is forward in [0, width*res), y is lateral in
/// [-height*res/2, height*res/2). Each window cell takes the state of the
/// grid cell containing the window cell's center.
pub fn ego_window(
    grid: &Grid2D,
    pose: Pose2,
    width: usize,
    height: usize,
    resolution: f64,
) -> EgoWindow {
    let mut values = vec![0i8; width * height];
    let half_lat = height as f64 * resolution / 2.0;
    for i in 0..width {
        let xe = (i as f64 + 0.5) * resolution;
        for j in 0..height {
            let ye = (j as f64 + 0.5) * resolution - half_lat;
            let world = pose.to_world(Vec2::new(xe, ye));
            values[i * height + j] = grid.state_at(world).encode();
        }
    }
    EgoWindow { width, height, resolution, values, frame: pose }
}

/// Voxels an open segment passes through, in traversal order, restricted to
/// the grid `[0, dims)`^3. Incremental axis-stepping traversal; half-open
/// voxel intervals `[min, min + res)` decide boundary ownership. The segment
/// endpoint's voxel is last when it lies inside the grid.
pub fn ray_voxels(
    start: Vec3,
    end: Vec3,
    origin: Vec3,
    resolution: f64,
    dims: [i64; 3],
) -> Vec<[i64; 3]> {
    let s = [
        (start.x - origin.x) / resolution,
        (start.y - origin.y) / resolution,
        (start.z - origin.z) / resolution,
    ];
    let e = [
        (end.x - origin.x) / resolution,
        (end.y - origin.y) / resolution,
        (end.z - origin.z) / resolution,
    ];
    let dir = [e[0] - s[0], e[1] - s[1], e[2] - s[2]];
    let mut cell = [s[0].floor() as i64, s[1].floor() as i64, s[2].floor() as i64];
    let end_cell = [e[0].floor() as i64, e[1].floor() as i64, e[2].floor() as i64];

    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_delta[a] = 1.0 / dir[a];
            t_max[a] = (cell[a] as f64 + 1.0 - s[a]) / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_delta[a] = 1.0 / -dir[a];
            t_max[a] = (s[a] - cell[a] as f64) / -dir[a];
        }
    }

    let in_bounds =
        |c: &[i64; 3]| (0..3).all(|a| c[a] >= 0 && c[a] < dims[a]);
    let mut out = Vec::new();
    let mut was_inside = false;
    let max_steps = ((dims[0] + dims[1] + dims[2]) * 3 + 8) as usize;
    for _ in 0..max_steps {
        if in_bounds(&cell) {
            out.push(cell);
            was_inside = true;
        } else if was_inside {
            break;
        }
        if cell == end_cell {
            break;
        }
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > 1.0 {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
    }
    out
}

/// Bounded sparse octree with per-leaf log-odds occupancy.
pub struct OctreeMap {
    origin: Vec3,
    side_length: f64,
    resolution: f64,
    depth: u32,
    params: SensorFusionParams,
    root: Option<Box<Node>>,
    branch_count: usize,
    leaf_count: usize,
}

/// Returns d >= 1 such that `coarse == fine * 2^d`, if one exists. Doubling
/// a finite f64 is exact, so bitwise comparison is the right test.
fn dyadic_exponent(fine: f64, coarse: f64) -> Option<u32> {
    if !(fine > 0.0) || !(coarse > fine) {
        return None;
    }
    let mut v = fine;
    for d in 1..=60u32 {
        v *= 2.0;
        if v == coarse {
            return Some(d);
        }
        if v > coarse {
            return None;
        }
    }
    None
}

impl OctreeMap {
    /// Create an empty map over `[origin, origin + side_length)^3`.
    /// `side_length` must equal `resolution * 2^d` for integer d >= 1.
    pub fn new(
        origin: Vec3,
        side_length: f64,
        resolution: f64,
        params: SensorFusionParams,
    ) -> Result<Self, MapError> {
        params.validate()?;
        let depth = dyadic_exponent(resolution, side_length).ok_or_else(|| {
            MapError::InvalidGeometry(format!(
                "side_length {side_length} is not resolution {resolution} times a power of two"
            ))
        })?;
        Ok(OctreeMap {
            origin,
            side_length,
            resolution,
            depth,
            params,
            root: None,
            branch_count: 0,
            leaf_count: 0,
        })
    }

    /// Smallest valid map cube that covers `bounds` (plus `margin` on every
    /// side) in xy, with z spanning upward from `origin.z = z_floor`.
    pub fn fit_bounds(
        bounds: Rect,
        resolution: f64,
        margin: f64,
        z_floor: f64,
        params: SensorFusionParams,
    ) -> Result<Self, MapError> {
        let need = (bounds.width().max(bounds.height()) + 2.0 * margin).max(resolution * 2.0);
        let mut side = resolution * 2.0;
        while side < need {
            side *= 2.0;
        }
        let cx = (bounds.min.x + bounds.max.x) / 2.0;
        let cy = (bounds.min.y + bounds.max.y) / 2.0;
        let origin = Vec3::new(cx - side / 2.0, cy - side / 2.0, z_floor);
        OctreeMap::new(origin, side, resolution, params)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn params(&self) -> &SensorFusionParams {
        &self.params
    }

    pub fn cells_per_side(&self) -> i64 {
        1i64 << self.depth
    }

    fn dims(&self) -> [i64; 3] {
        let n = self.cells_per_side();
        [n, n, n]
    }

    /// Stored leaves (== distinct voxels ever touched by a scan).
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Stored nodes, interior and leaf.
    pub fn node_count(&self) -> usize {
        self.branch_count + self.leaf_count
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.voxel_of(p).is_some()
    }

    /// Voxel index of a point, if inside the map cube.
    pub fn voxel_of(&self, p: Vec3) -> Option<[i64; 3]> {
        let n = self.cells_per_side();
        let vx = ((p.x - self.origin.x) / self.resolution).floor() as i64;
        let vy = ((p.y - self.origin.y) / self.resolution).floor() as i64;
        let vz = ((p.z - self.origin.z) / self.resolution).floor() as i64;
        let v = [vx, vy, vz];
        if v.iter().all(|&c| c >= 0 && c < n) {
            Some(v)
        } else {
            None
        }
    }

    /// Stored log-odds of a voxel, if a node exists.
    pub fn leaf_log_odds(&self, v: [i64; 3]) -> Option<f64> {
        let mut node = self.root.as_deref()?;
        let mut level = self.depth;
        loop {
            match node {
                Node::Leaf(lo) => return Some(*lo),
                Node::Branch(children) => {
                    level -= 1;
                    let idx = child_index(v, level);
                    node = children[idx].as_deref()?;
                }
            }
        }
    }

    fn state_of_log_odds(&self, lo: f64) -> CellState {
        if lo > logit(self.params.occ_threshold) {
            CellState::Occupied
        } else {
            CellState::Free
        }
    }

    /// Tri-state occupancy at a point; outside the map is Unknown.
    pub fn query_state(&self, p: Vec3) -> CellState {
        match self.voxel_of(p) {
            None => CellState::Unknown,
            Some(v) => match self.leaf_log_odds(v) {
                None => CellState::Unknown,
                Some(lo) => self.state_of_log_odds(lo),
            },
        }
    }

    pub fn state_of_voxel(&self, v: [i64; 3]) -> CellState {
        match self.leaf_log_odds(v) {
            None => CellState::Unknown,
            Some(lo) => self.state_of_log_odds(lo),
        }
    }

    fn update_voxel(&mut self, v: [i64; 3], delta: f64) {
        let (l_min, l_max) = (self.params.l_min, self.params.l_max);
        let depth = self.depth;
        insert_rec(
            &mut self.root,
            depth,
            v,
            delta,
            l_min,
            l_max,
            &mut self.branch_count,
            &mut self.leaf_count,
        );
    }

    /// Fuse one scan: each beam carves free space along the ray and, when
    /// `hits[i]` is true, marks the endpoint voxel occupied. Beams flagged as
    /// no-return update only free space. Voxels outside the cube are skipped.
    pub fn integrate_scan_flagged(
        &mut self,
        sensor_origin: Vec3,
        endpoints: &[Vec3],
        hits: &[bool],
    ) -> Result<(), MapError> {
        if !self.contains(sensor_origin) {
            return Err(MapError::OutOfBounds(format!(
                "sensor origin ({}, {}, {}) outside map",
                sensor_origin.x, sensor_origin.y, sensor_origin.z
            )));
        }
        let lo_hit = self.params.logit_hit();
        let lo_miss = self.params.logit_miss();
        for (k, &end) in endpoints.iter().enumerate() {
            let hit = hits.get(k).copied().unwrap_or(true);
            let voxels = ray_voxels(sensor_origin, end, self.origin, self.resolution, self.dims());
            if voxels.is_empty() {
                continue;
            }
            let end_voxel = self.voxel_of(end);
            let last = *voxels.last().unwrap();
            let hit_last = hit && end_voxel == Some(last);
            for (idx, &v) in voxels.iter().enumerate() {
                if hit_last && idx == voxels.len() - 1 {
                    self.update_voxel(v, lo_hit);
                } else {
                    self.update_voxel(v, lo_miss);
                }
            }
        }
        Ok(())
    }

    /// Fuse one scan, deriving hit flags from range: an endpoint farther than
    /// `max_range` is treated as a no-return beam and clipped to `max_range`.
    pub fn integrate_scan(
        &mut self,
        sensor_origin: Vec3,
        endpoints: &[Vec3],
    ) -> Result<(), MapError> {
        let max_range = self.params.max_range;
        let mut clipped = Vec::with_capacity(endpoints.len());
        let mut hits = Vec::with_capacity(endpoints.len());
        for &e in endpoints {
            let d = e.sub(sensor_origin);
            let dist = d.norm();
            if dist > max_range {
                clipped.push(sensor_origin.add(d.scale(max_range / dist)));
                hits.push(false);
            } else {
                clipped.push(e);
                hits.push(true);
            }
        }
        self.integrate_scan_flagged(sensor_origin, &clipped, &hits)
    }

    /// Project the vertical band `[z_min, z_max]` onto a 2D tri-state grid
    /// covering the map's xy extent. Occupied dominates, then Free.
    pub fn project_2d(&self, z_min: f64, z_max: f64) -> Grid2D {
        assert!(z_min < z_max, "project_2d requires z_min < z_max");
        let n = self.cells_per_side() as usize;
        let mut grid = Grid2D::filled(
            self.origin.xy(),
            self.resolution,
            n,
            n,
            CellState::Unknown,
        );
        let occ_logit = logit(self.params.occ_threshold);
        if let Some(root) = self.root.as_deref() {
            self.project_rec(root, self.depth, [0, 0, 0], z_min, z_max, occ_logit, &mut grid);
        }
        grid
    }

    fn project_rec(
        &self,
        node: &Node,
        level: u32,
        base: [i64; 3],
        z_min: f64,
        z_max: f64,
        occ_logit: f64,
        grid: &mut Grid2D,
    ) {
        match node {
            Node::Leaf(lo) => {
                let z0 = self.origin.z + base[2] as f64 * self.resolution;
                if z0 <= z_max && z0 + self.resolution > z_min {
                    let (ix, iy) = (base[0] as usize, base[1] as usize);
                    let state = if *lo > occ_logit { CellState::Occupied } else { CellState::Free };
                    let cur = grid.get(base[0], base[1]);
                    let next = match (cur, state) {
                        (CellState::Occupied, _) => CellState::Occupied,
                        (_, CellState::Occupied) => CellState::Occupied,
                        _ => CellState::Free,
                    };
                    grid.set(ix, iy, next);
                }
            }
            Node::Branch(children) => {
                let half = 1i64 << (level - 1);
                for (idx, child) in children.iter().enumerate() {
                    if let Some(child) = child {
                        let b = [
                            base[0] + if idx & 1 != 0 { half } else { 0 },
                            base[1] + if idx & 2 != 0 { half } else { 0 },
                            base[2] + if idx & 4 != 0 { half } else { 0 },
                        ];
                        self.project_rec(child, level - 1, b, z_min, z_max, occ_logit, grid);
                    }
                }
            }
        }
    }

    /// Cut the tree down to a coarser resolution `resolution * 2^k`, k >= 1.
    /// A coarse leaf takes the max log-odds of its fine descendants so that
    /// obstacles never vanish when resolution is lowered.
    pub fn coarsen(&self, new_resolution: f64) -> Result<OctreeMap, MapError> {
        let k = dyadic_exponent(self.resolution, new_resolution).ok_or_else(|| {
            MapError::InvalidGeometry(format!(
                "target resolution {new_resolution} is not {} times a power of two",
                self.resolution
            ))
        })?;
        if k >= self.depth {
            return Err(MapError::InvalidGeometry(format!(
                "target resolution {new_resolution} would leave fewer than 2 cells per side"
            )));
        }
        let mut out = OctreeMap::new(self.origin, self.side_length, new_resolution, self.params)?;
        if let Some(root) = self.root.as_deref() {
            out.root = collapse_rec(root, self.depth - k).map(Box::new);
        }
        let (branches, leaves) = count_rec(out.root.as_deref());
        out.branch_count = branches;
        out.leaf_count = leaves;
        Ok(out)
    }

    /// Binary serialization; see the format notes on `deserialize`.
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"OCT1");
        for v in [
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.side_length,
            self.resolution,
            self.params.p_hit,
            self.params.p_miss,
            self.params.l_min,
            self.params.l_max,
            self.params.occ_threshold,
            self.params.max_range,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(root) = self.root.as_deref() {
            write_node(root, &mut buf);
        }
        buf
    }

    /// Parse the little-endian binary format: magic "OCT1", header (origin
    /// f64x3, side_length, resolution, fusion params), then preorder node
    /// records (branches carry a child bitmask u8, leaves a log-odds f64).
    /// A header-only stream is an empty map.
    pub fn deserialize(bytes: &[u8]) -> Result<OctreeMap, MapError> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.read_bytes(4)?;
        if magic != b"OCT1" {
            return Err(MapError::Format("bad magic".into()));
        }
        let ox = cur.read_f64()?;
        let oy = cur.read_f64()?;
        let oz = cur.read_f64()?;
        let side = cur.read_f64()?;
        let res = cur.read_f64()?;
        let params = SensorFusionParams {
            p_hit: cur.read_f64()?,
            p_miss: cur.read_f64()?,
            l_min: cur.read_f64()?,
            l_max: cur.read_f64()?,
            occ_threshold: cur.read_f64()?,
            max_range: cur.read_f64()?,
        };
        let mut map = OctreeMap::new(Vec3::new(ox, oy, oz), side, res, params)
            .map_err(|e| MapError::Format(format!("bad header: {e}")))?;
        if cur.pos < bytes.len() {
            let root = read_node(&mut cur, map.depth)?;
            map.root = Some(Box::new(root));
        }
        if cur.pos != bytes.len() {
            return Err(MapError::Format("trailing bytes after tree".into()));
        }
        let (branches, leaves) = count_rec(map.root.as_deref());
        map.branch_count = branches;
        map.leaf_count = leaves;
        Ok(map)
    }
}

fn child_index(v: [i64; 3], level: u32) -> usize {
    (((v[0] >> level) & 1) | (((v[1] >> level) & 1) << 1) | (((v[2] >> level) & 1) << 2)) as usize
}

#[allow(clippy::too_many_arguments)]
fn insert_rec(
    slot: &mut Option<Box<Node>>,
    level: u32,
    v: [i64; 3],
    delta: f64,
    l_min: f64,
    l_max: f64,
    branch_count: &mut usize,
    leaf_count: &mut usize,
) {
    if level == 0 {
        match slot {
            Some(node) => {
                if let Node::Leaf(lo) = node.as_mut() {
                    *lo = (*lo + delta).clamp(l_min, l_max);
                }
            }
            None => {
                *leaf_count += 1;
                *slot = Some(Box::new(Node::Leaf(delta.clamp(l_min, l_max))));
            }
        }
        return;
    }
    if slot.is_none() {
        *branch_count += 1;
        *slot = Some(Box::new(Node::Branch(Default::default())));
    }
    if let Node::Branch(children) = slot.as_mut().unwrap().as_mut() {
        let idx = child_index(v, level - 1);
        insert_rec(&mut children[idx], level - 1, v, delta, l_min, l_max, branch_count, leaf_count);
    }
}

fn max_leaf_rec(node: &Node) -> f64 {
    match node {
        Node::Leaf(lo) => *lo,
        Node::Branch(children) => children
            .iter()
            .flatten()
            .map(|c| max_leaf_rec(c))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

fn collapse_rec(node: &Node, remaining: u32) -> Option<Node> {
    if remaining == 0 {
        return Some(Node::Leaf(max_leaf_rec(node)));
    }
    match node {
        // Fine tree bottomed out above the coarse leaf level; can only occur
        // for degenerate inputs, keep the value as a leaf.
        Node::Leaf(lo) => Some(Node::Leaf(*lo)),
        Node::Branch(children) => {
            let mut out: [Option<Box<Node>>; 8] = Default::default();
            let mut any = false;
            for (idx, child) in children.iter().enumerate() {
                if let Some(child) = child {
                    if let Some(c) = collapse_rec(child, remaining - 1) {
                        out[idx] = Some(Box::new(c));
                        any = true;
                    }
                }
            }
            if any {
                Some(Node::Branch(out))
            } else {
                None
            }
        }
    }
}

fn count_rec(node: Option<&Node>) -> (usize, usize) {
    match node {
        None => (0, 0),
        Some(Node::Leaf(_)) => (0, 1),
        Some(Node::Branch(children)) => {
            let mut b = 1;
            let mut l = 0;
            for child in children.iter().flatten() {
                let (cb, cl) = count_rec(Some(child));
                b += cb;
                l += cl;
            }
            (b, l)
        }
    }
}

fn write_node(node: &Node, buf: &mut Vec<u8>) {
    match node {
        Node::Leaf(lo) => buf.extend_from_slice(&lo.to_le_bytes()),
        Node::Branch(children) => {
            let mut mask = 0u8;
            for (idx, child) in children.iter().enumerate() {
                if child.is_some() {
                    mask |= 1 << idx;
                }
            }
            buf.push(mask);
            for child in children.iter().flatten() {
                write_node(child, buf);
            }
        }
    }
}

fn read_node(cur: &mut Cursor, level: u32) -> Result<Node, MapError> {
    if level == 0 {
        let lo = cur.read_f64()?;
        if !lo.is_finite() {
            return Err(MapError::Format("non-finite leaf log-odds".into()));
        }
        return Ok(Node::Leaf(lo));
    }
    let mask = cur.read_u8()?;
    if mask == 0 {
        return Err(MapError::Format("branch with no children".into()));
    }
    let mut children: [Option<Box<Node>>; 8] = Default::default();
    for (idx, child) in children.iter_mut().enumerate() {
        if mask & (1 << idx) != 0 {
            *child = Some(Box::new(read_node(cur, level - 1)?));
        }
    }
    Ok(Node::Branch(children))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8], MapError> {
        if self.pos + n > self.buf.len() {
            return Err(MapError::Format("unexpected end of stream".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u8(&mut self) -> Result<u8, MapError> {
        Ok(self.read_bytes(1)?[0])
    }

    fn read_f64(&mut self) -> Result<f64, MapError> {
        let b = self.read_bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parse whitespace-separated "x y z" text, one point per line, meters.
/// Blank lines and lines starting with '#' are skipped.
pub fn parse_point_cloud(text: &str) -> Result<Vec<Vec3>, MapError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64, MapError> {
            it.next()
                .ok_or_else(|| MapError::Format(format!("line {}: expected 3 fields", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| MapError::Format(format!("line {}: {e}", lineno + 1)))
        };
        let p = Vec3::new(next()?, next()?, next()?);
        if it.next().is_some() {
            return Err(MapError::Format(format!("line {}: expected 3 fields", lineno + 1)));
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> OctreeMap {
        OctreeMap::new(Vec3::ZERO, 12.8, 0.2, SensorFusionParams::default()).unwrap()
    }

    #[test]
    fn create_validates_power_of_two() {
        assert!(OctreeMap::new(Vec3::ZERO, 12.8, 0.2, SensorFusionParams::default()).is_ok());
        let err = OctreeMap::new(Vec3::ZERO, 10.0, 0.3, SensorFusionParams::default());
        assert!(matches!(err, Err(MapError::InvalidGeometry(_))));
        // side == resolution (d = 0) is rejected too
        let err = OctreeMap::new(Vec3::ZERO, 0.2, 0.2, SensorFusionParams::default());
        assert!(matches!(err, Err(MapError::InvalidGeometry(_))));
    }

    #[test]
    fn empty_map_queries_unknown() {
        let map = small_map();
        assert_eq!(map.query_state(Vec3::new(1.0, 2.0, 3.0)), CellState::Unknown);
        assert_eq!(map.query_state(Vec3::new(-5.0, 0.0, 0.0)), CellState::Unknown);
        assert_eq!(map.node_count(), 0);
    }

    #[test]
    fn single_beam_hit_miss_arithmetic() {
        let mut map = small_map();
        let origin = Vec3::new(0.1, 6.4, 0.1);
        let end = Vec3::new(4.1, 6.4, 0.1);
        map.integrate_scan(origin, &[end]).unwrap();

        let hit_v = map.voxel_of(end).unwrap();
        let lo = map.leaf_log_odds(hit_v).unwrap();
        assert!((lo - 0.8472978603872036).abs() < 1e-12);
        assert_eq!(map.query_state(end), CellState::Occupied);

        // Midpoint voxel carved free.
        let mid = Vec3::new(2.1, 6.4, 0.1);
        let lo_mid = map.leaf_log_odds(map.voxel_of(mid).unwrap()).unwrap();
        assert!(lo_mid < 0.0);
        assert_eq!(map.query_state(mid), CellState::Free);

        // Beyond the endpoint stays unknown.
        assert_eq!(map.query_state(Vec3::new(5.1, 6.4, 0.1)), CellState::Unknown);

        map.integrate_scan(origin, &[end]).unwrap();
        let lo2 = map.leaf_log_odds(hit_v).unwrap();
        assert!((lo2 - 1.6945957207744073).abs() < 1e-12);
    }

    #[test]
    fn log_odds_clamps_at_l_max() {
        let mut map = small_map();
        let origin = Vec3::new(0.1, 6.4, 0.1);
        let end = Vec3::new(4.1, 6.4, 0.1);
        for _ in 0..50 {
            map.integrate_scan(origin, &[end]).unwrap();
        }
        let lo = map.leaf_log_odds(map.voxel_of(end).unwrap()).unwrap();
        assert_eq!(lo, logit(0.97));
        assert!((lo - 3.4760986898352733).abs() < 1e-12);
    }

    #[test]
    fn sensor_origin_outside_bounds_errors() {
        let mut map = small_map();
        let err = map.integrate_scan(Vec3::new(-1.0, 0.0, 0.0), &[Vec3::new(1.0, 1.0, 0.1)]);
        assert!(matches!(err, Err(MapError::OutOfBounds(_))));
    }

    #[test]
    fn no_return_beam_carves_free_only() {
        let mut map = small_map();
        let params = *map.params();
        let origin = Vec3::new(0.1, 6.4, 0.1);
        // Endpoint beyond max_range: free carving up to max_range, no hit.
        let far = Vec3::new(0.1 + params.max_range + 5.0, 6.4, 0.1);
        map.integrate_scan(origin, &[far]).unwrap();
        assert_eq!(map.query_state(Vec3::new(3.0, 6.4, 0.1)), CellState::Free);
        // Nothing occupied anywhere on that ray.
        for step in 0..60 {
            let p = Vec3::new(0.1 + step as f64 * 0.2, 6.4, 0.1);
            assert_ne!(map.query_state(p), CellState::Occupied);
        }
    }

    #[test]
    fn monotonicity_of_updates() {
        let mut map = small_map();
        let origin = Vec3::new(0.1, 6.4, 0.1);
        let end = Vec3::new(4.1, 6.4, 0.1);
        map.integrate_scan(origin, &[end]).unwrap();
        let v = map.voxel_of(end).unwrap();
        let before = map.leaf_log_odds(v).unwrap();
        map.integrate_scan(origin, &[end]).unwrap();
        assert!(map.leaf_log_odds(v).unwrap() >= before);

        let mid_v = map.voxel_of(Vec3::new(2.1, 6.4, 0.1)).unwrap();
        let before_mid = map.leaf_log_odds(mid_v).unwrap();
        map.integrate_scan(origin, &[end]).unwrap();
        assert!(map.leaf_log_odds(mid_v).unwrap() <= before_mid);
    }

    #[test]
    fn project_occupied_dominates_column() {
        let mut map = small_map();
        let origin = Vec3::new(6.4, 6.4, 0.1);
        // One hit at z=0.5 in a column, plus free voxels carved above it.
        map.integrate_scan(origin, &[Vec3::new(2.1, 6.5, 0.5)]).unwrap();
        let grid = map.project_2d(0.0, 1.0);
        assert_eq!(grid.state_at(Vec2::new(2.1, 6.5)), CellState::Occupied);
        // A column that only has free voxels.
        let grid_band = map.project_2d(0.0, 0.3);
        assert_eq!(grid_band.state_at(Vec2::new(4.1, 6.45)), CellState::Free);
        // Untouched column.
        assert_eq!(grid.state_at(Vec2::new(10.0, 1.0)), CellState::Unknown);
    }

    #[test]
    fn ego_window_frame_arithmetic() {
        let res = 0.2;
        let mut grid = Grid2D::filled(
            Vec2::new(-12.8, -12.8),
            res,
            128,
            128,
            CellState::Free,
        );
        // Occupy the cell containing (2.0, 0.0).
        let (ix, iy) = grid.cell_of(Vec2::new(2.0, 0.0)).unwrap();
        grid.set(ix as usize, iy as usize, CellState::Occupied);

        let win = ego_window(&grid, Pose2::new(0.0, 0.0, 0.0), 40, 40, res);
        let i = (2.0_f64 / res).floor() as usize;
        let j = 20;
        assert_eq!(win.values[i * 40 + j], 1);
        let ones: usize = win.values.iter().filter(|&&v| v == 1).count();
        assert_eq!(ones, 1);
    }

    #[test]
    fn ego_window_rotation_covariance() {
        // Obstacle at the rotated image of a window cell center must produce
        // the identical window as the unrotated case.
        let res = 0.2;
        let theta = std::f64::consts::FRAC_PI_2;
        let make = |occupied_at: Vec2, pose: Pose2| {
            let mut grid =
                Grid2D::filled(Vec2::new(-12.8, -12.8), res, 128, 128, CellState::Free);
            let (ix, iy) = grid.cell_of(occupied_at).unwrap();
            grid.set(ix as usize, iy as usize, CellState::Occupied);
            ego_window(&grid, pose, 40, 40, res)
        };
        let cell_center_ego = Vec2::new(2.1, 0.1);
        let w0 = make(cell_center_ego, Pose2::new(0.0, 0.0, 0.0));
        let w90 = make(cell_center_ego.rotate(theta), Pose2::new(0.0, 0.0, theta));
        assert_eq!(w0.values, w90.values);
    }

    #[test]
    fn ego_window_on_empty_grid_is_all_zero() {
        let grid = Grid2D::filled(Vec2::ZERO, 0.2, 64, 64, CellState::Unknown);
        let win = ego_window(&grid, Pose2::new(3.0, 3.0, 0.4), 40, 40, 0.2);
        assert!(win.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn coarsen_any_occupied_rule() {
        let mut map = small_map();
        let origin = Vec3::new(6.4, 6.4, 0.1);
        // Two adjacent occupied fine voxels.
        map.integrate_scan(origin, &[Vec3::new(2.05, 6.5, 0.1), Vec3::new(2.25, 6.5, 0.1)])
            .unwrap();
        let coarse = map.coarsen(0.4).unwrap();
        assert_eq!(coarse.resolution(), 0.4);
        assert_eq!(coarse.query_state(Vec3::new(2.1, 6.5, 0.1)), CellState::Occupied);

        // Free children collapse to a free parent.
        assert_eq!(coarse.query_state(Vec3::new(4.1, 6.5, 0.1)), CellState::Free);

        assert!(matches!(map.coarsen(0.3), Err(MapError::InvalidGeometry(_))));
    }

    #[test]
    fn coarsen_commutes_with_2d_any_occupied_coarsening() {
        let mut map = small_map();
        let origin = Vec3::new(6.4, 6.4, 0.1);
        let mut endpoints = Vec::new();
        for k in 0..40 {
            let ang = k as f64 * 0.157;
            endpoints.push(Vec3::new(
                6.4 + 4.0 * ang.cos(),
                6.4 + 4.0 * ang.sin(),
                0.1,
            ));
        }
        map.integrate_scan(origin, &endpoints).unwrap();

        let fine_grid = map.project_2d(0.0, 0.2);
        let coarse_grid = map.coarsen(0.4).unwrap().project_2d(0.0, 0.4);

        // Coarsen the fine 2D grid with the any-occupied (then any-free) rule.
        for cx in 0..coarse_grid.nx {
            for cy in 0..coarse_grid.ny {
                let mut occ = false;
                let mut free = false;
                for dx in 0..2 {
                    for dy in 0..2 {
                        match fine_grid.get((cx * 2 + dx) as i64, (cy * 2 + dy) as i64) {
                            CellState::Occupied => occ = true,
                            CellState::Free => free = true,
                            CellState::Unknown => {}
                        }
                    }
                }
                let expect = if occ {
                    CellState::Occupied
                } else if free {
                    CellState::Free
                } else {
                    CellState::Unknown
                };
                assert_eq!(coarse_grid.get(cx as i64, cy as i64), expect, "cell {cx},{cy}");
            }
        }
    }

    #[test]
    fn serialize_roundtrip() {
        let mut map = small_map();
        let origin = Vec3::new(6.4, 6.4, 0.1);
        let mut endpoints = Vec::new();
        for k in 0..64 {
            let ang = k as f64 * std::f64::consts::TAU / 64.0;
            endpoints.push(Vec3::new(6.4 + 5.0 * ang.cos(), 6.4 + 5.0 * ang.sin(), 0.1));
        }
        map.integrate_scan(origin, &endpoints).unwrap();

        let bytes = map.serialize();
        let back = OctreeMap::deserialize(&bytes).unwrap();
        assert_eq!(back.node_count(), map.node_count());
        for k in 0..2000 {
            let p = Vec3::new(
                (k % 50) as f64 * 0.71 % 12.8,
                (k % 37) as f64 * 0.53 % 12.8,
                (k % 7) as f64 * 0.19,
            );
            assert_eq!(map.query_state(p), back.query_state(p));
        }

        // Empty map: header-only stream.
        let empty = small_map();
        let bytes = empty.serialize();
        assert_eq!(bytes.len(), 4 + 11 * 8);
        let back = OctreeMap::deserialize(&bytes).unwrap();
        assert_eq!(back.node_count(), 0);

        // Truncation anywhere fails cleanly.
        let full = map.serialize();
        let truncated = &full[..full.len() - 3];
        assert!(matches!(OctreeMap::deserialize(truncated), Err(MapError::Format(_))));
        assert!(matches!(OctreeMap::deserialize(&full[..10]), Err(MapError::Format(_))));
    }

    #[test]
    fn traversal_stays_on_segment() {
        let dims = [64, 64, 64];
        let voxels = ray_voxels(
            Vec3::new(0.1, 0.1, 0.1),
            Vec3::new(4.1, 3.3, 0.1),
            Vec3::ZERO,
            0.2,
            dims,
        );
        // Starts at the origin voxel, ends at the endpoint voxel.
        assert_eq!(voxels[0], [0, 0, 0]);
        assert_eq!(*voxels.last().unwrap(), [20, 16, 0]);
        // 4-neighbor continuity of the walk.
        for w in voxels.windows(2) {
            let d: i64 = (0..3).map(|a| (w[1][a] - w[0][a]).abs()).sum();
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn point_cloud_parsing() {
        let pts = parse_point_cloud("1 2 3\n# comment\n\n4.5 -1 0\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1], Vec3::new(4.5, -1.0, 0.0));
        assert!(parse_point_cloud("1 2").is_err());
        assert!(parse_point_cloud("a b c").is_err());
    }
}
