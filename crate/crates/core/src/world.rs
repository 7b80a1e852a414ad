//! Synthetic cooperative scenes, the canonical BEV renderer and the channel
//! distortions that stand in for a heterogeneous collaborator encoder.
//!
//! Every agent renders into the ego frame on the same grid. Occluder disks
//! decide which boxes each agent sees; the neighbor's encoder differs from
//! the ego's only through [`apply_distortion`].

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bev::FeatureField;
use crate::error::{Error, Result};
use crate::grad::{gemm, Tensor};

/// Number of semantic channels at the front of every rendered field:
/// occupancy, dx, dy, log w, log l, sin yaw, cos yaw.
pub const GEOMETRY_CHANNELS: usize = 7;
/// Largest accepted condition number for a mixing matrix.
pub const MAX_MIX_COND: f64 = 50.0;

const VIS_SAMPLES: usize = 9;

/// Mixes a base seed with a stream tag and an index into a new seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut t = a % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Oriented BEV rectangle. `l` runs along the heading `yaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0) || ![x, y, w, l, yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!("invalid box w={w} l={l} at ({x}, {y})")));
        }
        Ok(OrientedBox { x, y, w, l, yaw: wrap_angle(yaw) })
    }

    /// Point at local coordinates `(u along l, v along w)`.
    pub fn local_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + u * c - v * s, self.y + u * s + v * c)
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [
            self.local_to_world(hl, hw),
            self.local_to_world(-hl, hw),
            self.local_to_world(-hl, -hw),
            self.local_to_world(hl, -hw),
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    fn half_diag(&self) -> f64 {
        0.5 * (self.w * self.w + self.l * self.l).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Opaque disk that blocks sight lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Who can see a box, as targeted during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxCategory {
    Both,
    NeighborOnly,
    EgoPartial,
    EgoOnly,
}

impl BoxCategory {
    /// Target visible-sample counts (ego, first neighbor) out of 9.
    fn target(self) -> (usize, usize) {
        match self {
            BoxCategory::Both => (9, 9),
            BoxCategory::NeighborOnly => (0, 9),
            BoxCategory::EgoPartial => (4, 9),
            BoxCategory::EgoOnly => (9, 0),
        }
    }
}

/// Scene-generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldProfile {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Probability that a box is hidden from the ego but seen by the neighbor.
    pub ego_blind: f64,
    /// Probability that the ego sees a box only partially (4 of 9 samples).
    pub ego_partial: f64,
    /// Probability that only the ego sees a box.
    pub ego_only: f64,
    pub neighbors: usize,
    /// Neighbor distance range from the ego, meters.
    pub neighbor_range: [f64; 2],
    /// Boxes are placed with centers inside `[-extent, extent]^2`.
    pub extent: f64,
    pub min_separation: f64,
    /// Extra occluders that may not change any box's visibility target.
    pub extra_occluders: usize,
}

impl Default for WorldProfile {
    fn default() -> Self {
        WorldProfile {
            min_boxes: 2,
            max_boxes: 12,
            ego_blind: 0.2,
            ego_partial: 0.15,
            ego_only: 0.1,
            neighbors: 1,
            neighbor_range: [12.0, 20.0],
            extent: 20.0,
            min_separation: 7.0,
            extra_occluders: 2,
        }
    }
}

impl WorldProfile {
    pub fn validate(&self) -> Result<()> {
        let p = [self.ego_blind, self.ego_partial, self.ego_only];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || p.iter().sum::<f64>() > 1.0 {
            return Err(Error::config("world category probabilities must lie in [0,1] and sum to at most 1"));
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::config("world min_boxes exceeds max_boxes"));
        }
        if !(self.extent > 0.0) || !(self.neighbor_range[0] <= self.neighbor_range[1]) {
            return Err(Error::config("world extent / neighbor_range invalid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rng_seed: u64,
    pub boxes: Vec<OrientedBox>,
    pub categories: Vec<BoxCategory>,
    pub ego_pose: Pose,
    pub neighbor_poses: Vec<Pose>,
    pub occluders: Vec<Occluder>,
    /// `visibility[agent][box]` in `[0, 1]`; agent 0 is the ego.
    pub visibility: Vec<Vec<f64>>,
}

impl Scene {
    pub fn agents(&self) -> usize {
        1 + self.neighbor_poses.len()
    }

    pub fn pose(&self, agent: usize) -> Pose {
        if agent == 0 {
            self.ego_pose
        } else {
            self.neighbor_poses[agent - 1]
        }
    }

    /// A scene with the given boxes, no occluders, visible to every agent.
    pub fn open(rng_seed: u64, boxes: Vec<OrientedBox>, neighbor_poses: Vec<Pose>) -> Self {
        let n = boxes.len();
        let agents = 1 + neighbor_poses.len();
        Scene {
            rng_seed,
            categories: vec![BoxCategory::Both; n],
            boxes,
            ego_pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
            neighbor_poses,
            occluders: Vec::new(),
            visibility: vec![vec![1.0; n]; agents],
        }
    }

    /// Recomputes `visibility` from poses and occluders.
    pub fn recompute_visibility(&mut self) {
        self.visibility = (0..self.agents())
            .map(|a| {
                let p = self.pose(a);
                self.boxes
                    .iter()
                    .map(|b| visible_count(p, b, &self.occluders) as f64 / VIS_SAMPLES as f64)
                    .collect()
            })
            .collect();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn seg_point_dist(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn sample_points(b: &OrientedBox) -> impl Iterator<Item = (f64, f64)> + '_ {
    const F: [f64; 3] = [-0.35, 0.0, 0.35];
    F.iter().flat_map(move |&u| F.iter().map(move |&v| b.local_to_world(u * b.l, v * b.w)))
}

/// Number of the box's 9 sample points with an unobstructed ray from `pose`.
pub fn visible_count(pose: Pose, b: &OrientedBox, occluders: &[Occluder]) -> usize {
    let o = (pose.x, pose.y);
    sample_points(b)
        .filter(|&p| occluders.iter().all(|d| seg_point_dist(o, p, (d.x, d.y)) >= d.r))
        .count()
}

struct Builder<'a> {
    profile: &'a WorldProfile,
    agents: Vec<Pose>,
    boxes: Vec<OrientedBox>,
    cats: Vec<BoxCategory>,
    occ: Vec<Occluder>,
}

impl Builder<'_> {
    fn targets_hold(&self, boxes: &[OrientedBox], cats: &[BoxCategory], occ: &[Occluder]) -> bool {
        boxes.iter().zip(cats).all(|(b, &c)| {
            let (te, tn) = c.target();
            let ego_ok = visible_count(self.agents[0], b, occ) == te;
            let n_ok = self.agents.len() < 2 || visible_count(self.agents[1], b, occ) == tn;
            ego_ok && n_ok
        })
    }

    fn disk_is_clear(&self, d: &Occluder, extra: Option<&OrientedBox>) -> bool {
        let agents_ok = self.agents.iter().all(|a| ((a.x - d.x).powi(2) + (a.y - d.y).powi(2)).sqrt() > d.r + 1.0);
        let boxes_ok = self
            .boxes
            .iter()
            .chain(extra)
            .all(|b| ((b.x - d.x).powi(2) + (b.y - d.y).powi(2)).sqrt() > d.r + b.half_diag() + 0.3);
        agents_ok && boxes_ok
    }

    fn box_is_clear(&self, b: &OrientedBox) -> bool {
        let sep = self.profile.min_separation;
        self.boxes.iter().all(|o| ((o.x - b.x).powi(2) + (o.y - b.y).powi(2)).sqrt() >= sep)
            && self.agents.iter().all(|a| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() >= 4.0)
            && self
                .occ
                .iter()
                .all(|d| ((d.x - b.x).powi(2) + (d.y - b.y).powi(2)).sqrt() > d.r + b.half_diag() + 0.3)
    }

    fn blocking_disk(&self, rng: &mut ChaCha8Rng, agent: Pose, b: &OrientedBox) -> Occluder {
        let t: f64 = rng.random_range(0.45..0.75);
        let c = (agent.x + t * (b.x - agent.x), agent.y + t * (b.y - agent.y));
        let r = sample_points(b).map(|p| seg_point_dist((agent.x, agent.y), p, c)).fold(0.0, f64::max) + 0.25;
        Occluder { x: c.0, y: c.1, r }
    }

    fn partial_disk(&self, rng: &mut ChaCha8Rng, agent: Pose, b: &OrientedBox) -> Occluder {
        let t: f64 = rng.random_range(0.5..0.85);
        let (dx, dy) = (b.x - agent.x, b.y - agent.y);
        let n = (dx * dx + dy * dy).sqrt().max(1e-9);
        let s: f64 = rng.random_range(-2.0..2.0);
        Occluder {
            x: agent.x + t * dx - s * dy / n,
            y: agent.y + t * dy + s * dx / n,
            r: rng.random_range(0.2..1.5),
        }
    }

    /// Tries to add one box of category `cat`, with its own occluder if the
    /// category needs one.
    fn try_add(&mut self, rng: &mut ChaCha8Rng, cat: BoxCategory) -> bool {
        let e = self.profile.extent;
        for _ in 0..200 {
            let b = OrientedBox {
                x: rng.random_range(-e..e),
                y: rng.random_range(-e..e),
                w: rng.random_range(1.6..2.2),
                l: rng.random_range(3.8..5.0),
                yaw: wrap_angle(rng.random_range(-PI..PI)),
            };
            if !self.box_is_clear(&b) {
                continue;
            }
            let mut boxes = self.boxes.clone();
            boxes.push(b);
            let mut cats = self.cats.clone();
            cats.push(cat);
            let need = match cat {
                BoxCategory::Both => None,
                BoxCategory::NeighborOnly | BoxCategory::EgoPartial => Some(self.agents[0]),
                BoxCategory::EgoOnly => Some(self.agents[1]),
            };
            let Some(agent) = need else {
                if self.targets_hold(&boxes, &cats, &self.occ) {
                    self.boxes = boxes;
                    self.cats = cats;
                    return true;
                }
                continue;
            };
            for _ in 0..100 {
                let d = if cat == BoxCategory::EgoPartial {
                    self.partial_disk(rng, agent, &b)
                } else {
                    self.blocking_disk(rng, agent, &b)
                };
                if !self.disk_is_clear(&d, Some(&b)) {
                    continue;
                }
                let mut occ = self.occ.clone();
                occ.push(d);
                if self.targets_hold(&boxes, &cats, &occ) {
                    self.boxes = boxes;
                    self.cats = cats;
                    self.occ = occ;
                    return true;
                }
            }
        }
        false
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, profile: &WorldProfile) -> Result<Scene> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = Pose { x: 0.0, y: 0.0, yaw: 0.0 };
    let mut agents = vec![ego];
    let base: f64 = rng.random_range(-PI..PI);
    for k in 0..profile.neighbors {
        let ang = base + 2.0 * PI * k as f64 / profile.neighbors.max(1) as f64 + rng.random_range(-0.4..0.4);
        let d: f64 = rng.random_range(profile.neighbor_range[0]..=profile.neighbor_range[1]);
        agents.push(Pose { x: d * ang.cos(), y: d * ang.sin(), yaw: wrap_angle(rng.random_range(-PI..PI)) });
    }
    let mut bld = Builder { profile, agents, boxes: Vec::new(), cats: Vec::new(), occ: Vec::new() };
    let n = rng.random_range(profile.min_boxes..=profile.max_boxes);
    for _ in 0..n {
        let cat = if profile.neighbors == 0 {
            BoxCategory::Both
        } else {
            let u: f64 = rng.random();
            let (a, b, c) = (profile.ego_blind, profile.ego_partial, profile.ego_only);
            if u < a {
                BoxCategory::NeighborOnly
            } else if u < a + b {
                BoxCategory::EgoPartial
            } else if u < a + b + c {
                BoxCategory::EgoOnly
            } else {
                BoxCategory::Both
            }
        };
        bld.try_add(&mut rng, cat);
    }
    for _ in 0..profile.extra_occluders {
        for _ in 0..20 {
            let d = Occluder {
                x: rng.random_range(-profile.extent..profile.extent),
                y: rng.random_range(-profile.extent..profile.extent),
                r: rng.random_range(0.5..2.0),
            };
            if !bld.disk_is_clear(&d, None) {
                continue;
            }
            let mut occ = bld.occ.clone();
            occ.push(d);
            if bld.targets_hold(&bld.boxes, &bld.cats, &occ) {
                bld.occ = occ;
                break;
            }
        }
    }
    let mut scene = Scene {
        rng_seed: seed,
        boxes: bld.boxes,
        categories: bld.cats,
        ego_pose: ego,
        neighbor_poses: bld.agents[1..].to_vec(),
        occluders: bld.occ,
        visibility: Vec::new(),
    };
    scene.recompute_visibility();
    Ok(scene)
}

/// BEV grid and rendering constants. Cells are square, the grid is centered
/// on the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cell: f64,
    /// Std of the occupancy bump, meters.
    pub occupancy_sigma: f64,
    /// Peak value of each clutter channel.
    pub clutter_amplitude: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { channels: 64, height: 48, width: 48, cell: 1.0, occupancy_sigma: 1.2, clutter_amplitude: 0.2 }
    }
}

/// Geometry window: full weight inside this radius (meters)...
pub const WINDOW_INNER: f64 = 1.75;
/// ...fading to zero at this one.
pub const WINDOW_OUTER: f64 = 2.75;

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.channels < GEOMETRY_CHANNELS {
            return Err(Error::config(format!("grid needs at least {GEOMETRY_CHANNELS} channels")));
        }
        if self.height == 0 || self.width == 0 || !(self.cell > 0.0) {
            return Err(Error::config("grid dimensions must be positive"));
        }
        Ok(())
    }

    pub fn anchors(&self) -> usize {
        self.height * self.width
    }

    pub fn half_extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell / 2.0, self.height as f64 * self.cell / 2.0)
    }

    /// World position of anchor (cell) `a`, row-major.
    pub fn anchor_center(&self, a: usize) -> (f64, f64) {
        let (i, j) = (a / self.width, a % self.width);
        let (hx, hy) = self.half_extent();
        ((j as f64 + 0.5) * self.cell - hx, (i as f64 + 0.5) * self.cell - hy)
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let (hx, hy) = self.half_extent();
        let j = ((x + hx) / self.cell).floor();
        let i = ((y + hy) / self.cell).floor();
        if i < 0.0 || j < 0.0 || i >= self.height as f64 || j >= self.width as f64 {
            return None;
        }
        Some(i as usize * self.width + j as usize)
    }
}

fn window(d: f64) -> f64 {
    if d <= WINDOW_INNER {
        1.0
    } else if d >= WINDOW_OUTER {
        0.0
    } else {
        let t = (d - WINDOW_INNER) / (WINDOW_OUTER - WINDOW_INNER);
        0.5 * (1.0 + (PI * t).cos())
    }
}

/// Canonical (ego-domain) rendering of what `agent` sees, in the ego frame.
pub fn render_canonical(scene: &Scene, agent: usize, grid: &Grid) -> Result<FeatureField> {
    grid.validate()?;
    if agent >= scene.agents() {
        return Err(Error::config(format!("scene has no agent {agent}")));
    }
    let (hx, hy) = grid.half_extent();
    if let Some(b) = scene.boxes.iter().find(|b| b.x.abs() >= hx || b.y.abs() >= hy) {
        return Err(Error::config(format!(
            "box at ({:.2}, {:.2}) lies outside the {}x{} grid",
            b.x, b.y, grid.width, grid.height
        )));
    }
    let (c, h, w) = (grid.channels, grid.height, grid.width);
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    let two_s2 = 2.0 * grid.occupancy_sigma * grid.occupancy_sigma;
    let reach = (3.0 * grid.occupancy_sigma).max(WINDOW_OUTER);
    // nearest visible box per cell owns the geometry channels
    let mut owner_d = vec![f64::INFINITY; hw];
    for (bi, b) in scene.boxes.iter().enumerate() {
        let vis = scene.visibility[agent][bi];
        if vis <= 0.0 {
            continue;
        }
        let (lw, ll) = (b.w.ln(), b.l.ln());
        let (sy, cy) = b.yaw.sin_cos();
        let j0 = (((b.x - reach + hx) / grid.cell).floor().max(0.0)) as usize;
        let j1 = ((((b.x + reach + hx) / grid.cell).ceil()) as usize).min(w);
        let i0 = (((b.y - reach + hy) / grid.cell).floor().max(0.0)) as usize;
        let i1 = ((((b.y + reach + hy) / grid.cell).ceil()) as usize).min(h);
        for i in i0..i1 {
            for j in j0..j1 {
                let a = i * w + j;
                let (ax, ay) = grid.anchor_center(a);
                let (dx, dy) = (b.x - ax, b.y - ay);
                let d2 = dx * dx + dy * dy;
                let occ = vis * (-d2 / two_s2).exp();
                if occ > data[a] {
                    data[a] = occ;
                }
                let d = d2.sqrt();
                let m = window(d);
                if m > 0.0 && d < owner_d[a] {
                    owner_d[a] = d;
                    let vals = [
                        m * (0.5 + dx / 6.0),
                        m * (0.5 + dy / 6.0),
                        m * lw,
                        m * ll,
                        m * 0.5 * (1.0 + sy),
                        m * 0.5 * (1.0 + cy),
                    ];
                    for (k, v) in vals.iter().enumerate() {
                        data[(k + 1) * hw + a] = *v;
                    }
                }
            }
        }
    }
    // clutter is scene structure, identical for every agent
    for ch in GEOMETRY_CHANNELS..c {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.rng_seed, 0xC1, ch as u64));
        let k: f64 = rng.random_range(0.15..0.6);
        let dir: f64 = rng.random_range(-PI..PI);
        let phase: f64 = rng.random_range(-PI..PI);
        let (kx, ky) = (k * dir.cos(), k * dir.sin());
        for a in 0..hw {
            let (x, y) = grid.anchor_center(a);
            data[ch * hw + a] = grid.clutter_amplitude * 0.5 * (1.0 + (kx * x + ky * y + phase).cos());
        }
    }
    FeatureField::new(agent, Tensor::new(vec![c, h, w], data)?)
}

/// A concrete channel-space transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionSpec {
    None,
    ChannelAffine { gain: Vec<f64>, offset: Vec<f64> },
    /// Row-major `C x C`; every cell's channel vector becomes `M * f`.
    ChannelMix { matrix: Vec<Vec<f64>> },
    NoiseChannels { channels: Vec<usize>, amplitude: f64, seed: u64 },
    /// Applied in order.
    Composite { stages: Vec<DistortionSpec> },
}

/// Condition number (2-norm) of a square matrix; infinite when singular.
pub fn condition_number(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let dm = DMatrix::from_fn(n, n, |i, j| m[i][j]);
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

impl DistortionSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        match self {
            DistortionSpec::None => Ok(()),
            DistortionSpec::ChannelAffine { gain, offset } => {
                if gain.len() != channels || offset.len() != channels {
                    return Err(Error::config(format!("channel_affine needs {channels} gains and offsets")));
                }
                if gain.iter().chain(offset).any(|v| !v.is_finite()) || gain.iter().any(|&g| g == 0.0) {
                    return Err(Error::config("channel_affine gains must be finite and nonzero"));
                }
                Ok(())
            }
            DistortionSpec::ChannelMix { matrix } => {
                if matrix.len() != channels || matrix.iter().any(|r| r.len() != channels) {
                    return Err(Error::config(format!("channel_mix matrix must be {channels}x{channels}")));
                }
                let cond = condition_number(matrix);
                if !(cond <= MAX_MIX_COND) {
                    return Err(Error::config(format!(
                        "channel_mix matrix condition number {cond:.3e} exceeds {MAX_MIX_COND}"
                    )));
                }
                Ok(())
            }
            DistortionSpec::NoiseChannels { channels: chs, amplitude, .. } => {
                if chs.iter().any(|&c| c >= channels) || !(*amplitude >= 0.0) {
                    return Err(Error::config("noise_channels: channel out of range or negative amplitude"));
                }
                Ok(())
            }
            DistortionSpec::Composite { stages } => stages.iter().try_for_each(|s| s.validate(channels)),
        }
    }
}

/// Applies `spec` to a field. `salt` varies the noise draw per sample; the
/// other kinds ignore it.
pub fn apply_distortion(f: &FeatureField, spec: &DistortionSpec, salt: u64) -> Result<FeatureField> {
    let (c, h, w) = f.dims();
    spec.validate(c)?;
    let hw = h * w;
    let mut out = f.values.clone();
    apply_in_place(&mut out, c, hw, spec, salt);
    FeatureField::new(f.agent_id, out)
}

fn apply_in_place(t: &mut Tensor, c: usize, hw: usize, spec: &DistortionSpec, salt: u64) {
    match spec {
        DistortionSpec::None => {}
        DistortionSpec::ChannelAffine { gain, offset } => {
            for ch in 0..c {
                for x in &mut t.data_mut()[ch * hw..(ch + 1) * hw] {
                    *x = gain[ch] * *x + offset[ch];
                }
            }
        }
        DistortionSpec::ChannelMix { matrix } => {
            let m: Vec<f64> = matrix.iter().flatten().copied().collect();
            let mut out = vec![0.0; c * hw];
            gemm(c, c, hw, &m, false, t.data(), false, 0.0, &mut out);
            t.data_mut().copy_from_slice(&out);
        }
        DistortionSpec::NoiseChannels { channels, amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*seed, 0x401, salt));
            for &ch in channels {
                for x in &mut t.data_mut()[ch * hw..(ch + 1) * hw] {
                    *x += amplitude * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        DistortionSpec::Composite { stages } => {
            for s in stages {
                apply_in_place(t, c, hw, s, salt);
            }
        }
    }
}

/// Seeded generators for [`DistortionSpec`], the form scenario files use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionRecipe {
    None,
    /// Gains drawn from `gain`, offsets from `offset` (uniform ranges).
    Affine { gain: [f64; 2], offset: [f64; 2], seed: u64 },
    /// Gains `exp(spread * z_c)` with standard-normal `z_c`.
    LogGain { spread: f64, seed: u64 },
    /// `I + L` with `fan_in` nonnegative leaks per row drawn from `[0, leak)`.
    Mix { leak: f64, fan_in: usize, seed: u64 },
    /// Haar-random orthogonal matrix.
    Orthogonal { seed: u64 },
    /// Gaussian noise on the listed channels (all channels when empty).
    Noise {
        amplitude: f64,
        seed: u64,
        #[serde(default)]
        channels: Vec<usize>,
    },
    Composite { stages: Vec<DistortionRecipe> },
    /// A fully specified transform.
    Explicit { spec: DistortionSpec },
}

impl DistortionRecipe {
    pub fn resolve(&self, c: usize) -> Result<DistortionSpec> {
        let spec = match self {
            DistortionRecipe::None => DistortionSpec::None,
            DistortionRecipe::Affine { gain, offset, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut draw = |r: [f64; 2]| -> f64 {
                    if r[1] > r[0] {
                        rng.random_range(r[0]..r[1])
                    } else {
                        r[0]
                    }
                };
                let g: Vec<f64> = (0..c).map(|_| draw(*gain)).collect();
                let o: Vec<f64> = (0..c).map(|_| draw(*offset)).collect();
                DistortionSpec::ChannelAffine { gain: g, offset: o }
            }
            DistortionRecipe::LogGain { spread, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let gain = (0..c).map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
                DistortionSpec::ChannelAffine { gain, offset: vec![0.0; c] }
            }
            DistortionRecipe::Mix { leak, fan_in, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut m = vec![vec![0.0; c]; c];
                for (i, row) in m.iter_mut().enumerate() {
                    row[i] = 1.0;
                    for _ in 0..*fan_in {
                        let j = rng.random_range(0..c);
                        if j != i {
                            row[j] += rng.random_range(0.0..leak.max(f64::MIN_POSITIVE));
                        }
                    }
                }
                DistortionSpec::ChannelMix { matrix: m }
            }
            DistortionRecipe::Orthogonal { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let g = DMatrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
                let qr = g.qr();
                let (q, r) = (qr.q(), qr.r());
                // sign fix so the draw is Haar-distributed
                let m = (0..c)
                    .map(|i| (0..c).map(|j| q[(i, j)] * r[(j, j)].signum()).collect())
                    .collect();
                DistortionSpec::ChannelMix { matrix: m }
            }
            DistortionRecipe::Noise { amplitude, seed, channels } => DistortionSpec::NoiseChannels {
                channels: if channels.is_empty() { (0..c).collect() } else { channels.clone() },
                amplitude: *amplitude,
                seed: *seed,
            },
            DistortionRecipe::Composite { stages } => DistortionSpec::Composite {
                stages: stages.iter().map(|s| s.resolve(c)).collect::<Result<_>>()?,
            },
            DistortionRecipe::Explicit { spec } => spec.clone(),
        };
        spec.validate(c)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests;
