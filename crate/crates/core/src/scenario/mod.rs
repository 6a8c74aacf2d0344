//! Procedural road scenarios standing in for recorded drives.
//!
//! Every scenario is a single road centreline through the ego position:
//! a straight lead-in, an optional constant-radius arc, and a straight
//! run-out. Stations along it are placed at exact chord spacing, so the
//! noise-free history, route, and future polylines have consecutive
//! waypoint distances equal to `spacing`.

mod io;

pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DatasetError, DATASET_MAGIC, DATASET_VERSION};

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{LidarPoint, PointCloud, Polyline};
use crate::rng;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("dataset request has zero samples")]
    EmptyRequest,
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    CurveLeft,
    CurveRight,
    TJunctionLeft,
    TJunctionRight,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::CurveLeft,
        ScenarioKind::CurveRight,
        ScenarioKind::TJunctionLeft,
        ScenarioKind::TJunctionRight,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::CurveLeft => "curve_left",
            ScenarioKind::CurveRight => "curve_right",
            ScenarioKind::TJunctionLeft => "t_junction_left",
            ScenarioKind::TJunctionRight => "t_junction_right",
        }
    }

    fn is_junction(self) -> bool {
        matches!(self, ScenarioKind::TJunctionLeft | ScenarioKind::TJunctionRight)
    }

    /// +1 for a left turn, -1 for a right turn, 0 for none.
    fn side(self) -> f64 {
        match self {
            ScenarioKind::Straight => 0.0,
            ScenarioKind::CurveLeft | ScenarioKind::TJunctionLeft => 1.0,
            ScenarioKind::CurveRight | ScenarioKind::TJunctionRight => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub history_len: usize,
    /// Route keyframes behind the ego; the last one is the ego position.
    pub route_past: usize,
    pub route_future: usize,
    pub future_len: usize,
    /// Keyframe spacing, meters.
    pub spacing: f64,
    /// Lateral noise on ground-truth future waypoints, meters.
    pub jitter_sigma: f64,
    pub road_halfwidth: f64,
    /// Curb points per meter of curb.
    pub curb_density: f64,
    pub clutter_points: usize,
    pub point_noise: f64,
    pub ground_z: f64,
    pub curb_z: f64,
    pub curve_radius: [f64; 2],
    pub curve_start: [f64; 2],
    pub junction_distance: [f64; 2],
    pub turn_radius: [f64; 2],
    /// Clutter is drawn uniformly over `[x0, x1] x [y0, y1]`.
    pub clutter_extent: [f64; 4],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            history_len: 5,
            route_past: 5,
            route_future: 15,
            future_len: 15,
            spacing: 2.0,
            jitter_sigma: 0.2,
            road_halfwidth: 3.5,
            curb_density: 4.0,
            clutter_points: 200,
            point_noise: 0.05,
            ground_z: -1.73,
            curb_z: -1.4,
            curve_radius: [15.0, 60.0],
            curve_start: [-10.0, 10.0],
            junction_distance: [10.0, 20.0],
            turn_radius: [5.0, 8.0],
            clutter_extent: [-16.0, 48.0, -32.0, 32.0],
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if self.history_len < 2 || self.route_past < 1 || self.route_past + self.route_future < 2 {
            return bad("history and route need at least two keyframes");
        }
        if self.future_len == 0 {
            return bad("future_len must be positive");
        }
        if !(self.spacing > 0.0) || !(self.road_halfwidth > 0.0) || self.jitter_sigma < 0.0 || self.point_noise < 0.0 {
            return bad("spacing and halfwidth must be positive, noise non-negative");
        }
        for (name, [lo, hi]) in [
            ("curve_radius", self.curve_radius),
            ("curve_start", self.curve_start),
            ("junction_distance", self.junction_distance),
            ("turn_radius", self.turn_radius),
        ] {
            if !(lo <= hi) {
                return bad(&format!("{name} range is empty"));
            }
        }
        if self.curve_radius[0] < self.spacing || self.turn_radius[0] < self.spacing {
            return bad("radii must exceed the keyframe spacing");
        }
        if self.junction_distance[0] <= self.turn_radius[1] {
            return bad("junction must start ahead of the ego");
        }
        Ok(())
    }

    pub fn route_len(&self) -> usize {
        self.route_past + self.route_future
    }
}

/// Centreline in a road-local frame: along +x up to `arc_start`, then an arc
/// of `radius` sweeping `sweep` radians toward `side`, then straight again.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub arc_start: f64,
    pub radius: f64,
    pub sweep: f64,
    pub side: f64,
}

impl RoadGeometry {
    pub fn straight() -> Self {
        Self {
            arc_start: 0.0,
            radius: 1.0,
            sweep: 0.0,
            side: 0.0,
        }
    }

    pub fn sample<R: Rng>(kind: ScenarioKind, cfg: &ScenarioConfig, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
        match kind {
            ScenarioKind::Straight => Self::straight(),
            ScenarioKind::CurveLeft | ScenarioKind::CurveRight => {
                let radius = uniform(rng, cfg.curve_radius);
                let arc_start = uniform(rng, cfg.curve_start);
                Self {
                    arc_start,
                    radius,
                    sweep: FRAC_PI_2,
                    side: kind.side(),
                }
            }
            ScenarioKind::TJunctionLeft | ScenarioKind::TJunctionRight => {
                let junction = uniform(rng, cfg.junction_distance);
                let radius = uniform(rng, cfg.turn_radius);
                Self {
                    arc_start: junction - radius,
                    radius,
                    sweep: FRAC_PI_2,
                    side: kind.side(),
                }
            }
        }
    }

    /// Position and heading at arc length `s` in the road-local frame.
    fn local(&self, s: f64) -> ((f64, f64), f64) {
        if s <= self.arc_start || self.sweep == 0.0 {
            return ((s, 0.0), 0.0);
        }
        let arc_len = self.radius * self.sweep;
        let theta = (s - self.arc_start).min(arc_len) / self.radius;
        let p = (
            self.arc_start + self.radius * theta.sin(),
            self.side * self.radius * (1.0 - theta.cos()),
        );
        let heading = self.side * theta;
        let rest = s - self.arc_start - arc_len;
        if rest <= 0.0 {
            (p, heading)
        } else {
            ((p.0 + rest * heading.cos(), p.1 + rest * heading.sin()), heading)
        }
    }

    /// Position and heading in the ego frame, where the ego sits at `s = 0`
    /// facing +x.
    pub fn pose(&self, s: f64) -> ((f64, f64), f64) {
        let (p0, h0) = self.local(0.0);
        let (p, h) = self.local(s);
        ((to_ego(p, p0, h0)), h - h0)
    }

    pub fn point(&self, s: f64) -> (f64, f64) {
        self.pose(s).0
    }

    fn ego_transform(&self) -> ((f64, f64), f64) {
        self.local(0.0)
    }

    /// Next arc length whose position is exactly `chord` away from `s`,
    /// searching forward (`dir = 1`) or backward (`dir = -1`).
    fn chord_step(&self, s: f64, chord: f64, dir: f64) -> f64 {
        let base = self.point(s);
        let gap = |t: f64| crate::bev::point_segment_distance(self.point(t), base, base);
        let mut lo = s + dir * chord;
        if gap(lo) >= chord {
            return lo;
        }
        let mut hi = s + dir * chord * 1.5;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) < chord {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() < 1e-13 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Arc lengths of `count` keyframes starting at `s = 0` (inclusive) in
    /// direction `dir`.
    pub fn stations(&self, count: usize, chord: f64, dir: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        let mut s = 0.0;
        for _ in 0..count {
            out.push(s);
            s = self.chord_step(s, chord, dir);
        }
        out
    }

    /// Distance from an ego-frame point to the ideal centreline, by dense
    /// sampling over `[s_lo, s_hi]`.
    pub fn distance_to_centerline(&self, p: (f64, f64), s_lo: f64, s_hi: f64) -> f64 {
        let steps = ((s_hi - s_lo) / 0.01).ceil() as usize;
        (0..steps)
            .map(|i| {
                let a = self.point(s_lo + (s_hi - s_lo) * i as f64 / steps as f64);
                let b = self.point(s_lo + (s_hi - s_lo) * (i + 1) as f64 / steps as f64);
                crate::bev::point_segment_distance(p, a, b)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn to_ego(p: (f64, f64), origin: (f64, f64), heading: f64) -> (f64, f64) {
    let (dx, dy) = (p.0 - origin.0, p.1 - origin.1);
    let (s, c) = heading.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSample {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub geometry: RoadGeometry,
    pub cloud: PointCloud,
    pub history: Polyline,
    pub route: Polyline,
    pub future: Trajectory,
}

/// Generates one scenario; a pure function of `(kind, seed, cfg)`.
pub fn generate_scenario(kind: ScenarioKind, seed: u64, cfg: &ScenarioConfig) -> Result<ScenarioSample, ScenarioError> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[0x5CE7A710]);
    let geometry = RoadGeometry::sample(kind, cfg, &mut rng);
    Ok(build_scenario(kind, seed, geometry, cfg, &mut rng))
}

/// Generates a scenario on explicitly supplied road geometry.
pub fn build_scenario<R: Rng>(
    kind: ScenarioKind,
    seed: u64,
    geometry: RoadGeometry,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> ScenarioSample {
    let back = geometry.stations(cfg.history_len.max(cfg.route_past), cfg.spacing, -1.0);
    let ahead = geometry.stations(cfg.route_future.max(cfg.future_len) + 1, cfg.spacing, 1.0);

    let history = back[..cfg.history_len].iter().rev().map(|&s| geometry.point(s)).collect();
    let route = back[..cfg.route_past]
        .iter()
        .rev()
        .chain(&ahead[1..=cfg.route_future])
        .map(|&s| geometry.point(s))
        .collect();

    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("finite sigma");
    let future = ahead[1..=cfg.future_len]
        .iter()
        .map(|&s| {
            let ((x, y), h) = geometry.pose(s);
            if cfg.jitter_sigma == 0.0 {
                return (x, y);
            }
            let d = jitter.sample(rng);
            (x - h.sin() * d, y + h.cos() * d)
        })
        .collect();

    let cloud = generate_cloud(kind, &geometry, cfg, rng);

    ScenarioSample {
        kind,
        seed,
        geometry,
        cloud,
        history: Polyline::new(history).expect("stations are distinct"),
        route: Polyline::new(route).expect("stations are distinct"),
        future: Trajectory::new(future).expect("finite stations"),
    }
}

fn generate_cloud<R: Rng>(kind: ScenarioKind, g: &RoadGeometry, cfg: &ScenarioConfig, rng: &mut R) -> PointCloud {
    let noise = Normal::new(0.0, cfg.point_noise.max(0.0)).expect("finite sigma");
    let jit = |rng: &mut R| if cfg.point_noise == 0.0 { 0.0 } else { noise.sample(rng) };
    let step = 1.0 / cfg.curb_density;
    let h = cfg.road_halfwidth;
    let mut curbs: Vec<(f64, f64)> = Vec::new();
    let line = |a: (f64, f64), b: (f64, f64), out: &mut Vec<(f64, f64)>| {
        let len = crate::bev::point_segment_distance(a, b, b);
        let n = (len / step).floor() as usize;
        for i in 0..=n {
            let t = if n == 0 { 0.0 } else { i as f64 / n as f64 };
            out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    };
    if kind.is_junction() {
        // T-junction in the road-local frame: the ego road ends at a crossing
        // road whose centreline runs along x = junction.
        let junction = g.arc_start + g.radius;
        let far = 60.0;
        line((-far, h), (junction - h, h), &mut curbs);
        line((-far, -h), (junction - h, -h), &mut curbs);
        line((junction - h, h), (junction - h, far), &mut curbs);
        line((junction - h, -h), (junction - h, -far), &mut curbs);
        line((junction + h, -far), (junction + h, far), &mut curbs);
        let (p0, h0) = g.ego_transform();
        curbs = curbs.into_iter().map(|p| to_ego(p, p0, h0)).collect();
    } else {
        let (s_lo, s_hi) = (-60.0, 90.0);
        let n = ((s_hi - s_lo) / step) as usize;
        for i in 0..=n {
            let s = s_lo + i as f64 * step;
            let ((x, y), hd) = g.pose(s);
            let (nx, ny) = (-hd.sin(), hd.cos());
            curbs.push((x + nx * h, y + ny * h));
            curbs.push((x - nx * h, y - ny * h));
        }
    }
    let [x0, x1, y0, y1] = cfg.clutter_extent;
    let keep = |p: &(f64, f64)| p.0 >= x0 - 5.0 && p.0 <= x1 + 5.0 && p.1 >= y0 - 5.0 && p.1 <= y1 + 5.0;
    let mut points: Vec<LidarPoint> = curbs
        .into_iter()
        .filter(keep)
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(x, y)| LidarPoint {
            x: x + jit(rng),
            y: y + jit(rng),
            z: cfg.curb_z + jit(rng),
            intensity: rng.random_range(0.4..0.8),
        })
        .collect();
    for _ in 0..cfg.clutter_points {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        points.push(LidarPoint {
            x,
            y,
            z: cfg.ground_z + jit(rng),
            intensity: rng.random_range(0.0..0.3),
        });
    }
    PointCloud { points }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Requested sample count per scenario kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindCounts {
    #[serde(default)]
    pub straight: usize,
    #[serde(default)]
    pub curve_left: usize,
    #[serde(default)]
    pub curve_right: usize,
    #[serde(default)]
    pub t_junction_left: usize,
    #[serde(default)]
    pub t_junction_right: usize,
}

impl KindCounts {
    /// `total` spread evenly over the kinds; the remainder goes to the first ones.
    pub fn uniform(total: usize) -> Self {
        let base = total / 5;
        let rem = total % 5;
        let n = |i: usize| base + usize::from(i < rem);
        Self {
            straight: n(0),
            curve_left: n(1),
            curve_right: n(2),
            t_junction_left: n(3),
            t_junction_right: n(4),
        }
    }

    pub fn only(kind: ScenarioKind, count: usize) -> Self {
        let mut c = Self::default();
        *c.get_mut(kind) = count;
        c
    }

    pub fn get(&self, kind: ScenarioKind) -> usize {
        match kind {
            ScenarioKind::Straight => self.straight,
            ScenarioKind::CurveLeft => self.curve_left,
            ScenarioKind::CurveRight => self.curve_right,
            ScenarioKind::TJunctionLeft => self.t_junction_left,
            ScenarioKind::TJunctionRight => self.t_junction_right,
        }
    }

    fn get_mut(&mut self, kind: ScenarioKind) -> &mut usize {
        match kind {
            ScenarioKind::Straight => &mut self.straight,
            ScenarioKind::CurveLeft => &mut self.curve_left,
            ScenarioKind::CurveRight => &mut self.curve_right,
            ScenarioKind::TJunctionLeft => &mut self.t_junction_left,
            ScenarioKind::TJunctionRight => &mut self.t_junction_right,
        }
    }

    pub fn total(&self) -> usize {
        ScenarioKind::ALL.iter().map(|&k| self.get(k)).sum()
    }

    /// Kinds interleaved round-robin so every prefix is roughly balanced.
    pub fn schedule(&self) -> Vec<ScenarioKind> {
        let mut left: Vec<usize> = ScenarioKind::ALL.iter().map(|&k| self.get(k)).collect();
        let mut out = Vec::with_capacity(self.total());
        while out.len() < self.total() {
            for (i, &k) in ScenarioKind::ALL.iter().enumerate() {
                if left[i] > 0 {
                    left[i] -= 1;
                    out.push(k);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub config: ScenarioConfig,
    pub samples: Vec<ScenarioSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn of_kind(&self, kind: ScenarioKind) -> Vec<&ScenarioSample> {
        self.samples.iter().filter(|s| s.kind == kind).collect()
    }
}

/// Seed of sample `index` in `split`; train and test never share a seed
/// for the same dataset seed because the split code enters the mix.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    rng::derive_seed(dataset_seed, &[split.code(), index as u64])
}

pub fn make_dataset(
    counts: &KindCounts,
    split: Split,
    cfg: &ScenarioConfig,
    dataset_seed: u64,
) -> Result<Dataset, ScenarioError> {
    if counts.total() == 0 {
        return Err(ScenarioError::EmptyRequest);
    }
    cfg.validate()?;
    use rayon::prelude::*;
    let samples = counts
        .schedule()
        .into_par_iter()
        .enumerate()
        .map(|(i, kind)| generate_scenario(kind, sample_seed(dataset_seed, split, i), cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        split,
        config: cfg.clone(),
        samples,
    })
}
