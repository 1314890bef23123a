//! Obstacles over time, free-space queries and the lidar model.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, obb_overlap, ray_obb_hit};
use crate::vehicle::{footprint, step};
use crate::{Control, Obb, Pose2, RobotState, Vec2, VehicleParams};

pub const MAP_FORMAT_VERSION: u32 = 1;

/// Thickness of the boundary wall rectangles.
pub const WALL_THICKNESS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported map format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid map: {0}")]
    Invalid(String),
}

impl From<serde_json::Error> for WorldError {
    fn from(e: serde_json::Error) -> Self {
        WorldError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub t: f64,
    pub pose: Pose2,
}

/// Open-loop control schedule integrated with the kinematic model.
///
/// `controls` holds `(t_from, control)` pairs; each control applies from its
/// start time until the next one begins. Speed saturates at the script's
/// `[v_min, v_max]`, and after `horizon` seconds the obstacle parks.
#[derive(Debug, Clone)]
pub struct ControlScript {
    initial: RobotState,
    controls: Vec<(f64, Control)>,
    params: VehicleParams,
    horizon: f64,
    states: OnceLock<Vec<RobotState>>,
}

impl PartialEq for ControlScript {
    fn eq(&self, o: &Self) -> bool {
        self.initial == o.initial
            && self.controls == o.controls
            && self.params == o.params
            && self.horizon == o.horizon
    }
}

impl ControlScript {
    pub fn new(
        initial: RobotState,
        controls: Vec<(f64, Control)>,
        params: VehicleParams,
        horizon: f64,
    ) -> Result<Self, WorldError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(WorldError::Invalid(format!("control script horizon {horizon} must be positive")));
        }
        if !(params.dt > 0.0) {
            return Err(WorldError::Invalid("control script dt must be positive".into()));
        }
        for w in controls.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(WorldError::Invalid(format!(
                    "control script times must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self {
            initial: initial.with_time(0.0),
            controls,
            params,
            horizon,
            states: OnceLock::new(),
        })
    }

    pub fn initial(&self) -> &RobotState {
        &self.initial
    }

    pub fn controls(&self) -> &[(f64, Control)] {
        &self.controls
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn control_at(&self, t: f64) -> Control {
        let idx = self.controls.partition_point(|(t0, _)| *t0 <= t + 1e-9);
        if idx == 0 {
            Control::zero()
        } else {
            self.controls[idx - 1].1
        }
    }

    fn advance(&self, s: &RobotState, dt: f64) -> RobotState {
        let c = self.control_at(s.t);
        let mut n = step(s, c, dt, &self.params);
        n.v = n.v.clamp(self.params.v_min, self.params.v_max);
        n
    }

    fn states(&self) -> &[RobotState] {
        self.states.get_or_init(|| {
            let dt = self.params.dt;
            let n = (self.horizon / dt).ceil() as usize;
            let mut out = Vec::with_capacity(n + 1);
            let mut s = self.initial;
            out.push(s);
            for k in 0..n {
                s = self.advance(&s, dt).with_time((k + 1) as f64 * dt);
                out.push(s);
            }
            out
        })
    }

    pub fn state_at(&self, t: f64) -> RobotState {
        let states = self.states();
        let dt = self.params.dt;
        let t = t.max(0.0);
        let last = states.len() - 1;
        let k = (t / dt).floor() as usize;
        if k >= last {
            return states[last].with_time(t);
        }
        let base = &states[k];
        let rem = t - base.t;
        if rem <= 1e-12 {
            return *base;
        }
        self.advance(base, rem)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Static(Pose2),
    Scripted(Vec<Keyframe>),
    ControlScript(ControlScript),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleTrack {
    pub half_length: f64,
    pub half_width: f64,
    pub motion: Motion,
}

impl ObstacleTrack {
    pub fn new(half_length: f64, half_width: f64, motion: Motion) -> Result<Self, WorldError> {
        if !(half_length > 0.0 && half_width > 0.0) || !half_length.is_finite() || !half_width.is_finite() {
            return Err(WorldError::Invalid(format!(
                "obstacle half-extents must be positive (got {half_length}, {half_width})"
            )));
        }
        if let Motion::Scripted(kf) = &motion {
            if kf.is_empty() {
                return Err(WorldError::Invalid("scripted obstacle needs at least one keyframe".into()));
            }
            for (i, w) in kf.windows(2).enumerate() {
                if !(w[1].t > w[0].t) {
                    return Err(WorldError::Invalid(format!(
                        "keyframe {}: time {} not greater than previous {}",
                        i + 1,
                        w[1].t,
                        w[0].t
                    )));
                }
            }
        }
        Ok(Self {
            half_length,
            half_width,
            motion,
        })
    }

    pub fn fixed(pose: Pose2, half_length: f64, half_width: f64) -> Self {
        Self::new(half_length, half_width, Motion::Static(pose)).expect("valid static obstacle")
    }

    pub fn is_static(&self) -> bool {
        matches!(self.motion, Motion::Static(_))
    }

    pub fn pose_at(&self, t: f64) -> Pose2 {
        match &self.motion {
            Motion::Static(p) => *p,
            Motion::Scripted(kf) => interpolate_keyframes(kf, t),
            Motion::ControlScript(cs) => cs.state_at(t).pose(),
        }
    }

    pub fn obb_at(&self, t: f64) -> Obb {
        Obb::from_pose(&self.pose_at(t), self.half_length, self.half_width)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }
}

fn interpolate_keyframes(kf: &[Keyframe], t: f64) -> Pose2 {
    let first = &kf[0];
    if t <= first.t {
        return first.pose;
    }
    let idx = kf.partition_point(|k| k.t <= t);
    if idx >= kf.len() {
        return kf[kf.len() - 1].pose;
    }
    let (a, b) = (&kf[idx - 1], &kf[idx]);
    let alpha = (t - a.t) / (b.t - a.t);
    let dtheta = angle_diff(b.pose.theta(), a.pose.theta());
    Pose2::new(
        a.pose.x + alpha * (b.pose.x - a.pose.x),
        a.pose.y + alpha * (b.pose.y - a.pose.y),
        a.pose.theta() + alpha * dtheta,
    )
}

/// Obstacle rectangle at time `t`.
pub fn obstacle_at(track: &ObstacleTrack, t: f64) -> Obb {
    track.obb_at(t)
}

/// The planning world. Coordinates span `[0, width] x [0, height]`.
#[derive(Debug, Clone)]
pub struct WorldMap {
    width: f64,
    height: f64,
    boundary_walls: bool,
    margin: f64,
    vehicle: VehicleParams,
    statics: Vec<ObstacleTrack>,
    dynamics: Vec<ObstacleTrack>,
    /// Static rectangles plus boundary walls.
    static_boxes: Vec<Obb>,
}

impl PartialEq for WorldMap {
    fn eq(&self, o: &Self) -> bool {
        self.width == o.width
            && self.height == o.height
            && self.boundary_walls == o.boundary_walls
            && self.margin == o.margin
            && self.vehicle == o.vehicle
            && self.statics == o.statics
            && self.dynamics == o.dynamics
    }
}

impl WorldMap {
    pub fn new(
        width: f64,
        height: f64,
        boundary_walls: bool,
        vehicle: VehicleParams,
        statics: Vec<ObstacleTrack>,
        dynamics: Vec<ObstacleTrack>,
    ) -> Result<Self, WorldError> {
        if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
            return Err(WorldError::Invalid(format!("extent must be positive (got {width} x {height})")));
        }
        let extent = Obb::new(Vec2::new(width / 2.0, height / 2.0), 0.0, width / 2.0, height / 2.0);
        let mut static_boxes = Vec::with_capacity(statics.len() + 4);
        for (i, s) in statics.iter().enumerate() {
            if !s.is_static() {
                return Err(WorldError::Invalid(format!("statics[{i}] is not a static obstacle")));
            }
            let b = s.obb_at(0.0);
            if !obb_overlap(&b, &extent) {
                return Err(WorldError::Invalid(format!("statics[{i}] lies outside the map extent")));
            }
            static_boxes.push(b);
        }
        if boundary_walls {
            static_boxes.extend(wall_boxes(width, height));
        }
        Ok(Self {
            width,
            height,
            boundary_walls,
            margin: 0.0,
            vehicle,
            statics,
            dynamics,
            static_boxes,
        })
    }

    /// Obstacle-free map.
    pub fn empty(width: f64, height: f64, boundary_walls: bool) -> Self {
        Self::new(width, height, boundary_walls, VehicleParams::default(), vec![], vec![])
            .expect("positive extent")
    }

    /// Sets the safety margin by which the robot footprint is inflated
    /// during collision checks.
    pub fn with_margin(mut self, margin: f64) -> Self {
        assert!(margin >= 0.0 && margin.is_finite());
        self.margin = margin;
        self
    }

    pub fn with_dynamics(mut self, dynamics: Vec<ObstacleTrack>) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn boundary_walls(&self) -> bool {
        self.boundary_walls
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn vehicle(&self) -> &VehicleParams {
        &self.vehicle
    }

    pub fn statics(&self) -> &[ObstacleTrack] {
        &self.statics
    }

    pub fn dynamics(&self) -> &[ObstacleTrack] {
        &self.dynamics
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Static rectangles including the boundary walls.
    pub fn static_boxes(&self) -> &[Obb] {
        &self.static_boxes
    }

    /// All rectangles present at time `t`.
    pub fn boxes_at(&self, t: f64) -> impl Iterator<Item = Obb> + '_ {
        self.static_boxes
            .iter()
            .copied()
            .chain(self.dynamics.iter().map(move |d| d.obb_at(t)))
    }

    /// The same world with every dynamic obstacle frozen at its pose at `t0`.
    pub fn frozen_at(&self, t0: f64) -> WorldMap {
        let dynamics = self
            .dynamics
            .iter()
            .map(|d| ObstacleTrack::fixed(d.pose_at(t0), d.half_length, d.half_width))
            .collect();
        WorldMap {
            dynamics,
            ..self.clone()
        }
    }

    /// Whether the footprint at `s` is clear of the static scene.
    pub fn is_free_static(&self, s: &RobotState, p: &VehicleParams) -> bool {
        let fp = self.robot_box(s, p);
        !self.static_boxes.iter().any(|b| obb_overlap(&fp, b))
    }

    fn robot_box(&self, s: &RobotState, p: &VehicleParams) -> Obb {
        let fp = footprint(s, p);
        if self.margin > 0.0 {
            fp.inflated(self.margin)
        } else {
            fp
        }
    }

    /// Whether the point lies inside the map extent.
    pub fn in_extent(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }
}

fn wall_boxes(w: f64, h: f64) -> [Obb; 4] {
    let t = WALL_THICKNESS / 2.0;
    [
        Obb::new(Vec2::new(-t, h / 2.0), 0.0, t, h / 2.0 + 2.0 * t),
        Obb::new(Vec2::new(w + t, h / 2.0), 0.0, t, h / 2.0 + 2.0 * t),
        Obb::new(Vec2::new(w / 2.0, -t), 0.0, w / 2.0 + 2.0 * t, t),
        Obb::new(Vec2::new(w / 2.0, h + t), 0.0, w / 2.0 + 2.0 * t, t),
    ]
}

/// Whether the robot at `s` is collision-free at time `s.t`.
pub fn is_free(s: &RobotState, m: &WorldMap, p: &VehicleParams) -> bool {
    if !m.is_free_static(s, p) {
        return false;
    }
    let fp = m.robot_box(s, p);
    !m.dynamics.iter().any(|d| obb_overlap(&fp, &d.obb_at(s.t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub n_beams: usize,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            n_beams: 39,
            max_range: 20.0,
        }
    }
}

/// Direction of beam `k`, counter-clockwise from the heading.
pub fn beam_angle(theta: f64, k: usize, n_beams: usize) -> f64 {
    theta + std::f64::consts::TAU * k as f64 / n_beams as f64
}

/// Range readings from the rear-axle reference point, obstacles at `s.t`.
pub fn lidar_scan(s: &RobotState, m: &WorldMap, cfg: &LidarConfig) -> Vec<f64> {
    assert!(cfg.n_beams >= 1 && cfg.max_range > 0.0);
    let origin = s.position();
    let near: Vec<Obb> = m
        .boxes_at(s.t)
        .filter(|b| b.center.distance(origin) - b.bounding_radius() <= cfg.max_range)
        .collect();
    (0..cfg.n_beams)
        .map(|k| {
            let dir = Vec2::from_angle(beam_angle(s.theta, k, cfg.n_beams));
            near.iter()
                .filter_map(|b| ray_obb_hit(origin, dir, b))
                .fold(cfg.max_range, f64::min)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
struct VersionProbe {
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    version: u32,
    extent: [f64; 2],
    boundary_walls: bool,
    #[serde(default, skip_serializing_if = "is_zero")]
    margin: f64,
    vehicle: VehicleParams,
    statics: Vec<StaticEntry>,
    dynamics: Vec<DynamicEntry>,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StaticEntry {
    x: f64,
    y: f64,
    theta: f64,
    half_length: f64,
    half_width: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicEntry {
    half_length: f64,
    half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyframes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control_script: Option<ControlScriptEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlScriptEntry {
    /// `[x, y, theta, v, gamma]`
    initial_state: [f64; 5],
    /// `[[t_from, a, omega], ...]`
    controls: Vec<[f64; 3]>,
    horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vehicle: Option<VehicleParams>,
}

fn track_to_entry(d: &ObstacleTrack, map_vehicle: &VehicleParams) -> DynamicEntry {
    let (keyframes, control_script) = match &d.motion {
        Motion::Static(p) => (Some(vec![[0.0, p.x, p.y, p.theta()]]), None),
        Motion::Scripted(kf) => (
            Some(kf.iter().map(|k| [k.t, k.pose.x, k.pose.y, k.pose.theta()]).collect()),
            None,
        ),
        Motion::ControlScript(cs) => {
            let s = cs.initial();
            (
                None,
                Some(ControlScriptEntry {
                    initial_state: [s.x, s.y, s.theta, s.v, s.gamma],
                    controls: cs.controls().iter().map(|(t, c)| [*t, c.a, c.omega]).collect(),
                    horizon: cs.horizon(),
                    vehicle: (cs.params() != map_vehicle).then(|| *cs.params()),
                }),
            )
        }
    };
    DynamicEntry {
        half_length: d.half_length,
        half_width: d.half_width,
        keyframes,
        control_script,
    }
}

fn entry_to_track(i: usize, e: DynamicEntry, map_vehicle: &VehicleParams) -> Result<ObstacleTrack, WorldError> {
    let ctx = |msg: String| WorldError::Invalid(format!("dynamics[{i}]: {msg}"));
    let motion = match (e.keyframes, e.control_script) {
        (Some(kf), None) => Motion::Scripted(
            kf.into_iter()
                .map(|[t, x, y, th]| Keyframe {
                    t,
                    pose: Pose2::new(x, y, th),
                })
                .collect(),
        ),
        (None, Some(cs)) => {
            let [x, y, th, v, g] = cs.initial_state;
            let script = ControlScript::new(
                RobotState::new(x, y, th, v, g, 0.0),
                cs.controls.into_iter().map(|[t, a, w]| (t, Control::new(a, w))).collect(),
                cs.vehicle.unwrap_or(*map_vehicle),
                cs.horizon,
            )
            .map_err(|e| ctx(e.to_string()))?;
            Motion::ControlScript(script)
        }
        (Some(_), Some(_)) => return Err(ctx("both keyframes and control_script given".into())),
        (None, None) => return Err(ctx("needs keyframes or control_script".into())),
    };
    ObstacleTrack::new(e.half_length, e.half_width, motion).map_err(|e| ctx(e.to_string()))
}

impl WorldMap {
    pub fn to_json(&self) -> String {
        let file = MapFile {
            version: MAP_FORMAT_VERSION,
            extent: [self.width, self.height],
            boundary_walls: self.boundary_walls,
            margin: self.margin,
            vehicle: self.vehicle,
            statics: self
                .statics
                .iter()
                .map(|s| {
                    let p = s.pose_at(0.0);
                    StaticEntry {
                        x: p.x,
                        y: p.y,
                        theta: p.theta(),
                        half_length: s.half_length,
                        half_width: s.half_width,
                    }
                })
                .collect(),
            dynamics: self.dynamics.iter().map(|d| track_to_entry(d, &self.vehicle)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != MAP_FORMAT_VERSION {
            return Err(WorldError::Version {
                found: probe.version,
                expected: MAP_FORMAT_VERSION,
            });
        }
        let f: MapFile = serde_json::from_str(text)?;
        let statics = f
            .statics
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ObstacleTrack::new(s.half_length, s.half_width, Motion::Static(Pose2::new(s.x, s.y, s.theta)))
                    .map_err(|e| WorldError::Invalid(format!("statics[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dynamics = f
            .dynamics
            .into_iter()
            .enumerate()
            .map(|(i, e)| entry_to_track(i, e, &f.vehicle))
            .collect::<Result<Vec<_>, _>>()?;
        if !(f.margin >= 0.0) {
            return Err(WorldError::Invalid(format!("margin {} must be non-negative", f.margin)));
        }
        Ok(WorldMap::new(f.extent[0], f.extent[1], f.boundary_walls, f.vehicle, statics, dynamics)?
            .with_margin(f.margin))
    }
}

pub fn save_map(m: &WorldMap, path: impl AsRef<Path>) -> Result<(), WorldError> {
    let path = path.as_ref();
    fs::write(path, m.to_json()).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_map(path: impl AsRef<Path>) -> Result<WorldMap, WorldError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    WorldMap::from_json(&text)
}
