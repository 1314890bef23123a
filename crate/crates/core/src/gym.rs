//! The steering task as a reinforcement-learning environment.
//!
//! An episode drives the robot from a start state toward a goal pose. Each
//! step the agent sees 39 normalized lidar ranges plus ten goal/state/control
//! features, commands `(a, omega)`, and is scored by a seven-term reward.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::angle_diff;
use crate::vehicle::{clamp_control, step};
use crate::world::{is_free, lidar_scan, Keyframe, LidarConfig, Motion, ObstacleTrack, WorldMap};
use crate::{Control, Pose2, RobotState, Vec2, VehicleParams};

/// Number of non-lidar features.
pub const N_FEATURES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum GymError {
    #[error("episode already finished ({0:?})")]
    EpisodeFinished(DoneReason),
    #[error("task sampler gave up after {tries} attempts: {reason}")]
    SamplerExhausted { tries: usize, reason: String },
    #[error("no maps available for stage {0:?}")]
    EmptyPool(Stage),
    #[error("empty task list")]
    NoTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Empty,
    Static,
    Dynamic,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Empty, Stage::Static, Stage::Dynamic];

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Empty => Some(Stage::Static),
            Stage::Static => Some(Stage::Dynamic),
            Stage::Dynamic => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Empty => "empty",
            Stage::Static => "static",
            Stage::Dynamic => "dynamic",
        }
    }
}

/// Goal acceptance region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// Position error bound, meters.
    pub rho: f64,
    /// Heading error bound, radians.
    pub theta: f64,
}

impl Tolerance {
    /// Used while training the steering policy.
    pub const TRAINING: Tolerance = Tolerance {
        rho: 0.3,
        theta: PI / 18.0,
    };
    /// Used when scoring planners.
    pub const EVALUATION: Tolerance = Tolerance {
        rho: 0.5,
        theta: PI / 18.0,
    };
}

pub fn goal_reached(s: &RobotState, goal: &RobotState, tol: &Tolerance) -> bool {
    s.position().distance(goal.position()) <= tol.rho && angle_diff(goal.theta, s.theta).abs() <= tol.theta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub lidar: LidarConfig,
    /// Position normalizer, meters.
    pub d_norm: f64,
    /// Express the goal offset `(dx, dy)` in the robot's body frame.
    pub ego_frame: bool,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            lidar: LidarConfig::default(),
            d_norm: 40.0,
            ego_frame: true,
        }
    }
}

impl ObsConfig {
    pub fn dim(&self) -> usize {
        self.lidar.n_beams + N_FEATURES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Ranges divided by the lidar's maximum range.
    pub beams: Vec<f64>,
    /// `(dx, dy, dtheta, dv, dgamma, theta, v, gamma, a, omega)`, normalized.
    pub features: [f64; N_FEATURES],
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.beams.len() + N_FEATURES
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.beams);
        v.extend_from_slice(&self.features);
        v
    }

    /// Recovers the un-normalized goal-minus-state differences
    /// `(dx, dy, dtheta, dv, dgamma)` in the world frame.
    pub fn raw_deltas(&self, theta: f64, cfg: &ObsConfig, p: &VehicleParams) -> [f64; 5] {
        let f = &self.features;
        let mut d = Vec2::new(f[0] * cfg.d_norm, f[1] * cfg.d_norm);
        if cfg.ego_frame {
            d = d.rotate(theta);
        }
        [d.x, d.y, f[2] * PI, f[3] * p.v_max, f[4] * p.gamma_max]
    }
}

pub fn build_observation(
    s: &RobotState,
    goal: &RobotState,
    last_control: &Control,
    m: &WorldMap,
    cfg: &ObsConfig,
    p: &VehicleParams,
) -> Observation {
    let beams = lidar_scan(s, m, &cfg.lidar)
        .into_iter()
        .map(|r| r / cfg.lidar.max_range)
        .collect();
    Observation {
        beams,
        features: goal_features(s, goal, last_control, cfg, p),
    }
}

fn goal_features(
    s: &RobotState,
    goal: &RobotState,
    c: &Control,
    cfg: &ObsConfig,
    p: &VehicleParams,
) -> [f64; N_FEATURES] {
    let mut d = goal.position() - s.position();
    if cfg.ego_frame {
        d = d.rotate(-s.theta);
    }
    [
        d.x / cfg.d_norm,
        d.y / cfg.d_norm,
        angle_diff(goal.theta, s.theta) / PI,
        (goal.v - s.v) / p.v_max,
        (goal.gamma - s.gamma) / p.gamma_max,
        s.theta / PI,
        s.v / p.v_max,
        s.gamma / p.gamma_max,
        c.a / p.a_max,
        c.omega / p.omega_max,
    ]
}

/// Weights in component order `(goal, col, field, time, backward, vmax, gammamax)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_goal: f64,
    pub w_col: f64,
    pub w_field: f64,
    pub w_time: f64,
    pub w_backward: f64,
    pub w_vmax: f64,
    pub w_gammamax: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::from_array([20.0, 8.0, 1.0, 0.1, 0.3, 0.5, 0.5])
    }
}

impl RewardWeights {
    pub fn from_array(w: [f64; 7]) -> Self {
        Self {
            w_goal: w[0],
            w_col: w[1],
            w_field: w[2],
            w_time: w[3],
            w_backward: w[4],
            w_vmax: w[5],
            w_gammamax: w[6],
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.w_goal,
            self.w_col,
            self.w_field,
            self.w_time,
            self.w_backward,
            self.w_vmax,
            self.w_gammamax,
        ]
    }

    pub fn dot(&self, components: &[f64; 7]) -> f64 {
        self.as_array()
            .iter()
            .zip(components.iter())
            .fold(0.0, |acc, (w, c)| acc + w * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    /// `true`: the field term is `rho_curr - rho_last` (positive when moving
    /// away). `false` (default): `rho_last - rho_curr`, positive on progress.
    pub literal_field_sign: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub collided: bool,
    pub reached: bool,
}

/// Scalar reward and its seven components.
pub fn reward(
    prev: &RobotState,
    cur: &RobotState,
    goal: &RobotState,
    events: StepEvents,
    p: &VehicleParams,
    cfg: &RewardConfig,
) -> (f64, [f64; 7]) {
    let rho_last = prev.position().distance(goal.position());
    let rho_curr = cur.position().distance(goal.position());
    let field = if cfg.literal_field_sign {
        rho_curr - rho_last
    } else {
        rho_last - rho_curr
    };
    let flag = |b: bool| if b { -1.0 } else { 0.0 };
    let components = [
        if events.reached { 1.0 } else { 0.0 },
        flag(events.collided),
        field,
        -1.0,
        flag(cur.v < 0.0),
        flag(cur.v > p.v_max),
        flag(cur.gamma.abs() >= p.gamma_max - 1e-9),
    ];
    (cfg.weights.dot(&components), components)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Running,
    GoalReached,
    Collision,
    Timeout,
    Runaway,
}

impl DoneReason {
    pub fn is_done(self) -> bool {
        self != DoneReason::Running
    }

    /// Episode ended by the environment's own dynamics, not by the clock.
    pub fn is_terminal(self) -> bool {
        matches!(self, DoneReason::GoalReached | DoneReason::Collision | DoneReason::Runaway)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub reward_components: [f64; 7],
    pub done: DoneReason,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub start: RobotState,
    pub goal: RobotState,
    pub map: Arc<WorldMap>,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub obs: ObsConfig,
    pub reward: RewardConfig,
    pub tolerance: Tolerance,
    pub max_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            obs: ObsConfig::default(),
            reward: RewardConfig::default(),
            tolerance: Tolerance::TRAINING,
            max_steps: 600,
        }
    }
}

/// One episode of the steering task.
#[derive(Debug, Clone)]
pub struct Env {
    task: Task,
    cfg: EnvConfig,
    state: RobotState,
    last_control: Control,
    steps: usize,
    done: DoneReason,
}

impl Env {
    pub fn new(task: Task, cfg: EnvConfig) -> Self {
        let state = task.start.with_time(0.0);
        Self {
            task,
            cfg,
            state,
            last_control: Control::zero(),
            steps: 0,
            done: DoneReason::Running,
        }
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn done(&self) -> DoneReason {
        self.done
    }

    pub fn params(&self) -> &VehicleParams {
        self.task.map.vehicle()
    }

    pub fn observe(&self) -> Observation {
        build_observation(
            &self.state,
            &self.task.goal,
            &self.last_control,
            &self.task.map,
            &self.cfg.obs,
            self.params(),
        )
    }

    pub fn step(&mut self, action: Control) -> Result<StepResult, GymError> {
        if self.done.is_done() {
            return Err(GymError::EpisodeFinished(self.done));
        }
        let p = *self.params();
        let c = clamp_control(action, &p);
        let prev = self.state;
        let cur = step(&prev, c, p.dt, &p);
        let collided = !is_free(&cur, &self.task.map, &p);
        let reached = !collided && goal_reached(&cur, &self.task.goal, &self.cfg.tolerance);
        let (r, components) = reward(
            &prev,
            &cur,
            &self.task.goal,
            StepEvents { collided, reached },
            &p,
            &self.cfg.reward,
        );
        self.state = cur;
        self.last_control = c;
        self.steps += 1;
        self.done = if collided {
            DoneReason::Collision
        } else if reached {
            DoneReason::GoalReached
        } else if cur.v.abs() > 2.0 * p.v_max {
            DoneReason::Runaway
        } else if self.steps >= self.cfg.max_steps {
            DoneReason::Timeout
        } else {
            DoneReason::Running
        };
        Ok(StepResult {
            observation: self.observe(),
            reward: r,
            reward_components: components,
            done: self.done,
        })
    }
}

// ---------------------------------------------------------------------------
// Task generation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Start-to-goal distance interval, meters.
    pub distance: (f64, f64),
    /// Bound on the start/goal heading difference.
    pub max_heading_diff: f64,
    /// Bound on the angle between the start heading and the direction to the
    /// goal; `pi` leaves it unconstrained.
    pub max_bearing: f64,
    /// Side of the square map used by the empty stage.
    pub empty_map_size: f64,
    /// Adversary cruise-speed interval, m/s.
    pub adversary_speed: (f64, f64),
    /// Robot speed assumed when timing the adversary's crossing.
    pub cruise_speed: f64,
    pub max_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            distance: (15.0, 30.0),
            max_heading_diff: PI / 4.0,
            max_bearing: PI,
            empty_map_size: 40.0,
            adversary_speed: (1.0, 3.0),
            cruise_speed: 2.0,
            max_tries: 1000,
        }
    }
}

/// Draws training/validation tasks for one curriculum stage.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub stage: Stage,
    pub cfg: SamplerConfig,
    pool: Arc<Vec<Arc<WorldMap>>>,
    empty: Arc<WorldMap>,
}

impl TaskSampler {
    pub fn new(stage: Stage, pool: Vec<Arc<WorldMap>>, cfg: SamplerConfig) -> Result<Self, GymError> {
        if stage != Stage::Empty && pool.is_empty() {
            return Err(GymError::EmptyPool(stage));
        }
        let empty = Arc::new(WorldMap::empty(cfg.empty_map_size, cfg.empty_map_size, false));
        Ok(Self {
            stage,
            cfg,
            pool: Arc::new(pool),
            empty,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Task, GymError> {
        sample_task(self.stage, &self.pool, &self.empty, rng, &self.cfg)
    }
}

pub fn sample_task<R: Rng + ?Sized>(
    stage: Stage,
    pool: &[Arc<WorldMap>],
    empty: &Arc<WorldMap>,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<Task, GymError> {
    if stage != Stage::Empty && pool.is_empty() {
        return Err(GymError::EmptyPool(stage));
    }
    let mut last_reason = String::from("no attempt");
    for _ in 0..cfg.max_tries {
        let map = match stage {
            Stage::Empty => empty.clone(),
            _ => pool[rng.random_range(0..pool.len())].clone(),
        };
        let p = *map.vehicle();
        let Some((start, goal)) = sample_endpoints(&map, rng, cfg) else {
            last_reason = "endpoints outside the map".into();
            continue;
        };
        if !is_free(&start, &map, &p) || !is_free(&goal, &map, &p) {
            last_reason = "endpoint in collision".into();
            continue;
        }
        if stage != Stage::Dynamic {
            return Ok(Task { start, goal, map, stage });
        }
        let adversary = adversary_track(&start, &goal, &p, rng, cfg);
        let parked_at = match &adversary.motion {
            Motion::Scripted(kf) => kf.last().unwrap().t,
            _ => unreachable!(),
        };
        let mut dynamics = map.dynamics().to_vec();
        dynamics.push(adversary);
        let dyn_map = Arc::new((*map).clone().with_dynamics(dynamics));
        if !is_free(&start, &dyn_map, &p)
            || !is_free(&goal, &dyn_map, &p)
            || !is_free(&goal.with_time(parked_at), &dyn_map, &p)
        {
            last_reason = "adversary blocks an endpoint".into();
            continue;
        }
        return Ok(Task {
            start,
            goal,
            map: dyn_map,
            stage,
        });
    }
    Err(GymError::SamplerExhausted {
        tries: cfg.max_tries,
        reason: last_reason,
    })
}

fn sample_endpoints<R: Rng + ?Sized>(
    map: &WorldMap,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Option<(RobotState, RobotState)> {
    let sx = rng.random_range(0.0..map.width());
    let sy = rng.random_range(0.0..map.height());
    let theta = rng.random_range(-PI..PI);
    let dist = rng.random_range(cfg.distance.0..=cfg.distance.1);
    let bearing = rng.random_range(-cfg.max_bearing..=cfg.max_bearing);
    let dtheta = rng.random_range(-cfg.max_heading_diff..=cfg.max_heading_diff);
    let gp = Vec2::new(sx, sy) + Vec2::from_angle(theta + bearing) * dist;
    if !map.in_extent(gp) {
        return None;
    }
    Some((
        RobotState::at_rest(sx, sy, theta),
        RobotState::at_rest(gp.x, gp.y, theta + dtheta),
    ))
}

/// Obstacle scripted to cross the start-goal segment roughly when the robot
/// would get there at cruise speed.
fn adversary_track<R: Rng + ?Sized>(
    start: &RobotState,
    goal: &RobotState,
    p: &VehicleParams,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> ObstacleTrack {
    let u = rng.random_range(0.3..0.7);
    let seg = goal.position() - start.position();
    let q = start.position() + seg * u;
    let t_cross = (q - start.position()).norm() / cfg.cruise_speed;
    let speed = rng.random_range(cfg.adversary_speed.0..=cfg.adversary_speed.1);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let seg_angle = seg.y.atan2(seg.x);
    let heading = seg_angle + side * PI / 2.0 + rng.random_range(-PI / 6.0..PI / 6.0);
    let dir = Vec2::from_angle(heading);
    let t_after = 20.0;
    let p0 = q - dir * (speed * t_cross);
    let p1 = q + dir * (speed * t_after);
    let kf = |t: f64, at: Vec2| Keyframe {
        t,
        pose: Pose2::new(at.x, at.y, heading),
    };
    let mut frames = vec![kf(0.0, p0)];
    if t_cross > 0.0 {
        frames.push(kf(t_cross, q));
    }
    frames.push(kf(t_cross + t_after, p1));
    ObstacleTrack::new(p.half_length, p.half_width, Motion::Scripted(frames)).expect("valid adversary")
}

/// Time at which a dynamic-stage adversary reaches the start-goal segment.
pub fn crossing_time(task: &Task) -> Option<f64> {
    task.map.dynamics().last().and_then(|d| match &d.motion {
        Motion::Scripted(kf) if kf.len() == 3 => Some(kf[1].t),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::obb_overlap;
    use crate::Obb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn observation_at_goal() {
        let m = WorldMap::empty(40.0, 40.0, false);
        let s = RobotState::at_rest(20.0, 20.0, 0.7);
        let o = build_observation(&s, &s, &Control::zero(), &m, &ObsConfig::default(), &p());
        assert_eq!(o.dim(), 49);
        assert!(o.beams.iter().all(|&b| b == 1.0));
        assert_eq!(o.features, [0.0, 0.0, 0.0, 0.0, 0.0, 0.7 / PI, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn observation_goal_ahead() {
        let m = WorldMap::empty(40.0, 40.0, false);
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let g = RobotState::at_rest(20.0, 20.0, 0.0);
        let o = build_observation(&s, &g, &Control::zero(), &m, &ObsConfig::default(), &p());
        assert_eq!(o.features[0], 10.0 / 40.0);
        assert_eq!(o.features[1], 0.0);
    }

    #[test]
    fn observation_deltas_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = WorldMap::empty(40.0, 40.0, false);
        for ego in [true, false] {
            let cfg = ObsConfig {
                ego_frame: ego,
                ..ObsConfig::default()
            };
            for _ in 0..200 {
                let s = RobotState::new(
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    rng.random_range(-PI..PI),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-0.5..0.5),
                    0.0,
                );
                let g = RobotState::new(
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    rng.random_range(-PI..PI),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-0.5..0.5),
                    0.0,
                );
                let o = build_observation(&s, &g, &Control::new(1.0, 0.1), &m, &cfg, &p());
                let d = o.raw_deltas(s.theta, &cfg, &p());
                assert!((d[0] - (g.x - s.x)).abs() < 1e-9);
                assert!((d[1] - (g.y - s.y)).abs() < 1e-9);
                assert!((d[2] - angle_diff(g.theta, s.theta)).abs() < 1e-9);
                assert!((d[3] - (g.v - s.v)).abs() < 1e-9);
                assert!((d[4] - (g.gamma - s.gamma)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let goal = RobotState::at_rest(0.3, 0.0, 0.0);
        let prev = RobotState::new(0.0, 0.0, 0.0, 2.0, 0.0, 0.0);
        let cur = RobotState::new(0.3, 0.0, 0.0, 2.0, 0.0, 0.1);
        let (r, c) = reward(&prev, &cur, &goal, StepEvents { collided: false, reached: true }, &p(), &cfg);
        assert_eq!(c, [1.0, 0.0, 0.3, -1.0, 0.0, 0.0, 0.0]);
        assert!((r - 20.2).abs() < 1e-12);

        let prev = RobotState::at_rest(-0.7, 0.0, 0.0);
        let cur = RobotState::at_rest(-1.2, 0.0, 0.0);
        let (r, c) = reward(&prev, &cur, &goal, StepEvents { collided: true, reached: false }, &p(), &cfg);
        assert_eq!(c, [0.0, -1.0, -0.5, -1.0, 0.0, 0.0, 0.0]);
        assert!((r - -8.6).abs() < 1e-12);

        let s = RobotState::at_rest(3.0, 4.0, 0.0);
        let (r, c) = reward(&s, &s, &goal, StepEvents::default(), &p(), &cfg);
        assert_eq!(c, [0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r, -0.1);
    }

    #[test]
    fn reward_penalty_flags() {
        let cfg = RewardConfig::default();
        let goal = RobotState::at_rest(10.0, 0.0, 0.0);
        let s = RobotState::new(0.0, 0.0, 0.0, -1.0, PI / 6.0, 0.0);
        let (_, c) = reward(&s, &s, &goal, StepEvents::default(), &p(), &cfg);
        assert_eq!(&c[4..], &[-1.0, 0.0, -1.0]);
        let s = RobotState::new(0.0, 0.0, 0.0, 4.5, 0.0, 0.0);
        let (_, c) = reward(&s, &s, &goal, StepEvents::default(), &p(), &cfg);
        assert_eq!(&c[4..], &[0.0, -1.0, 0.0]);
        let literal = RewardConfig {
            literal_field_sign: true,
            ..cfg
        };
        let a = RobotState::at_rest(0.0, 0.0, 0.0);
        let b = RobotState::at_rest(1.0, 0.0, 0.0);
        assert_eq!(reward(&a, &b, &goal, StepEvents::default(), &p(), &literal).1[2], -1.0);
    }

    #[test]
    fn goal_tolerance() {
        let g = RobotState::at_rest(0.0, 0.0, 0.0);
        let tol = Tolerance::TRAINING;
        assert!(goal_reached(&g, &g, &tol));
        assert!(goal_reached(&RobotState::at_rest(0.29, 0.0, 0.0), &g, &tol));
        assert!(!goal_reached(&RobotState::at_rest(0.0, 0.0, PI / 17.0), &g, &tol));
    }

    fn empty_task(start: RobotState, goal: RobotState, walls: bool) -> Task {
        Task {
            start,
            goal,
            map: Arc::new(WorldMap::empty(40.0, 40.0, walls)),
            stage: Stage::Empty,
        }
    }

    #[test]
    fn env_collides_with_wall() {
        let t = empty_task(RobotState::new(33.0, 20.0, 0.0, 4.0, 0.0, 0.0), RobotState::at_rest(5.0, 5.0, 0.0), true);
        let mut env = Env::new(t, EnvConfig::default());
        let mut last = None;
        for _ in 0..100 {
            let r = env.step(Control::new(5.0, 0.0)).unwrap();
            if r.done.is_done() {
                last = Some(r);
                break;
            }
        }
        let r = last.unwrap();
        assert_eq!(r.done, DoneReason::Collision);
        assert_eq!(r.reward_components[1], -1.0);
        assert!(matches!(env.step(Control::zero()), Err(GymError::EpisodeFinished(DoneReason::Collision))));
    }

    #[test]
    fn env_goal_on_next_step() {
        let s = RobotState::at_rest(20.0, 20.0, 0.0);
        let mut env = Env::new(empty_task(s, s, true), EnvConfig::default());
        assert_eq!(env.step(Control::zero()).unwrap().done, DoneReason::GoalReached);
    }

    #[test]
    fn env_matches_manual_composition() {
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let g = RobotState::at_rest(30.0, 20.0, 0.0);
        let cfg = EnvConfig::default();
        let mut env = Env::new(empty_task(s, g, true), cfg);
        let mut total = 0.0;
        let mut manual = 0.0;
        let mut st = s;
        let params = p();
        for k in 0..10 {
            let c = Control::new(if k < 5 { 2.0 } else { 0.0 }, 0.0);
            let r = env.step(c).unwrap();
            assert_eq!(r.reward, cfg.reward.weights.dot(&r.reward_components));
            total += r.reward;
            let next = step(&st, c, 0.1, &params);
            manual += reward(&st, &next, &g, StepEvents::default(), &params, &cfg.reward).0;
            st = next;
        }
        assert!((total - manual).abs() < 1e-9);
    }

    #[test]
    fn env_times_out() {
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let g = RobotState::at_rest(30.0, 20.0, 0.0);
        let cfg = EnvConfig {
            max_steps: 25,
            ..EnvConfig::default()
        };
        let mut env = Env::new(empty_task(s, g, true), cfg);
        let mut n = 0;
        let mut field_sum = 0.0;
        loop {
            let r = env.step(Control::new(0.3, 0.05)).unwrap();
            field_sum += r.reward_components[2];
            n += 1;
            if r.done.is_done() {
                assert_eq!(r.done, DoneReason::Timeout);
                break;
            }
        }
        assert_eq!(n, 25);
        let expect = s.position().distance(g.position()) - env.state().position().distance(g.position());
        assert!((field_sum - expect).abs() < 1e-6);
    }

    fn static_pool() -> Vec<Arc<WorldMap>> {
        let statics = vec![
            ObstacleTrack::fixed(Pose2::new(10.0, 10.0, 0.3), 3.0, 1.5),
            ObstacleTrack::fixed(Pose2::new(30.0, 28.0, -0.4), 2.0, 4.0),
        ];
        vec![Arc::new(WorldMap::new(40.0, 40.0, true, p(), statics, vec![]).unwrap())]
    }

    fn check_constraints(t: &Task, cfg: &SamplerConfig) {
        let d = t.start.position().distance(t.goal.position());
        assert!(d >= cfg.distance.0 - 1e-9 && d <= cfg.distance.1 + 1e-9);
        assert!(angle_diff(t.goal.theta, t.start.theta).abs() <= cfg.max_heading_diff + 1e-9);
        assert!(is_free(&t.start, &t.map, &p()));
        assert!(is_free(&t.goal, &t.map, &p()));
        assert_eq!((t.start.v, t.start.gamma, t.start.t), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_stage_tasks() {
        let s = TaskSampler::new(Stage::Empty, vec![], SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = s.sample(&mut rng).unwrap();
            assert!(t.map.statics().is_empty() && t.map.dynamics().is_empty());
            check_constraints(&t, &s.cfg);
        }
    }

    #[test]
    fn static_stage_tasks_satisfy_constraints() {
        let s = TaskSampler::new(Stage::Static, static_pool(), SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            check_constraints(&s.sample(&mut rng).unwrap(), &s.cfg);
        }
    }

    #[test]
    fn dynamic_stage_adversary_crosses_segment() {
        let s = TaskSampler::new(Stage::Dynamic, static_pool(), SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = s.sample(&mut rng).unwrap();
            check_constraints(&t, &s.cfg);
            let adv = t.map.dynamics().last().unwrap();
            let tc = crossing_time(&t).unwrap();
            let body = adv.obb_at(tc);
            let seg = t.goal.position() - t.start.position();
            // crossing point lies on the segment, inside the adversary
            let probe = Obb::new(body.center, seg.y.atan2(seg.x), 1e-3, 1e-3);
            assert!(obb_overlap(&body, &probe));
            let along = (body.center - t.start.position()).dot(seg) / seg.dot(seg);
            assert!((0.3..=0.7).contains(&along));
            assert!((body.center - t.start.position()).cross(seg).abs() / seg.norm() < 1e-9);
        }
    }

    #[test]
    fn sampler_errors() {
        assert_eq!(
            TaskSampler::new(Stage::Static, vec![], SamplerConfig::default()).unwrap_err(),
            GymError::EmptyPool(Stage::Static)
        );
        let cfg = SamplerConfig {
            distance: (100.0, 120.0),
            max_tries: 50,
            ..SamplerConfig::default()
        };
        let s = TaskSampler::new(Stage::Empty, vec![], cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(s.sample(&mut rng), Err(GymError::SamplerExhausted { tries: 50, .. })));
    }
}
