//! Time-aware global planners: an RRT that grows a tree of timed states and
//! a weighted A* over motion-primitive targets. Both connect states only
//! through a [`Steering`] implementation, so every edge is a dynamically
//! feasible, time-stamped trajectory.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, wrap_angle};
use crate::gym::{goal_reached, Tolerance};
use crate::steer::{motion_is_free, state_distance, SteerResult, Steering, Trajectory};
use crate::vehicle::step;
use crate::world::{is_free, WorldMap};
use crate::{Control, Pose2, RobotState, Vec2, VehicleParams};

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("start state is in collision at t = 0")]
    StartInCollision,
    #[error("plan file: {0}")]
    Format(String),
}

impl From<serde_json::Error> for PlanError {
    fn from(e: serde_json::Error) -> Self {
        PlanError::Format(format!("line {} column {}: {e}", e.line(), e.column()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Rrt,
    Astar,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Rrt => "rrt",
            PlannerKind::Astar => "astar",
        }
    }
}

impl std::str::FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rrt" => Ok(PlannerKind::Rrt),
            "astar" => Ok(PlannerKind::Astar),
            _ => Err(format!("unknown planner `{s}` (expected rrt or astar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub planner: PlannerKind,
    pub start: RobotState,
    pub goal: RobotState,
    pub tolerance: Tolerance,
    pub trajectory: Trajectory,
    pub samples: usize,
    pub runtime_s: f64,
}

impl Plan {
    /// Time to reach the goal.
    pub fn ttr(&self) -> f64 {
        self.trajectory.duration()
    }
}

/// Planner output: the plan if one was found, plus effort counters that are
/// meaningful either way.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub plan: Option<Plan>,
    pub samples: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub state: RobotState,
    pub parent: Option<usize>,
    /// Trajectory from the parent's state to `state`.
    pub segment: Trajectory,
    /// Elapsed time since the start, seconds.
    pub cost: f64,
}

fn extract(nodes: &[TreeNode], leaf: usize) -> Trajectory {
    let mut chain = vec![leaf];
    while let Some(p) = nodes[*chain.last().unwrap()].parent {
        chain.push(p);
    }
    let mut traj = Trajectory::from_start(nodes[*chain.last().unwrap()].state);
    for &i in chain.iter().rev().skip(1) {
        traj.append(&nodes[i].segment);
    }
    traj
}

fn trivial_plan(kind: PlannerKind, start: RobotState, goal: RobotState, tol: Tolerance, t0: Instant) -> PlanReport {
    let runtime_s = t0.elapsed().as_secs_f64();
    PlanReport {
        plan: Some(Plan {
            planner: kind,
            start,
            goal,
            tolerance: tol,
            trajectory: Trajectory::from_start(start),
            samples: 0,
            runtime_s,
        }),
        samples: 0,
        runtime_s,
    }
}

// ---------------------------------------------------------------------------
// RRT

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrtConfig {
    pub n_max: usize,
    /// Extension radius, meters.
    pub r_ext: f64,
    /// Neighbors tried per sample.
    pub n_nbs: usize,
    pub goal_bias: f64,
    /// Heading weight of the neighbor metric, meters per radian.
    pub heading_weight: f64,
    pub seed: u64,
    /// Rejection-sampling attempts for one free sample.
    pub sample_tries: usize,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            n_max: 1500,
            r_ext: 10.0,
            n_nbs: 5,
            goal_bias: 0.1,
            heading_weight: 2.0,
            seed: 0,
            sample_tries: 100,
        }
    }
}

/// Neighbor metric: position distance plus weighted heading difference.
pub fn pose_metric(a: &Pose2, b: &Pose2, heading_weight: f64) -> f64 {
    a.position().distance(b.position()) + heading_weight * angle_diff(a.theta(), b.theta()).abs()
}

/// Indices of up to `k` nodes nearest to `q`, nearest first (ties by index).
pub fn nearest_k(nodes: &[TreeNode], q: &Pose2, k: usize, heading_weight: f64) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (pose_metric(&n.state.pose(), q, heading_weight), i))
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Steering target at most `r_ext` from `near` in the direction of `rand`,
/// with `rand`'s heading, at rest.
pub fn extend_toward(near: &RobotState, rand: &RobotState, r_ext: f64) -> RobotState {
    let d = rand.position() - near.position();
    let dist = d.norm();
    let p = if dist <= r_ext {
        rand.position()
    } else {
        near.position() + d * (r_ext / dist)
    };
    RobotState::at_rest(p.x, p.y, rand.theta)
}

fn sample_free<R: Rng + ?Sized>(world: &WorldMap, rng: &mut R, tries: usize) -> Option<RobotState> {
    let p = world.vehicle();
    (0..tries).find_map(|_| {
        let s = RobotState::at_rest(
            rng.random_range(0.0..world.width()),
            rng.random_range(0.0..world.height()),
            rng.random_range(-PI..PI),
        );
        world.is_free_static(&s, p).then_some(s)
    })
}

pub fn rrt_plan(
    start: &RobotState,
    goal: &RobotState,
    world: &WorldMap,
    steering: &dyn Steering,
    cfg: &RrtConfig,
) -> Result<PlanReport, PlanError> {
    let t0 = Instant::now();
    let start = start.with_time(0.0);
    let tol = steering.config().tolerance;
    if !is_free(&start, world, world.vehicle()) {
        return Err(PlanError::StartInCollision);
    }
    if goal_reached(&start, goal, &tol) {
        return Ok(trivial_plan(PlannerKind::Rrt, start, *goal, tol, t0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nodes = vec![TreeNode {
        state: start,
        parent: None,
        segment: Trajectory::default(),
        cost: 0.0,
    }];
    for iter in 1..=cfg.n_max {
        let s_rand = if rng.random_bool(cfg.goal_bias.clamp(0.0, 1.0)) {
            *goal
        } else {
            match sample_free(world, &mut rng, cfg.sample_tries) {
                Some(s) => s,
                None => continue,
            }
        };
        for nb in nearest_k(&nodes, &s_rand.pose(), cfg.n_nbs, cfg.heading_weight) {
            let from = nodes[nb].state;
            let target = extend_toward(&from, &s_rand, cfg.r_ext);
            let r = steering.steer(&from, &target, goal, world);
            let Some(&arrival) = r.arrival() else {
                continue;
            };
            let reached_goal = r.reached_goal();
            nodes.push(TreeNode {
                state: arrival,
                parent: Some(nb),
                cost: arrival.t,
                segment: r.trajectory,
            });
            if reached_goal {
                let runtime_s = t0.elapsed().as_secs_f64();
                let trajectory = extract(&nodes, nodes.len() - 1);
                return Ok(PlanReport {
                    plan: Some(Plan {
                        planner: PlannerKind::Rrt,
                        start,
                        goal: *goal,
                        tolerance: tol,
                        trajectory,
                        samples: iter,
                        runtime_s,
                    }),
                    samples: iter,
                    runtime_s,
                });
            }
            break;
        }
    }
    Ok(PlanReport {
        plan: None,
        samples: cfg.n_max,
        runtime_s: t0.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// A*

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AstarConfig {
    /// Number of steering angles spread uniformly over `[-gamma_max, gamma_max]`.
    pub n_steering: usize,
    /// Primitive speed, m/s.
    pub speed: f64,
    /// Primitive duration, seconds.
    pub horizon: f64,
    pub heuristic_weight: f64,
    /// Duplicate-grid cell sizes: meters, radians, seconds.
    pub grid_xy: f64,
    pub grid_theta: f64,
    pub grid_t: f64,
    /// Expansion budget.
    pub n_max: usize,
    /// Speed given to successor targets (`None`: at rest).
    pub target_speed: Option<f64>,
    /// Drop successor targets whose footprint hits a static obstacle.
    pub prune_static: bool,
}

impl Default for AstarConfig {
    fn default() -> Self {
        Self {
            n_steering: 7,
            speed: 2.0,
            horizon: 3.0,
            heuristic_weight: 2.0,
            grid_xy: 1.0,
            grid_theta: 15f64.to_radians(),
            grid_t: 1.0,
            n_max: 1500,
            target_speed: Some(2.0),
            prune_static: true,
        }
    }
}

/// Steering angles of the primitive set.
pub fn steering_angles(n: usize, gamma_max: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let half = (n - 1) as f64 / 2.0;
            (0..n).map(|k| gamma_max * (k as f64 - half) / half).collect()
        }
    }
}

/// Pose after driving at constant speed and steering angle (closed form).
pub fn primitive_end(pose: &Pose2, speed: f64, gamma: f64, duration: f64, wheel_base: f64) -> Pose2 {
    let s = speed * duration;
    let th = pose.theta();
    if gamma.abs() < 1e-12 {
        return Pose2::new(pose.x + s * th.cos(), pose.y + s * th.sin(), th);
    }
    let k = gamma.tan() / wheel_base;
    let dth = s * k;
    Pose2::new(
        pose.x + ((th + dth).sin() - th.sin()) / k,
        pose.y - ((th + dth).cos() - th.cos()) / k,
        th + dth,
    )
}

/// Motion-primitive targets from `s`; with `world` given and pruning on,
/// targets colliding with static obstacles or outside the map are dropped.
pub fn successors(s: &RobotState, cfg: &AstarConfig, p: &VehicleParams, world: Option<&WorldMap>) -> Vec<RobotState> {
    steering_angles(cfg.n_steering, p.gamma_max)
        .into_iter()
        .map(|g| {
            let e = primitive_end(&s.pose(), cfg.speed, g, cfg.horizon, p.wheel_base);
            RobotState::new(e.x, e.y, e.theta(), cfg.target_speed.unwrap_or(0.0), g, 0.0)
        })
        .filter(|t| match world {
            Some(w) if cfg.prune_static => w.in_extent(t.position()) && w.is_free_static(t, p),
            _ => true,
        })
        .collect()
}

type GridKey = (i64, i64, i64, i64);

fn grid_key(s: &RobotState, cfg: &AstarConfig) -> GridKey {
    (
        (s.x / cfg.grid_xy).floor() as i64,
        (s.y / cfg.grid_xy).floor() as i64,
        ((wrap_angle(s.theta) + PI) / cfg.grid_theta).floor() as i64,
        (s.t / cfg.grid_t).floor() as i64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenEntry {
    f: f64,
    seq: usize,
    node: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    fn cmp(&self, o: &Self) -> Ordering {
        // BinaryHeap is a max-heap: smallest f (then oldest) first
        o.f.total_cmp(&self.f).then(o.seq.cmp(&self.seq))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Search statistics beyond the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AstarStats {
    pub expansions: usize,
    pub steering_calls: usize,
    /// Expansions refused because the cell was already expanded with a
    /// better or equal g.
    pub duplicate_pops: usize,
}

pub fn astar_plan(
    start: &RobotState,
    goal: &RobotState,
    world: &WorldMap,
    steering: &dyn Steering,
    cfg: &AstarConfig,
) -> Result<PlanReport, PlanError> {
    astar_plan_with_stats(start, goal, world, steering, cfg).map(|(r, _)| r)
}

pub fn astar_plan_with_stats(
    start: &RobotState,
    goal: &RobotState,
    world: &WorldMap,
    steering: &dyn Steering,
    cfg: &AstarConfig,
) -> Result<(PlanReport, AstarStats), PlanError> {
    let t0 = Instant::now();
    let p = *world.vehicle();
    let start = start.with_time(0.0);
    let scfg = *steering.config();
    let tol = scfg.tolerance;
    if !is_free(&start, world, &p) {
        return Err(PlanError::StartInCollision);
    }
    let mut stats = AstarStats::default();
    if goal_reached(&start, goal, &tol) {
        return Ok((trivial_plan(PlannerKind::Astar, start, *goal, tol, t0), stats));
    }
    let h = |s: &RobotState| cfg.heuristic_weight * s.position().distance(goal.position()) / p.v_max;
    let mut nodes = vec![TreeNode {
        state: start,
        parent: None,
        segment: Trajectory::default(),
        cost: 0.0,
    }];
    let mut best_g: HashMap<GridKey, f64> = HashMap::from([(grid_key(&start, cfg), 0.0)]);
    let mut expanded: HashMap<GridKey, f64> = HashMap::new();
    let mut open = BinaryHeap::from([OpenEntry {
        f: h(&start),
        seq: 0,
        node: 0,
    }]);
    let mut seq = 1;
    while let Some(OpenEntry { node, .. }) = open.pop() {
        if stats.expansions >= cfg.n_max {
            break;
        }
        let s = nodes[node].state;
        let g = nodes[node].cost;
        let key = grid_key(&s, cfg);
        if expanded.get(&key).is_some_and(|&eg| eg <= g) {
            stats.duplicate_pops += 1;
            continue;
        }
        expanded.insert(key, g);
        stats.expansions += 1;

        let targets = successors(&s, cfg, &p, Some(world));
        let goal_only = !scfg.fallback_to_target && s.position().distance(goal.position()) < scfg.goal_radius;
        let results: Vec<SteerResult> = if goal_only {
            // every successor call would be the same goal attempt
            vec![steering.steer(&s, goal, goal, world)]
        } else {
            targets.par_iter().map(|t| steering.steer(&s, t, goal, world)).collect()
        };
        for r in results {
            stats.steering_calls += 1;
            let Some(&arrival) = r.arrival() else {
                continue;
            };
            let reached_goal = r.reached_goal();
            let child_g = g + r.trajectory.duration();
            let ck = grid_key(&arrival, cfg);
            if !reached_goal && best_g.get(&ck).is_some_and(|&bg| bg <= child_g) {
                continue;
            }
            best_g.insert(ck, child_g);
            nodes.push(TreeNode {
                state: arrival,
                parent: Some(node),
                segment: r.trajectory,
                cost: child_g,
            });
            let id = nodes.len() - 1;
            if reached_goal {
                let runtime_s = t0.elapsed().as_secs_f64();
                let plan = Plan {
                    planner: PlannerKind::Astar,
                    start,
                    goal: *goal,
                    tolerance: tol,
                    trajectory: extract(&nodes, id),
                    samples: stats.steering_calls,
                    runtime_s,
                };
                let report = PlanReport {
                    plan: Some(plan),
                    samples: stats.steering_calls,
                    runtime_s,
                };
                return Ok((report, stats));
            }
            open.push(OpenEntry {
                f: child_g + h(&arrival),
                seq,
                node: id,
            });
            seq += 1;
        }
    }
    let report = PlanReport {
        plan: None,
        samples: stats.steering_calls,
        runtime_s: t0.elapsed().as_secs_f64(),
    };
    Ok((report, stats))
}

// ---------------------------------------------------------------------------
// Validation and serialization

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanDefect {
    #[error("plan has no states")]
    Empty,
    #[error("{states} states but {controls} controls")]
    Shape { states: usize, controls: usize },
    #[error("plan does not start at the start state at t = 0")]
    WrongStart,
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotoneTime(usize),
    #[error("state {index} deviates from re-integration by {error}")]
    Replay { index: usize, error: f64 },
    #[error("collision between states {0} and {next}", next = .0 + 1)]
    Collision(usize),
    #[error("final state is outside the goal tolerance")]
    GoalMissed,
}

/// Detailed form of [`validate_plan`].
pub fn check_plan(plan: &Plan, world: &WorldMap, p: &VehicleParams) -> Result<(), PlanDefect> {
    let tr = &plan.trajectory;
    let Some(first) = tr.states.first() else {
        return Err(PlanDefect::Empty);
    };
    if tr.states.len() != tr.controls.len() + 1 {
        return Err(PlanDefect::Shape {
            states: tr.states.len(),
            controls: tr.controls.len(),
        });
    }
    if first.t != 0.0 || state_distance(first, &plan.start.with_time(0.0)) > 1e-9 {
        return Err(PlanDefect::WrongStart);
    }
    if let Some(i) = tr.states.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(PlanDefect::NonMonotoneTime(i + 1));
    }
    let mut s = *first;
    for (k, c) in tr.controls.iter().enumerate() {
        s = step(&s, *c, p.dt, p);
        let error = state_distance(&s, &tr.states[k + 1]);
        if !(error <= 1e-6) {
            return Err(PlanDefect::Replay { index: k + 1, error });
        }
    }
    if !is_free(first, world, p) {
        return Err(PlanDefect::Collision(0));
    }
    if let Some(k) = tr.states.windows(2).position(|w| !motion_is_free(&w[0], &w[1], world, p)) {
        return Err(PlanDefect::Collision(k));
    }
    if !goal_reached(tr.states.last().unwrap(), &plan.goal, &plan.tolerance) {
        return Err(PlanDefect::GoalMissed);
    }
    Ok(())
}

/// Re-integrates the controls, checks dense collision freedom at dt/5 and
/// goal arrival.
pub fn validate_plan(plan: &Plan, world: &WorldMap, p: &VehicleParams) -> bool {
    check_plan(plan, world, p).is_ok()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    version: u32,
    planner: PlannerKind,
    task: TaskEntry,
    states: Vec<[f64; 6]>,
    controls: Vec<[f64; 2]>,
    metrics: Metrics,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    start: [f64; 3],
    goal: [f64; 3],
    tolerance: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metrics {
    ttr: f64,
    samples: usize,
    runtime_s: f64,
}

impl Plan {
    pub fn to_json(&self) -> String {
        let pose = |s: &RobotState| [s.x, s.y, s.theta];
        let f = PlanFile {
            version: PLAN_FORMAT_VERSION,
            planner: self.planner,
            task: TaskEntry {
                start: pose(&self.start),
                goal: pose(&self.goal),
                tolerance: [self.tolerance.rho, self.tolerance.theta],
            },
            states: self
                .trajectory
                .states
                .iter()
                .map(|s| [s.t, s.x, s.y, s.theta, s.v, s.gamma])
                .collect(),
            controls: self.trajectory.controls.iter().map(|c| [c.a, c.omega]).collect(),
            metrics: Metrics {
                ttr: self.ttr(),
                samples: self.samples,
                runtime_s: self.runtime_s,
            },
        };
        serde_json::to_string_pretty(&f).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let f: PlanFile = serde_json::from_str(text)?;
        if f.version != PLAN_FORMAT_VERSION {
            return Err(PlanError::Format(format!(
                "unsupported plan format version {} (expected {PLAN_FORMAT_VERSION})",
                f.version
            )));
        }
        let states: Vec<RobotState> = f
            .states
            .iter()
            .map(|s| RobotState::new(s[1], s[2], s[3], s[4], s[5], s[0]))
            .collect();
        let start = states.first().copied().unwrap_or_default();
        let [gx, gy, gth] = f.task.goal;
        Ok(Plan {
            planner: f.planner,
            start: RobotState::new(f.task.start[0], f.task.start[1], f.task.start[2], start.v, start.gamma, 0.0),
            goal: RobotState::at_rest(gx, gy, gth),
            tolerance: Tolerance {
                rho: f.task.tolerance[0],
                theta: f.task.tolerance[1],
            },
            trajectory: Trajectory {
                states,
                controls: f.controls.iter().map(|c| Control::new(c[0], c[1])).collect(),
            },
            samples: f.metrics.samples,
            runtime_s: f.metrics.runtime_s,
        })
    }
}

/// Straight-line travel-time lower bound at top speed, for sanity checks.
pub fn straight_line_time(a: Vec2, b: Vec2, v_max: f64) -> f64 {
    a.distance(b) / v_max
}
