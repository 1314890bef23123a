//! Local steering between two states, shared by both global planners.
//!
//! A steering call rolls a controller forward from `s_i` with absolute time
//! advancing from `s_i.t`, so moving obstacles are checked where they will
//! be when the robot gets there. Two controllers are provided: a learned
//! policy ([`RlSteer`]) and a geometric pure-pursuit stub ([`StubSteer`]).

use serde::{Deserialize, Serialize};

use crate::geom::angle_diff;
use crate::gym::{build_observation, goal_reached, ObsConfig, Tolerance};
use crate::policy::Actor;
use crate::vehicle::{clamp_control, step};
use crate::world::{is_free, WorldMap};
use crate::{Control, RobotState, Vec2, VehicleParams};

/// Sub-samples per dynamics step used for dense collision checks.
pub const DENSE_SUBSTEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    /// Radius within which the goal replaces the requested target.
    pub goal_radius: f64,
    pub max_steer_steps: usize,
    pub dt: f64,
    pub tolerance: Tolerance,
    pub obs: ObsConfig,
    /// After a failed goal attempt, try the requested target instead.
    pub fallback_to_target: bool,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            goal_radius: 30.0,
            max_steer_steps: 300,
            dt: 0.1,
            tolerance: Tolerance::EVALUATION,
            obs: ObsConfig::default(),
            fallback_to_target: false,
        }
    }
}

/// States and the controls between them: `states.len() == controls.len() + 1`
/// unless empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<RobotState>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn from_start(s: RobotState) -> Self {
        Self {
            states: vec![s],
            controls: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of dynamics steps.
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn first(&self) -> Option<&RobotState> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&RobotState> {
        self.states.last()
    }

    pub fn duration(&self) -> f64 {
        match (self.states.first(), self.states.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| w[0].position().distance(w[1].position()))
            .sum()
    }

    fn push(&mut self, c: Control, s: RobotState) {
        self.controls.push(c);
        self.states.push(s);
    }

    /// Appends `other`, whose first state must coincide with our last.
    pub fn append(&mut self, other: &Trajectory) {
        if self.is_empty() {
            *self = other.clone();
            return;
        }
        self.states.extend_from_slice(&other.states[1..]);
        self.controls.extend_from_slice(&other.controls);
    }

    /// Largest deviation between stored states and a re-integration of the
    /// stored controls from the first state.
    pub fn replay_error(&self, p: &VehicleParams) -> f64 {
        let Some(&s0) = self.states.first() else {
            return 0.0;
        };
        let mut s = s0;
        let mut worst: f64 = 0.0;
        for (c, stored) in self.controls.iter().zip(&self.states[1..]) {
            s = step(&s, *c, p.dt, p);
            worst = worst.max(state_distance(&s, stored));
        }
        worst
    }
}

/// Max-norm over all state fields, heading difference wrapped.
pub fn state_distance(a: &RobotState, b: &RobotState) -> f64 {
    [
        (a.x - b.x).abs(),
        (a.y - b.y).abs(),
        angle_diff(a.theta, b.theta).abs(),
        (a.v - b.v).abs(),
        (a.gamma - b.gamma).abs(),
        (a.t - b.t).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Pose and time linearly interpolated between two states (shortest arc for
/// the heading); velocity and steering angle are interpolated too.
pub fn interpolate(a: &RobotState, b: &RobotState, u: f64) -> RobotState {
    let lerp = |x: f64, y: f64| x + (y - x) * u;
    RobotState::new(
        lerp(a.x, b.x),
        lerp(a.y, b.y),
        a.theta + angle_diff(b.theta, a.theta) * u,
        lerp(a.v, b.v),
        lerp(a.gamma, b.gamma),
        lerp(a.t, b.t),
    )
}

/// Checks `b` and the `DENSE_SUBSTEPS - 1` interpolated states strictly
/// between `a` and `b`.
pub fn motion_is_free(a: &RobotState, b: &RobotState, m: &WorldMap, p: &VehicleParams) -> bool {
    (1..=DENSE_SUBSTEPS).all(|j| {
        let s = if j == DENSE_SUBSTEPS {
            *b
        } else {
            interpolate(a, b, j as f64 / DENSE_SUBSTEPS as f64)
        };
        is_free(&s, m, p)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerOutcome {
    Reached,
    Collision,
    StepLimit,
    /// Controller gave up (target behind or overshot).
    Aborted,
    Runaway,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerResult {
    /// Starts at the initial state on success; empty on failure.
    pub trajectory: Trajectory,
    pub outcome: SteerOutcome,
    /// The call aimed at the goal instead of the requested target.
    pub target_was_goal: bool,
    /// Dynamics steps simulated, including failed attempts.
    pub steps_simulated: usize,
}

impl SteerResult {
    pub fn reached(&self) -> bool {
        self.outcome == SteerOutcome::Reached
    }

    /// `reached()` and the target was the goal.
    pub fn reached_goal(&self) -> bool {
        self.reached() && self.target_was_goal
    }

    pub fn arrival(&self) -> Option<&RobotState> {
        if self.reached() {
            self.trajectory.last()
        } else {
            None
        }
    }
}

/// A local planner connecting two states in a time-varying world.
pub trait Steering: Sync {
    fn config(&self) -> &SteerConfig;

    /// Drives from `from` toward `target` with no goal substitution.
    fn steer_to(&self, from: &RobotState, target: &RobotState, world: &WorldMap) -> SteerResult;

    /// Drives from `from` toward `target`, or toward `goal` when it lies
    /// within the goal radius.
    fn steer(&self, from: &RobotState, target: &RobotState, goal: &RobotState, world: &WorldMap) -> SteerResult {
        let cfg = self.config();
        if from.position().distance(goal.position()) >= cfg.goal_radius {
            return self.steer_to(from, target, world);
        }
        let mut r = self.steer_to(from, goal, world);
        r.target_was_goal = true;
        if !r.reached() && cfg.fallback_to_target {
            let mut alt = self.steer_to(from, target, world);
            alt.steps_simulated += r.steps_simulated;
            return alt;
        }
        r
    }
}

/// Runs `controller` until the target is reached or a stop rule fires.
/// Returning `None` from the controller aborts.
pub fn roll_out(
    from: &RobotState,
    target: &RobotState,
    world: &WorldMap,
    cfg: &SteerConfig,
    mut controller: impl FnMut(&RobotState, &Control) -> Option<Control>,
) -> SteerResult {
    let p = world.vehicle();
    let mut traj = Trajectory::from_start(*from);
    let done = |outcome, traj: Trajectory, steps| SteerResult {
        trajectory: if outcome == SteerOutcome::Reached {
            traj
        } else {
            Trajectory::default()
        },
        outcome,
        target_was_goal: false,
        steps_simulated: steps,
    };
    if goal_reached(from, target, &cfg.tolerance) {
        return done(SteerOutcome::Reached, traj, 0);
    }
    let mut s = *from;
    let mut last = Control::zero();
    for k in 0..cfg.max_steer_steps {
        let Some(c) = controller(&s, &last) else {
            return done(SteerOutcome::Aborted, traj, k);
        };
        let c = clamp_control(c, p);
        let next = step(&s, c, cfg.dt, p).with_time(from.t + (k + 1) as f64 * cfg.dt);
        if !motion_is_free(&s, &next, world, p) {
            return done(SteerOutcome::Collision, traj, k + 1);
        }
        if next.v.abs() > 2.0 * p.v_max {
            return done(SteerOutcome::Runaway, traj, k + 1);
        }
        traj.push(c, next);
        s = next;
        last = c;
        if goal_reached(&s, target, &cfg.tolerance) {
            return done(SteerOutcome::Reached, traj, k + 1);
        }
    }
    done(SteerOutcome::StepLimit, traj, cfg.max_steer_steps)
}

/// Steering by a policy's deterministic action.
#[derive(Debug, Clone)]
pub struct RlSteer<A> {
    pub actor: A,
    pub cfg: SteerConfig,
}

impl<A: Actor> RlSteer<A> {
    pub fn new(actor: A, cfg: SteerConfig) -> Self {
        Self { actor, cfg }
    }
}

impl<A: Actor> Steering for RlSteer<A> {
    fn config(&self) -> &SteerConfig {
        &self.cfg
    }

    fn steer_to(&self, from: &RobotState, target: &RobotState, world: &WorldMap) -> SteerResult {
        let p = *world.vehicle();
        roll_out(from, target, world, &self.cfg, |s, last| {
            let obs = build_observation(s, target, last, world, &self.cfg.obs, &p);
            Some(self.actor.act(&obs, &p))
        })
    }
}

/// Policy rollout toward `target`, or toward `goal` within the goal radius.
pub fn rl_steer(
    from: &RobotState,
    target: &RobotState,
    goal: &RobotState,
    world: &WorldMap,
    actor: &dyn Actor,
    cfg: &SteerConfig,
) -> SteerResult {
    RlSteer::new(actor, *cfg).steer(from, target, goal, world)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubGains {
    pub cruise_speed: f64,
    /// Deceleration used to shape the approach speed, m/s^2.
    pub brake: f64,
    /// Speed kept near the target so it is actually reached, m/s.
    pub creep_speed: f64,
    pub speed_gain: f64,
    /// Pure-pursuit lookahead along the approach line, meters.
    pub lookahead: f64,
    /// Give up once the target is this far behind the rear axle, meters.
    pub overshoot: f64,
}

impl Default for StubGains {
    fn default() -> Self {
        Self {
            cruise_speed: 4.0,
            brake: 1.5,
            creep_speed: 0.5,
            speed_gain: 2.0,
            lookahead: 4.0,
            overshoot: 1.0,
        }
    }
}

/// Forward-only pure pursuit onto the line through the target along its
/// heading, with a trapezoidal speed profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubSteer {
    pub cfg: SteerConfig,
    pub gains: StubGains,
}

impl StubSteer {
    pub fn new(cfg: SteerConfig) -> Self {
        Self {
            cfg,
            gains: StubGains::default(),
        }
    }

    /// One control toward `target`, or `None` once the target is behind.
    pub fn control(&self, s: &RobotState, target: &RobotState, p: &VehicleParams) -> Option<Control> {
        let g = &self.gains;
        let pose = s.pose();
        let local_target = pose.inverse_transform_point(target.position());
        if local_target.x < -g.overshoot {
            return None;
        }
        let dist = local_target.norm();
        let v_cap = g.cruise_speed.min(p.v_max);
        let v_des = v_cap.min((2.0 * g.brake * dist).sqrt() + g.creep_speed);
        let a = g.speed_gain * (v_des - s.v);

        // lookahead point on the approach line, ahead of our projection
        let dir = Vec2::from_angle(target.theta);
        let along = (s.position() - target.position()).dot(dir);
        let look = target.position() + dir * (along + g.lookahead);
        let l = pose.inverse_transform_point(look);
        let gamma_des = if l.x <= 0.0 {
            l.y.signum() * p.gamma_max
        } else {
            let curvature = 2.0 * l.y / l.dot(l);
            (p.wheel_base * curvature).atan()
        };
        let omega = (gamma_des.clamp(-p.gamma_max, p.gamma_max) - s.gamma) / self.cfg.dt;
        Some(Control::new(a, omega))
    }
}

impl Steering for StubSteer {
    fn config(&self) -> &SteerConfig {
        &self.cfg
    }

    fn steer_to(&self, from: &RobotState, target: &RobotState, world: &WorldMap) -> SteerResult {
        let p = *world.vehicle();
        let behind = from.pose().inverse_transform_point(target.position()).x <= 0.0;
        if behind && !goal_reached(from, target, &self.cfg.tolerance) {
            return SteerResult {
                trajectory: Trajectory::default(),
                outcome: SteerOutcome::Aborted,
                target_was_goal: false,
                steps_simulated: 0,
            };
        }
        roll_out(from, target, world, &self.cfg, |s, _| self.control(s, target, &p))
    }
}

/// Geometric steering toward `target` with the stub controller.
pub fn stub_steer(from: &RobotState, target: &RobotState, world: &WorldMap, cfg: &SteerConfig) -> SteerResult {
    StubSteer::new(*cfg).steer_to(from, target, world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ObstacleTrack;
    use crate::Pose2;
    use std::f64::consts::PI;

    fn world() -> WorldMap {
        WorldMap::empty(60.0, 40.0, true)
    }

    #[test]
    fn degenerate_target() {
        let s = RobotState::new(10.0, 10.0, 0.3, 0.0, 0.0, 4.0);
        let r = stub_steer(&s, &s, &world(), &SteerConfig::default());
        assert!(r.reached());
        assert_eq!(r.trajectory.states, vec![s]);
        assert_eq!(r.trajectory.steps(), 0);
        assert_eq!(r.arrival().unwrap().t, 4.0);
    }

    #[test]
    fn straight_corridor() {
        let cfg = SteerConfig::default();
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let t = RobotState::at_rest(20.0, 20.0, 0.0);
        let r = stub_steer(&s, &t, &world(), &cfg);
        assert!(r.reached(), "{:?}", r.outcome);
        let len = r.trajectory.path_length();
        assert!((len - 10.0).abs() <= 1.0, "{len}");
        let n = r.trajectory.steps() as f64;
        assert_eq!(r.arrival().unwrap().t, s.t + n * cfg.dt);
        assert!(r.trajectory.replay_error(&VehicleParams::default()) < 1e-9);
    }

    #[test]
    fn target_behind_fails() {
        let s = RobotState::at_rest(20.0, 20.0, 0.0);
        let t = RobotState::at_rest(17.0, 20.0, PI);
        let r = stub_steer(&s, &t, &world(), &SteerConfig::default());
        assert_eq!(r.outcome, SteerOutcome::Aborted);
        assert!(r.trajectory.is_empty());
    }

    #[test]
    fn blocked_by_wall() {
        let wall = ObstacleTrack::fixed(Pose2::new(25.0, 20.0, 0.0), 0.5, 15.0);
        let m = WorldMap::new(60.0, 40.0, true, VehicleParams::default(), vec![wall], vec![]).unwrap();
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let t = RobotState::at_rest(35.0, 20.0, 0.0);
        let r = stub_steer(&s, &t, &m, &SteerConfig::default());
        assert!(matches!(r.outcome, SteerOutcome::Collision | SteerOutcome::StepLimit));
        assert!(r.trajectory.is_empty());
    }

    #[test]
    fn time_offsets_carry_through() {
        let s = RobotState::new(10.0, 20.0, 0.0, 0.0, 0.0, 7.5);
        let t = RobotState::at_rest(22.0, 22.0, 0.2);
        let r = stub_steer(&s, &t, &world(), &SteerConfig::default());
        assert!(r.reached());
        let traj = &r.trajectory;
        for (k, st) in traj.states.iter().enumerate() {
            assert!((st.t - (7.5 + k as f64 * 0.1)).abs() < 1e-9);
        }
    }

    struct Idle;
    impl Actor for Idle {
        fn act(&self, _: &crate::gym::Observation, _: &VehicleParams) -> Control {
            Control::zero()
        }
    }

    #[test]
    fn idle_policy_hits_step_limit() {
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let t = RobotState::at_rest(50.0, 20.0, 0.0);
        let r = rl_steer(&s, &t, &t, &world(), &Idle, &SteerConfig::default());
        assert_eq!(r.outcome, SteerOutcome::StepLimit);
        assert_eq!(r.steps_simulated, 300);
        assert!(!r.target_was_goal, "40 m is outside the goal radius");
    }

    #[test]
    fn goal_substitution_radius() {
        let cfg = SteerConfig::default();
        let stub = StubSteer::new(cfg);
        let s = RobotState::at_rest(10.0, 20.0, 0.0);
        let goal = RobotState::at_rest(25.0, 20.0, 0.0);
        let target = RobotState::at_rest(15.0, 25.0, 0.5);
        let r = stub.steer(&s, &target, &goal, &world());
        assert!(r.target_was_goal && r.reached_goal());
        assert!(goal_reached(r.arrival().unwrap(), &goal, &cfg.tolerance));
        let far_goal = RobotState::at_rest(45.0, 20.0, 0.0);
        let r = stub.steer(&RobotState::at_rest(10.0, 20.0, 0.0), &target, &far_goal, &world());
        assert!(!r.target_was_goal);
    }

    #[test]
    fn fallback_after_failed_goal_attempt() {
        let cfg = SteerConfig {
            fallback_to_target: true,
            ..SteerConfig::default()
        };
        let s = RobotState::at_rest(20.0, 20.0, 0.0);
        let behind_goal = RobotState::at_rest(10.0, 20.0, 0.0);
        let target = RobotState::at_rest(28.0, 20.0, 0.0);
        let r = StubSteer::new(cfg).steer(&s, &target, &behind_goal, &world());
        assert!(r.reached() && !r.target_was_goal);
        let strict = StubSteer::new(SteerConfig::default()).steer(&s, &target, &behind_goal, &world());
        assert!(!strict.reached() && strict.target_was_goal);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = RobotState::new(0.0, 0.0, 3.0, 1.0, 0.1, 0.0);
        let b = RobotState::new(1.0, 2.0, -3.0, 2.0, 0.2, 0.1);
        assert_eq!(interpolate(&a, &b, 0.0), a);
        assert!(state_distance(&interpolate(&a, &b, 1.0), &b) < 1e-12);
        let mid = interpolate(&a, &b, 0.5);
        assert!((mid.theta.abs() - PI).abs() < 1e-9, "short way round through pi");
    }
}
