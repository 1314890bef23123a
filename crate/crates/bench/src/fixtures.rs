//! Hand-built worlds and steering used by the acceptance checks.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use kinoplan::gym::goal_reached;
use kinoplan::steer::{roll_out, SteerConfig, SteerResult, Steering, StubGains, StubSteer, Trajectory};
use kinoplan::steer::SteerOutcome;
use kinoplan::world::{lidar_scan, Keyframe, LidarConfig, Motion, ObstacleTrack, WorldMap};
use kinoplan::{Control, Pose2, RobotState, VehicleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corridor along x closed by a gate that spans the whole map height until
/// `release`, then rises out of the map.
#[derive(Debug, Clone)]
pub struct BlockedCorridor {
    pub world: WorldMap,
    pub start: RobotState,
    pub goal: RobotState,
    /// Corridor spans `y` in this interval.
    pub corridor: (f64, f64),
    pub gate: ObstacleTrack,
    /// Time the gate starts to move away.
    pub release: f64,
}

pub fn blocked_corridor() -> BlockedCorridor {
    let (len, height, lo, hi) = (52.0, 20.0, 7.0, 13.0);
    let block = |x0: f64, x1: f64, y0: f64, y1: f64| {
        ObstacleTrack::fixed(Pose2::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0), (x1 - x0) / 2.0, (y1 - y0) / 2.0)
    };
    let statics = vec![block(0.0, len, 0.0, lo), block(0.0, len, hi, height)];
    let release = 5.0;
    let gx = 25.0;
    let kf = |t, y| Keyframe {
        t,
        pose: Pose2::new(gx, y, FRAC_PI_2),
    };
    let mid = height / 2.0;
    let gate = ObstacleTrack::new(
        height / 2.0 + 0.5,
        1.5,
        Motion::Scripted(vec![kf(0.0, mid), kf(release, mid), kf(release + 3.0, mid + height + 1.0)]),
    )
    .expect("valid gate");
    let world = WorldMap::new(len, height, true, VehicleParams::default(), statics, vec![gate.clone()])
        .expect("valid corridor");
    let y = (lo + hi) / 2.0;
    BlockedCorridor {
        world,
        start: RobotState::at_rest(5.0, y, 0.0),
        goal: RobotState::at_rest(43.0, y, 0.0),
        corridor: (lo, hi),
        gate,
        release,
    }
}

/// Stub steering that stops and waits while something sits between the
/// robot and its target within stopping distance on the forward beams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaitThenGo {
    pub stub: StubSteer,
    pub lidar: LidarConfig,
    /// Beams on each side of straight ahead that are watched.
    pub watch_beams: usize,
    /// Clearance kept to the obstacle in front, meters.
    pub clearance: f64,
}

impl WaitThenGo {
    pub fn new(cfg: SteerConfig) -> Self {
        Self {
            stub: StubSteer::new(cfg),
            lidar: cfg.obs.lidar,
            watch_beams: 1,
            clearance: 1.5,
        }
    }

    fn blocked(&self, s: &RobotState, target: &RobotState, world: &WorldMap, p: &VehicleParams) -> bool {
        let ranges = lidar_scan(s, world, &self.lidar);
        let n = ranges.len();
        let ahead = (0..=self.watch_beams).chain(n - self.watch_beams..n).map(|k| ranges[k]);
        let stop = p.rear_axle_offset + p.half_length + s.v.max(0.0).powi(2) / (2.0 * p.a_max) + self.clearance;
        let to_target = s.position().distance(target.position());
        ahead.into_iter().any(|r| r < stop && r < to_target)
    }
}

impl Steering for WaitThenGo {
    fn config(&self) -> &SteerConfig {
        &self.stub.cfg
    }

    fn steer_to(&self, from: &RobotState, target: &RobotState, world: &WorldMap) -> SteerResult {
        let p = *world.vehicle();
        let cfg = self.stub.cfg;
        let behind = from.pose().inverse_transform_point(target.position()).x <= 0.0;
        if behind && !goal_reached(from, target, &cfg.tolerance) {
            return SteerResult {
                trajectory: Trajectory::default(),
                outcome: SteerOutcome::Aborted,
                target_was_goal: false,
                steps_simulated: 0,
            };
        }
        roll_out(from, target, world, &cfg, |s, _| {
            let c = self.stub.control(s, target, &p)?;
            if self.blocked(s, target, world, &p) {
                Some(Control::new(-s.v / cfg.dt, c.omega))
            } else {
                Some(c)
            }
        })
    }
}

/// Straight walled corridor with start and goal on its center line.
#[derive(Debug, Clone)]
pub struct Corridor {
    pub world: WorldMap,
    pub start: RobotState,
    pub goal: RobotState,
    pub length: f64,
}

/// `n` straight corridors with lengths spread over `[12, 28]` m and
/// widths over `[4, 8]` m.
pub fn straight_corridors(n: usize) -> Vec<Corridor> {
    (0..n)
        .map(|k| {
            let u = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            let length = 12.0 + 16.0 * u;
            let width = 4.0 + 4.0 * ((k * 7) % n.max(1)) as f64 / n.max(1) as f64;
            let world = WorldMap::empty(length + 12.0, width, true);
            let y = width / 2.0;
            Corridor {
                world,
                start: RobotState::at_rest(4.0, y, 0.0),
                goal: RobotState::at_rest(4.0 + length, y, 0.0),
                length,
            }
        })
        .collect()
}

/// Time to cover `distance` from rest until within `goal_radius`, moving
/// at the stub's speed envelope: the least of the `a_max` ramp
/// `sqrt(2 a_max x)`, the cruise speed and the approach law
/// `sqrt(2 brake u) + creep` at remaining distance `u`. The stub's response
/// lag is ignored.
pub fn stub_envelope_time(distance: f64, goal_radius: f64, g: &StubGains, p: &VehicleParams) -> f64 {
    let (a, b, c) = (p.a_max, g.brake, g.creep_speed);
    let vc = g.cruise_speed.min(p.v_max);
    let d = distance;
    if d <= goal_radius {
        return 0.0;
    }
    let ramp = |x: f64| (2.0 * x / a).sqrt();
    // closed form of the integral of du / (sqrt(2 b u) + c) between two remaining distances
    let approach = |u_hi: f64, u_lo: f64| {
        let (s_hi, s_lo) = ((2.0 * b * u_hi).sqrt(), (2.0 * b * u_lo).sqrt());
        ((s_hi - s_lo) - c * ((s_hi + c) / (s_lo + c)).ln()) / b
    };
    let x_cruise = vc * vc / (2.0 * a);
    let u_brake = ((vc - c).max(0.0)).powi(2) / (2.0 * b);
    if x_cruise + u_brake <= d {
        let cruise_end = d - u_brake.max(goal_radius);
        let mut t = ramp(x_cruise) + (cruise_end - x_cruise) / vc;
        if u_brake > goal_radius {
            t += approach(u_brake, goal_radius);
        }
        return t;
    }
    // ramp meets the approach law before cruise speed
    let gap = |x: f64| (2.0 * a * x).sqrt() - (2.0 * b * (d - x)).sqrt() - c;
    let (mut lo, mut hi) = (0.0, d);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x_meet = 0.5 * (lo + hi);
    if d - x_meet <= goal_radius {
        ramp(d - goal_radius)
    } else {
        ramp(x_meet) + approach(d - x_meet, goal_radius)
    }
}

/// Tasks on `world` that the stub steers directly from start to goal:
/// separation in `distance`, heading change within ±π/4.
pub fn stub_reachable_tasks(
    world: &WorldMap,
    steering: &dyn Steering,
    n: usize,
    distance: (f64, f64),
    seed: u64,
) -> Vec<(RobotState, RobotState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = *world.vehicle();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = RobotState::at_rest(
            rng.random_range(0.0..world.width()),
            rng.random_range(0.0..world.height()),
            rng.random_range(-PI..PI),
        );
        let d = rng.random_range(distance.0..=distance.1);
        let bearing = start.theta + rng.random_range(-FRAC_PI_4..=FRAC_PI_4);
        let goal = RobotState::at_rest(
            start.x + d * bearing.cos(),
            start.y + d * bearing.sin(),
            start.theta + rng.random_range(-FRAC_PI_4..=FRAC_PI_4),
        );
        if !world.is_free_static(&start, &p) || !world.is_free_static(&goal, &p) {
            continue;
        }
        if steering.steer_to(&start, &goal, world).reached() {
            out.push((start, goal));
        }
    }
    out
}
