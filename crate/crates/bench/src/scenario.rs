//! Benchmark scenarios: maps, tasks, scripted traffic and suite files.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use kinoplan::vehicle::footprint;
use kinoplan::world::{load_map, ControlScript, Motion, ObstacleTrack, WorldMap};
use kinoplan::{geom::obb_overlap, Control, Pose2, RobotState, VehicleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Simulation steps between control resamples of scripted traffic.
pub const RESAMPLE_STEPS: usize = 10;
/// Seconds of scripted traffic motion.
pub const SCRIPT_HORIZON: f64 = 120.0;
/// Distance kept between generated traffic and the task's start and goal, meters.
pub const KEEP_CLEAR: f64 = 8.0;

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Seed for the `index`-th item of a family derived from `seed` (splitmix64).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` robot-shaped obstacles driven by random controls, resampled every
/// [`RESAMPLE_STEPS`] steps within the vehicle's control bounds.
pub fn gen_dynamic_obstacles(n: usize, map: &WorldMap, params: &VehicleParams, seed: u64) -> Vec<ObstacleTrack> {
    gen_dynamic_obstacles_clear_of(n, map, params, seed, &[])
}

/// Like [`gen_dynamic_obstacles`], with initial poses kept [`KEEP_CLEAR`]
/// meters away from the given states and not touching their footprints.
pub fn gen_dynamic_obstacles_clear_of(
    n: usize,
    map: &WorldMap,
    params: &VehicleParams,
    seed: u64,
    keep_clear: &[RobotState],
) -> Vec<ObstacleTrack> {
    (0..n)
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            scripted_obstacle(&mut rng, map, params, keep_clear)
        })
        .collect()
}

fn scripted_obstacle(
    rng: &mut ChaCha8Rng,
    map: &WorldMap,
    params: &VehicleParams,
    keep_clear: &[RobotState],
) -> Option<ObstacleTrack> {
    let robot = map.vehicle();
    let initial = (0..MAX_PLACEMENT_TRIES).find_map(|_| {
        let s = RobotState::new(
            rng.random_range(0.0..map.width()),
            rng.random_range(0.0..map.height()),
            rng.random_range(-PI..PI),
            rng.random_range(params.v_min..=params.v_max),
            0.0,
            0.0,
        );
        let body = kinoplan::Obb::from_pose(&s.pose(), params.half_length, params.half_width);
        let clear = map.static_boxes().iter().all(|b| !obb_overlap(&body, b))
            && keep_clear.iter().all(|k| {
                k.position().distance(s.position()) >= KEEP_CLEAR && !obb_overlap(&body, &footprint(k, robot))
            });
        clear.then_some(s)
    })?;
    let period = RESAMPLE_STEPS as f64 * params.dt;
    let n_controls = (SCRIPT_HORIZON / period).ceil() as usize;
    let controls = (0..n_controls)
        .map(|k| {
            let c = Control::new(
                rng.random_range(-params.a_max..=params.a_max),
                rng.random_range(-params.omega_max..=params.omega_max),
            );
            (k as f64 * period, c)
        })
        .collect();
    let script = ControlScript::new(initial, controls, *params, SCRIPT_HORIZON).expect("valid script");
    Some(ObstacleTrack::new(params.half_length, params.half_width, Motion::ControlScript(script)).expect("positive extent"))
}

// ---------------------------------------------------------------------------
// Built-in maps

pub const BUILTIN_PREFIX: &str = "builtin:";
pub const BUILTIN_MAPS: [&str; 2] = ["parking_a", "parking_b"];

const CAR_HALF_LENGTH: f64 = 2.25;
const CAR_HALF_WIDTH: f64 = 1.0;
const SLOT_PITCH: f64 = 2.8;

fn car(x: f64, y: f64, theta: f64) -> ObstacleTrack {
    ObstacleTrack::fixed(Pose2::new(x, y, theta), CAR_HALF_LENGTH, CAR_HALF_WIDTH)
}

/// A row of perpendicular parking slots centered at `y`, from `x0` to `x1`;
/// slot `k` stays empty when `empty(k)`.
fn slot_row(x0: f64, x1: f64, y: f64, empty: impl Fn(usize) -> bool) -> Vec<ObstacleTrack> {
    let n = ((x1 - x0) / SLOT_PITCH).floor() as usize;
    (0..n)
        .filter(|&k| !empty(k))
        .map(|k| car(x0 + (k as f64 + 0.5) * SLOT_PITCH, y, FRAC_PI_2))
        .collect()
}

/// 100×60 m lot: slots along both long walls and a double row in the
/// middle, split by a cross aisle.
pub fn parking_a() -> WorldMap {
    let mut statics = Vec::new();
    statics.extend(slot_row(4.0, 96.0, 2.75, |k| k % 7 == 3));
    statics.extend(slot_row(4.0, 96.0, 57.25, |k| k % 5 == 1));
    for y in [27.75, 32.25] {
        statics.extend(slot_row(10.0, 44.0, y, |k| k % 6 == 2));
        statics.extend(slot_row(56.0, 90.0, y, |k| k % 4 == 0));
    }
    WorldMap::new(100.0, 60.0, true, VehicleParams::default(), statics, vec![]).expect("valid layout")
}

/// 100×60 m lot: three islands of double rows with aisles between them and a
/// row of parallel-parked cars along the bottom wall.
pub fn parking_b() -> WorldMap {
    let mut statics = Vec::new();
    for (x0, x1) in [(6.0, 30.0), (38.0, 62.0), (70.0, 94.0)] {
        for y in [19.75, 24.25] {
            statics.extend(slot_row(x0, x1, y, |k| (k + y as usize).is_multiple_of(5)));
        }
        for y in [39.75, 44.25] {
            statics.extend(slot_row(x0, x1, y, |k| (k + y as usize).is_multiple_of(3)));
        }
    }
    let mut x = 8.0;
    while x < 92.0 {
        statics.push(car(x, 2.0, 0.0));
        x += 7.5;
    }
    WorldMap::new(100.0, 60.0, true, VehicleParams::default(), statics, vec![]).expect("valid layout")
}

/// Resolves `builtin:<name>` or a map file path.
pub fn resolve_map(reference: &str) -> Result<WorldMap, BenchError> {
    if let Some(name) = reference.strip_prefix(BUILTIN_PREFIX) {
        return match name {
            "parking_a" => Ok(parking_a()),
            "parking_b" => Ok(parking_b()),
            _ => Err(BenchError::UnknownBuiltin(reference.to_string())),
        };
    }
    load_map(reference).map_err(|e| BenchError::Map {
        reference: reference.to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Tasks, scenarios and suites

/// Start and goal poses as `[x, y, theta]`; both at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub start: [f64; 3],
    pub goal: [f64; 3],
}

impl TaskSpec {
    pub fn start_state(&self) -> RobotState {
        let [x, y, th] = self.start;
        RobotState::at_rest(x, y, th)
    }

    pub fn goal_state(&self) -> RobotState {
        let [x, y, th] = self.goal;
        RobotState::at_rest(x, y, th)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTask {
    /// Index into the suite's map list.
    pub map: usize,
    #[serde(flatten)]
    pub task: TaskSpec,
}

/// Benchmark suite: every task is run with every obstacle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    /// Map references: `builtin:<name>` or a map file path.
    pub maps: Vec<String>,
    pub tasks: Vec<SuiteTask>,
    pub n_dynamic: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub map: String,
    pub task: TaskSpec,
    pub n_dynamic: usize,
    pub obstacle_seed: u64,
    pub reps: usize,
}

impl Scenario {
    /// Seed of repetition `rep`, used for its traffic and planner randomness.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.obstacle_seed, rep as u64)
    }

    /// The scenario's world for one repetition, traffic included.
    pub fn world(&self, base: &WorldMap, rep: usize) -> WorldMap {
        let start = self.task.start_state();
        let goal = self.task.goal_state();
        let traffic =
            gen_dynamic_obstacles_clear_of(self.n_dynamic, base, base.vehicle(), self.rep_seed(rep), &[start, goal]);
        base.clone().with_dynamics(traffic)
    }
}

impl Suite {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let suite: Suite = serde_json::from_str(text).map_err(|e| BenchError::Suite(e.to_string()))?;
        suite.check()?;
        Ok(suite)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    /// Reads `builtin:desk` or a suite file.
    pub fn load(reference: &str) -> Result<Self, BenchError> {
        if reference == "builtin:desk" {
            return Ok(desk_suite());
        }
        let text = fs::read_to_string(Path::new(reference)).map_err(|e| BenchError::Suite(format!("{reference}: {e}")))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<(), BenchError> {
        if self.maps.is_empty() || self.tasks.is_empty() || self.n_dynamic.is_empty() {
            return Err(BenchError::Suite("maps, tasks and n_dynamic must be non-empty".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.map >= self.maps.len()) {
            return Err(BenchError::Suite(format!("task refers to map {} of {}", t.map, self.maps.len())));
        }
        Ok(())
    }

    /// Scenarios in task-major, obstacle-count-minor order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for (ti, t) in self.tasks.iter().enumerate() {
            for &n in &self.n_dynamic {
                let idx = out.len() as u64;
                out.push(Scenario {
                    id: format!("m{}-t{}-n{}", t.map, ti, n),
                    map: self.maps[t.map].clone(),
                    task: t.task,
                    n_dynamic: n,
                    obstacle_seed: derive_seed(self.seed, idx),
                    reps: self.reps,
                });
            }
        }
        out
    }
}

/// Two lots, four long tasks each, 0/5/10/20 moving cars, five repetitions.
pub fn desk_suite() -> Suite {
    let t = |map, start, goal| SuiteTask {
        map,
        task: TaskSpec { start, goal },
    };
    Suite {
        name: "desk".into(),
        maps: BUILTIN_MAPS.iter().map(|m| format!("{BUILTIN_PREFIX}{m}")).collect(),
        tasks: vec![
            t(0, [6.0, 15.0, 0.0], [92.0, 15.0, 0.0]),
            t(0, [6.0, 45.0, 0.0], [90.0, 45.0, 0.0]),
            t(0, [8.0, 12.0, 0.0], [60.0, 45.0, 0.0]),
            t(0, [94.0, 15.0, PI], [30.0, 45.0, PI]),
            t(1, [6.0, 10.0, 0.0], [92.0, 10.0, 0.0]),
            t(1, [6.0, 32.0, 0.0], [94.0, 32.0, 0.0]),
            t(1, [8.0, 52.0, 0.0], [90.0, 32.0, 0.0]),
            t(1, [34.0, 8.0, FRAC_PI_2], [90.0, 52.0, 0.0]),
        ],
        n_dynamic: vec![0, 5, 10, 20],
        reps: 5,
        seed: 1,
    }
}
