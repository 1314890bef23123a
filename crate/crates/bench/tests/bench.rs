use std::process::Command;

use kinoplan::plan::{astar_plan, rrt_plan, validate_plan, AstarConfig, Plan, PlannerKind, RrtConfig};
use kinoplan::steer::{SteerConfig, StubSteer};
use kinoplan::world::{save_map, Motion, ObstacleTrack, WorldMap};
use kinoplan::{Pose2, VehicleParams};
use kinoplan_bench::fixtures::straight_corridors;
use kinoplan_bench::harness::*;
use kinoplan_bench::render::{svg_document, RenderStyle};
use kinoplan_bench::scenario::*;

fn stub() -> StubSteer {
    StubSteer::new(SteerConfig::default())
}

fn boxed_goal_map() -> WorldMap {
    let ring = vec![
        ObstacleTrack::fixed(Pose2::new(30.0, 36.0, 0.0), 6.0, 1.0),
        ObstacleTrack::fixed(Pose2::new(30.0, 24.0, 0.0), 6.0, 1.0),
        ObstacleTrack::fixed(Pose2::new(24.0, 30.0, 0.0), 1.0, 6.0),
        ObstacleTrack::fixed(Pose2::new(36.0, 30.0, 0.0), 1.0, 6.0),
    ];
    WorldMap::new(40.0, 40.0, true, VehicleParams::default(), ring, vec![]).unwrap()
}

#[test]
fn traffic_is_deterministic_and_resampled_on_the_grid() {
    let map = parking_a();
    let p = VehicleParams::default();
    let a = gen_dynamic_obstacles(5, &map, &p, 99);
    assert_eq!(a, gen_dynamic_obstacles(5, &map, &p, 99));
    assert_ne!(a, gen_dynamic_obstacles(5, &map, &p, 100));
    assert_eq!(a.len(), 5);
    let period = RESAMPLE_STEPS as f64 * p.dt;
    for track in &a {
        let Motion::ControlScript(script) = &track.motion else {
            panic!("traffic is control-scripted");
        };
        assert!(script.horizon() >= SCRIPT_HORIZON);
        for (t, c) in script.controls() {
            let k = t / period;
            assert!((k - k.round()).abs() < 1e-9, "control change at {t}");
            assert!(c.a.abs() <= p.a_max && c.omega.abs() <= p.omega_max);
        }
        let s = script.initial();
        assert!((p.v_min..=p.v_max).contains(&s.v));
        let body = track.obb_at(0.0);
        assert!(map.static_boxes().iter().all(|b| !kinoplan::geom::obb_overlap(&body, b)));
        let end = script.state_at(SCRIPT_HORIZON);
        assert!(end.v >= p.v_min - 1e-9 && end.v <= p.v_max + 1e-9);
    }
}

#[test]
fn records_and_aggregates_agree() {
    let dir = tempfile::tempdir().unwrap();
    let map_path = dir.path().join("empty.json");
    save_map(&WorldMap::empty(40.0, 40.0, true), &map_path).unwrap();
    let tasks = (0..10)
        .map(|i| SuiteTask {
            map: 0,
            task: TaskSpec {
                start: [6.0, 4.0 + 3.0 * i as f64, 0.0],
                goal: [26.0 + i as f64, 8.0 + 2.5 * i as f64, 0.3],
            },
        })
        .collect();
    let suite = Suite {
        name: "empty".into(),
        maps: vec![map_path.display().to_string()],
        tasks,
        n_dynamic: vec![0],
        reps: 5,
        seed: 3,
    };
    let planners = PlannerSet::from_kinds(&[PlannerKind::Rrt]);
    let opts = BenchOptions {
        record_timing: false,
        reps: None,
    };
    let records = run_benchmark(&planners, &suite.scenarios(), &stub(), &opts).unwrap();
    assert_eq!(records.len(), 50);
    for r in &records {
        assert_eq!(r.ttr_s.is_some(), r.success);
        assert_eq!(r.reason.is_empty(), r.success);
        assert!(r.runtime_s.is_none());
    }
    let mut csv = Vec::new();
    write_records(&records, &mut csv).unwrap();
    let back = read_records(csv.as_slice()).unwrap();
    assert_eq!(back, records);

    let table = aggregate(&back);
    let rrt = &table.by_planner["rrt"];
    let successes = back.iter().filter(|r| r.success).count();
    assert_eq!(rrt.runs, 50);
    assert_eq!(rrt.success_rate, successes as f64 / 50.0);
    let ttrs: Vec<f64> = back.iter().filter_map(|r| r.ttr_s).collect();
    let mean = ttrs.iter().sum::<f64>() / ttrs.len() as f64;
    assert!((rrt.mean_ttr_s.unwrap() - mean).abs() < 1e-9);
    assert_eq!(table.by_scenario.len(), 10);
    assert_eq!(table.by_scenario.values().map(|a| a.runs).sum::<usize>(), 50);
}

#[test]
fn impossible_scenario_scores_zero_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let map_path = dir.path().join("ring.json");
    save_map(&boxed_goal_map(), &map_path).unwrap();
    let suite = Suite {
        name: "ring".into(),
        maps: vec![map_path.display().to_string()],
        tasks: vec![SuiteTask {
            map: 0,
            task: TaskSpec {
                start: [5.0, 5.0, 0.0],
                goal: [30.0, 30.0, 0.0],
            },
        }],
        n_dynamic: vec![0],
        reps: 2,
        seed: 1,
    };
    let planners = PlannerSet {
        rrt: Some(RrtConfig {
            n_max: 200,
            ..RrtConfig::default()
        }),
        astar: Some(AstarConfig {
            n_max: 200,
            ..AstarConfig::default()
        }),
    };
    let records = run_benchmark(&planners, &suite.scenarios(), &stub(), &BenchOptions::default()).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| !r.success && !r.reason.is_empty()));
    let table = aggregate(&records);
    assert!(table.by_planner.values().all(|a| a.success_rate == 0.0 && a.mean_ttr_s.is_none()));
}

fn corridor_plan() -> (WorldMap, Plan) {
    let c = &straight_corridors(3)[1];
    let plan = astar_plan(&c.start, &c.goal, &c.world, &stub(), &AstarConfig::default())
        .unwrap()
        .plan
        .unwrap();
    (c.world.clone(), plan)
}

#[test]
fn svg_of_a_bare_map_is_well_formed() {
    let world = parking_b().with_dynamics(gen_dynamic_obstacles(3, &parking_b(), &VehicleParams::default(), 4));
    let svg = svg_document(&world, None, &RenderStyle::default());
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let polygons = doc.descendants().filter(|n| n.has_tag_name("polygon")).count();
    assert_eq!(polygons, world.statics().len() + 3);
    assert!(!doc.descendants().any(|n| n.has_tag_name("polyline")));
}

#[test]
fn svg_is_deterministic_and_the_path_fits_the_viewport() {
    let (world, plan) = corridor_plan();
    let style = RenderStyle::default();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    kinoplan_bench::render::render_svg(&world, Some(&plan), &a).unwrap();
    kinoplan_bench::render::render_svg(&world, Some(&plan), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let svg = svg_document(&world, Some(&plan), &style);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let root = doc.root_element();
    let view: Vec<f64> = root.attribute("viewBox").unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    let line = doc.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
    let pts: Vec<(f64, f64)> = line
        .attribute("points")
        .unwrap()
        .split(' ')
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    assert_eq!(pts.len(), plan.trajectory.states.len());
    for (x, y) in pts {
        assert!(x >= view[0] && x <= view[0] + view[2] && y >= view[1] && y <= view[1] + view[3]);
    }
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kinoplan"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn plan_command_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("ring.json");
    save_map(&boxed_goal_map(), &map).unwrap();
    let out = dir.path().join("plan.json");
    let run = |task: &str, map: &str| {
        cli()
            .args(["plan", "--map", map, "--task", task, "--planner", "rrt", "--seed", "3", "--out"])
            .arg(&out)
            .status()
            .unwrap()
            .code()
    };
    let map_s = map.display().to_string();
    assert_eq!(run(r#"{"start":[5,5,0],"goal":[18,8,0.2]}"#, &map_s), Some(0));
    let plan = Plan::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let world = boxed_goal_map();
    assert!(validate_plan(&plan, &world, world.vehicle()));
    let direct = rrt_plan(
        &plan.start,
        &plan.goal,
        &world,
        &stub(),
        &RrtConfig {
            seed: 3,
            ..RrtConfig::default()
        },
    )
    .unwrap()
    .plan
    .unwrap();
    assert_eq!(direct.trajectory, plan.trajectory);

    assert_eq!(run(r#"{"start":[5,5,0],"goal":[30,30,0]}"#, &map_s), Some(1));
    assert_eq!(run(r#"{"start":[5,5,0]}"#, &map_s), Some(2));
    assert_eq!(run(r#"{"start":[5,5,0],"goal":[18,8,0]}"#, "builtin:nowhere"), Some(2));
    assert_eq!(run(r#"{"start":[0.5,5,0],"goal":[18,8,0]}"#, &map_s), Some(2));
    let policy = cli()
        .args(["plan", "--map", "builtin:parking_a", "--task", r#"{"start":[6,15,0],"goal":[30,15,0]}"#])
        .args(["--steer", "policy", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(policy.code(), Some(2));
}

#[test]
fn render_command_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let (world, plan) = corridor_plan();
    let (map, plan_path, svg) = (dir.path().join("map.json"), dir.path().join("plan.json"), dir.path().join("out.svg"));
    save_map(&world, &map).unwrap();
    std::fs::write(&plan_path, plan.to_json()).unwrap();
    let status = cli()
        .args(["render", "--map"])
        .arg(&map)
        .arg("--plan")
        .arg(&plan_path)
        .arg("--out")
        .arg(&svg)
        .status()
        .unwrap();
    assert!(status.success());
    roxmltree::Document::parse(&std::fs::read_to_string(&svg).unwrap()).unwrap();
}
