//! Benchmark runs, per-run records and aggregate tables.

use std::collections::BTreeMap;
use std::io;
use std::sync::Arc;

use kinoplan::plan::{astar_plan, check_plan, rrt_plan, AstarConfig, Plan, PlanError, PlannerKind, RrtConfig};
use kinoplan::steer::Steering;
use kinoplan::world::WorldMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::{resolve_map, Scenario};
use crate::BenchError;

pub const RECORDS_HEADER: [&str; 8] = ["planner", "scenario", "rep", "success", "ttr_s", "samples", "runtime_s", "reason"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub planner: String,
    pub scenario: String,
    pub rep: usize,
    pub success: bool,
    /// Present iff `success`.
    pub ttr_s: Option<f64>,
    pub samples: usize,
    /// Absent when timing is disabled.
    pub runtime_s: Option<f64>,
    /// Empty on success.
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerSet {
    pub rrt: Option<RrtConfig>,
    pub astar: Option<AstarConfig>,
}

impl PlannerSet {
    pub fn both() -> Self {
        Self {
            rrt: Some(RrtConfig::default()),
            astar: Some(AstarConfig::default()),
        }
    }

    pub fn from_kinds(kinds: &[PlannerKind]) -> Self {
        Self {
            rrt: kinds.contains(&PlannerKind::Rrt).then(RrtConfig::default),
            astar: kinds.contains(&PlannerKind::Astar).then(AstarConfig::default),
        }
    }

    fn kinds(&self) -> Vec<PlannerKind> {
        let mut k = Vec::new();
        if self.rrt.is_some() {
            k.push(PlannerKind::Rrt);
        }
        if self.astar.is_some() {
            k.push(PlannerKind::Astar);
        }
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub record_timing: bool,
    /// Overrides every scenario's repetition count.
    pub reps: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            record_timing: true,
            reps: None,
        }
    }
}

/// A validated plan from one benchmark cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub record: RunRecord,
    pub plan: Option<Plan>,
}

/// Runs one planner on one scenario repetition and validates the result.
pub fn run_cell(
    kind: PlannerKind,
    planners: &PlannerSet,
    scenario: &Scenario,
    world: &WorldMap,
    rep: usize,
    steering: &dyn Steering,
    opts: &BenchOptions,
) -> CellOutcome {
    let start = scenario.task.start_state();
    let goal = scenario.task.goal_state();
    let seed = scenario.rep_seed(rep);
    let budget = match kind {
        PlannerKind::Rrt => planners.rrt.map_or(0, |c| c.n_max),
        PlannerKind::Astar => planners.astar.map_or(0, |c| c.n_max),
    };
    let result = match kind {
        PlannerKind::Rrt => {
            let cfg = RrtConfig {
                seed,
                ..planners.rrt.expect("rrt configured")
            };
            rrt_plan(&start, &goal, world, steering, &cfg)
        }
        PlannerKind::Astar => astar_plan(&start, &goal, world, steering, &planners.astar.expect("astar configured")),
    };
    let mut record = RunRecord {
        planner: kind.name().to_string(),
        scenario: scenario.id.clone(),
        rep,
        success: false,
        ttr_s: None,
        samples: 0,
        runtime_s: None,
        reason: String::new(),
    };
    let mut plan_out = None;
    match result {
        Err(PlanError::StartInCollision) => record.reason = "start_in_collision".into(),
        Err(e) => record.reason = format!("error: {e}"),
        Ok(report) => {
            record.samples = report.samples;
            record.runtime_s = opts.record_timing.then_some(report.runtime_s);
            match report.plan {
                None if report.samples >= budget => record.reason = "budget_exhausted".into(),
                None => record.reason = "search_exhausted".into(),
                Some(plan) => match check_plan(&plan, world, world.vehicle()) {
                    Err(defect) => record.reason = format!("invalid_plan: {defect}"),
                    Ok(()) => {
                        let mut plan = plan;
                        if !opts.record_timing {
                            plan.runtime_s = 0.0;
                        }
                        record.success = true;
                        record.ttr_s = Some(plan.ttr());
                        plan_out = Some(plan);
                    }
                },
            }
        }
    }
    CellOutcome { record, plan: plan_out }
}

/// Runs every (planner, scenario, repetition) cell. Cells run in parallel;
/// outcomes come back in scenario, repetition, planner order.
pub fn run_benchmark_cells(
    planners: &PlannerSet,
    scenarios: &[Scenario],
    steering: &dyn Steering,
    opts: &BenchOptions,
) -> Result<Vec<CellOutcome>, BenchError> {
    let mut bases: BTreeMap<&str, Arc<WorldMap>> = BTreeMap::new();
    for s in scenarios {
        if !bases.contains_key(s.map.as_str()) {
            bases.insert(&s.map, Arc::new(resolve_map(&s.map)?));
        }
    }
    let kinds = planners.kinds();
    let mut cells = Vec::new();
    for s in scenarios {
        for rep in 0..opts.reps.unwrap_or(s.reps) {
            for &k in &kinds {
                cells.push((s, rep, k));
            }
        }
    }
    Ok(cells
        .par_iter()
        .map(|&(s, rep, kind)| {
            let world = s.world(&bases[s.map.as_str()], rep);
            run_cell(kind, planners, s, &world, rep, steering, opts)
        })
        .collect())
}

pub fn run_benchmark(
    planners: &PlannerSet,
    scenarios: &[Scenario],
    steering: &dyn Steering,
    opts: &BenchOptions,
) -> Result<Vec<RunRecord>, BenchError> {
    Ok(run_benchmark_cells(planners, scenarios, steering, opts)?
        .into_iter()
        .map(|c| c.record)
        .collect())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_records<W: io::Write>(records: &[RunRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORDS_HEADER)?;
    for r in records {
        w.write_record([
            r.planner.clone(),
            r.scenario.clone(),
            r.rep.to_string(),
            r.success.to_string(),
            opt_cell(r.ttr_s),
            r.samples.to_string(),
            opt_cell(r.runtime_s),
            r.reason.clone(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records<R: io::Read>(input: R) -> Result<Vec<RunRecord>, BenchError> {
    let mut rd = csv::Reader::from_reader(input);
    let bad = |line: usize, what: &str| BenchError::Records(format!("row {line}: bad {what}"));
    let opt = |s: &str| -> Option<Result<f64, std::num::ParseFloatError>> { (!s.is_empty()).then(|| s.parse()) };
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        if row.len() != RECORDS_HEADER.len() {
            return Err(bad(i + 1, "column count"));
        }
        out.push(RunRecord {
            planner: row[0].to_string(),
            scenario: row[1].to_string(),
            rep: row[2].parse().map_err(|_| bad(i + 1, "rep"))?,
            success: row[3].parse().map_err(|_| bad(i + 1, "success"))?,
            ttr_s: opt(&row[4]).transpose().map_err(|_| bad(i + 1, "ttr_s"))?,
            samples: row[5].parse().map_err(|_| bad(i + 1, "samples"))?,
            runtime_s: opt(&row[6]).transpose().map_err(|_| bad(i + 1, "runtime_s"))?,
            reason: row[7].to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over successful runs.
    pub mean_ttr_s: Option<f64>,
    pub mean_samples: f64,
    pub mean_runtime_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub by_planner: BTreeMap<String, Aggregate>,
    /// Keyed `planner/scenario`.
    pub by_scenario: BTreeMap<String, Aggregate>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate_records(records: &[&RunRecord]) -> Aggregate {
    let runs = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    Aggregate {
        runs,
        successes,
        success_rate: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
        mean_ttr_s: mean(records.iter().filter_map(|r| r.ttr_s)),
        mean_samples: mean(records.iter().map(|r| r.samples as f64)).unwrap_or(0.0),
        mean_runtime_s: mean(records.iter().filter_map(|r| r.runtime_s)),
    }
}

pub fn aggregate(records: &[RunRecord]) -> AggregateTable {
    let mut by_planner: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    let mut by_scenario: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_planner.entry(r.planner.clone()).or_default().push(r);
        by_scenario.entry(format!("{}/{}", r.planner, r.scenario)).or_default().push(r);
    }
    AggregateTable {
        by_planner: by_planner.into_iter().map(|(k, v)| (k, aggregate_records(&v))).collect(),
        by_scenario: by_scenario.into_iter().map(|(k, v)| (k, aggregate_records(&v))).collect(),
    }
}
