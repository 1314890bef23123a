use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kinoplan::plan::{astar_plan, check_plan, rrt_plan, AstarConfig, Plan, PlannerKind, RrtConfig};
use kinoplan::policy::PolicyParams;
use kinoplan::ppo::curriculum_train;
use kinoplan::steer::{RlSteer, SteerConfig, Steering, StubSteer};
use kinoplan_bench::harness::{aggregate, run_benchmark_cells, write_records, BenchOptions, PlannerSet};
use kinoplan_bench::render::render_svg;
use kinoplan_bench::scenario::{resolve_map, Suite, TaskSpec};
use kinoplan_bench::training::TrainSettings;

#[derive(Parser)]
#[command(name = "kinoplan", version, about = "Time-aware kinodynamic planning for a car-like robot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the steering policy with the staged curriculum.
    Train(TrainArgs),
    /// Plan a single query and write the validated plan.
    Plan(PlanArgs),
    /// Run a benchmark suite and write records and aggregates.
    Bench(BenchArgs),
    /// Draw a map and optionally a plan as SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training settings file (JSON); defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Environment steps allowed per curriculum stage.
    #[arg(long)]
    stage_budget: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SteerKind {
    Policy,
    Stub,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Rrt,
    Astar,
}

impl From<PlannerArg> for PlannerKind {
    fn from(p: PlannerArg) -> Self {
        match p {
            PlannerArg::Rrt => PlannerKind::Rrt,
            PlannerArg::Astar => PlannerKind::Astar,
        }
    }
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long, value_enum, default_value_t = SteerKind::Stub)]
    steer: SteerKind,
    /// Policy weights, required with `--steer policy`.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// `builtin:<name>` or a map file.
    #[arg(long)]
    map: String,
    /// Task file or inline JSON: `{"start":[x,y,theta],"goal":[x,y,theta]}`.
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value_t = PlannerArg::Rrt)]
    planner: PlannerArg,
    #[command(flatten)]
    steer: SteerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// `builtin:desk` or a suite file.
    #[arg(long, default_value = "builtin:desk")]
    suite: String,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [PlannerArg::Rrt, PlannerArg::Astar])]
    planners: Vec<PlannerArg>,
    /// Overrides the suite's repetition count.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    steer: SteerArgs,
    /// Overrides the suite's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Leave runtimes out so that records are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    /// Also write every successful plan under `<out-dir>/plans`.
    #[arg(long)]
    save_plans: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    plan: Option<PathBuf>,
    /// `builtin:<name>` or a map file.
    #[arg(long)]
    map: String,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// No plan was found (exit 1).
    Planning(String),
    /// Anything wrong with the inputs or outputs (exit 2).
    Input(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Plan(a) => plan(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Planning(msg)) => {
            eprintln!("planning failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn steering(args: &SteerArgs) -> anyhow::Result<Box<dyn Steering>> {
    let cfg = SteerConfig::default();
    match args.steer {
        SteerKind::Stub => Ok(Box::new(StubSteer::new(cfg))),
        SteerKind::Policy => {
            let Some(path) = &args.weights else {
                bail!("--steer policy needs --weights");
            };
            let params = PolicyParams::load(path).with_context(|| format!("loading {}", path.display()))?;
            if params.shape().obs_dim != cfg.obs.dim() {
                bail!(
                    "{}: network takes {} observation entries, steering produces {}",
                    path.display(),
                    params.shape().obs_dim,
                    cfg.obs.dim()
                );
            }
            Ok(Box::new(RlSteer::new(params, cfg)))
        }
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut settings = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainSettings>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainSettings::default(),
    };
    if a.stage_budget.is_some() {
        settings.stage_budget = a.stage_budget;
    }
    let cfg = settings.build();
    let (params, report) = curriculum_train(&cfg, a.seed, Some(&a.out_dir)).context("training")?;
    params
        .save(a.out_dir.join("final.kpw"))
        .context("saving final weights")?;
    let summary = serde_json::to_string_pretty(&report).context("serializing the report")?;
    write(&a.out_dir.join("report.json"), &summary)?;
    println!(
        "converged: {}  stages passed: {:?}  steps: {}  best success rate: {:.3}",
        report.converged, report.stages_passed, report.total_steps, report.best_success_rate
    );
    if !report.converged {
        log::warn!("curriculum did not complete within the stage budget");
    }
    Ok(())
}

fn read_task(arg: &str) -> anyhow::Result<TaskSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading task file {arg}"))?
    };
    serde_json::from_str(&text).context("parsing task")
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let world = resolve_map(&a.map)?;
    let task = read_task(&a.task)?;
    let steer = steering(&a.steer)?;
    let (start, goal) = (task.start_state(), task.goal_state());
    let report = match PlannerKind::from(a.planner) {
        PlannerKind::Rrt => {
            let cfg = RrtConfig {
                seed: a.seed,
                ..RrtConfig::default()
            };
            rrt_plan(&start, &goal, &world, steer.as_ref(), &cfg)
        }
        PlannerKind::Astar => astar_plan(&start, &goal, &world, steer.as_ref(), &AstarConfig::default()),
    }
    ?;
    let Some(plan) = report.plan else {
        return Err(Failure::Planning(format!("no plan within {} samples", report.samples)));
    };
    check_plan(&plan, &world, world.vehicle()).map_err(|d| Failure::Input(anyhow::anyhow!("plan failed validation: {d}")))?;
    write(&a.out, &plan.to_json())?;
    println!("ttr {:.2} s, {} samples, {:.2} s", plan.ttr(), plan.samples, plan.runtime_s);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let mut suite = Suite::load(&a.suite)?;
    if let Some(seed) = a.seed {
        suite.seed = seed;
    }
    let kinds: Vec<PlannerKind> = a.planners.iter().map(|&p| p.into()).collect();
    let steer = steering(&a.steer)?;
    let opts = BenchOptions {
        record_timing: !a.no_timing,
        reps: a.reps,
    };
    let scenarios = suite.scenarios();
    let cells = run_benchmark_cells(&PlannerSet::from_kinds(&kinds), &scenarios, steer.as_ref(), &opts)?;
    make_dir(&a.out_dir)?;
    let records: Vec<_> = cells.iter().map(|c| c.record.clone()).collect();
    let path = a.out_dir.join("records.csv");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_records(&records, file)?;
    let table = aggregate(&records);
    let json = serde_json::to_string_pretty(&table).context("serializing aggregates")?;
    write(&a.out_dir.join("aggregates.json"), &json)?;
    if a.save_plans {
        let dir = a.out_dir.join("plans");
        make_dir(&dir)?;
        for c in &cells {
            if let Some(p) = &c.plan {
                let r = &c.record;
                write(&dir.join(format!("{}-{}-r{}.json", r.planner, r.scenario, r.rep)), &p.to_json())?;
            }
        }
    }
    for (planner, agg) in &table.by_planner {
        println!(
            "{planner}: SR {:.3} ({}/{}), mean TTR {}",
            agg.success_rate,
            agg.successes,
            agg.runs,
            agg.mean_ttr_s.map_or("-".into(), |t| format!("{t:.2} s"))
        );
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    let world = resolve_map(&a.map)?;
    let plan = match &a.plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(Plan::from_json(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => None,
    };
    render_svg(&world, plan.as_ref(), &a.out)?;
    Ok(())
}
