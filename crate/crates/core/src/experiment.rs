//! Config-driven experiment runner and its file outputs.
//!
//! A config is a TOML document with `[problem]`, `[solver]`, `[baseline]`
//! and `[run]` tables. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchmarks::quadrotor::{self, ObstacleVariant, QuadrotorParams, QuadrotorTask};
use crate::benchmarks::toy2d::Toy2D;
use crate::error::{Error, Result};
use crate::mpc::{receding_horizon, CsvtoPlanner, MpcTrace, RunStatus};
use crate::mppi::{MppiConfig, MppiPlanner};
use crate::problem::{ProblemDef, TrajectoryParticle};
use crate::solver::{solve, SolveResult, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Toy2D,
    Quadrotor(ObstacleVariant),
}

pub const PROBLEM_NAMES: [&str; 4] = ["toy2d", "quadrotor-none", "quadrotor-static", "quadrotor-dynamic"];

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy2d" => Ok(Self::Toy2D),
            "quadrotor-none" => Ok(Self::Quadrotor(ObstacleVariant::None)),
            "quadrotor-static" => Ok(Self::Quadrotor(ObstacleVariant::Static)),
            "quadrotor-dynamic" => Ok(Self::Quadrotor(ObstacleVariant::Dynamic)),
            other => Err(Error::InvalidConfig(format!(
                "unknown problem `{other}` (expected one of: {})",
                PROBLEM_NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Toy2D => "toy2d",
            Self::Quadrotor(ObstacleVariant::None) => "quadrotor-none",
            Self::Quadrotor(ObstacleVariant::Static) => "quadrotor-static",
            Self::Quadrotor(ObstacleVariant::Dynamic) => "quadrotor-dynamic",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Csvto,
    Mppi,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csvto" => Ok(Self::Csvto),
            "mppi" => Ok(Self::Mppi),
            other => Err(Error::InvalidConfig(format!("unknown solver `{other}` (expected csvto or mppi)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub name: String,
    pub dt: f64,
    pub likelihood_temperature: f64,
    pub goal_threshold: f64,
    pub horizon: usize,
    /// Fixed start `(x, y)`; sampled from the seed when absent.
    pub start: Option<[f64; 2]>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            name: "quadrotor-none".into(),
            dt: QuadrotorParams::default().dt,
            likelihood_temperature: quadrotor::LIKELIHOOD_TEMPERATURE,
            goal_threshold: quadrotor::GOAL_THRESHOLD,
            horizon: quadrotor::HORIZON,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub solver: SolverKind,
    pub steps: usize,
    pub seed: u64,
    /// Number of consecutive seeds run by `bench`, starting at `seed`.
    pub trials: usize,
    /// Write measured step times into `trace.csv`. Off by default so that
    /// traces are byte-identical across repeated runs.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Csvto,
            steps: 100,
            seed: 0,
            trials: 10,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub baseline: MppiConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_kind()?;
        self.solver.validate()?;
        self.baseline.validate()?;
        if !(self.problem.dt > 0.0) {
            return Err(Error::InvalidConfig("problem.dt must be positive".into()));
        }
        if !(self.problem.likelihood_temperature > 0.0) {
            return Err(Error::InvalidConfig("problem.likelihood_temperature must be positive".into()));
        }
        if self.problem.horizon < 2 {
            return Err(Error::InvalidConfig("problem.horizon must be >= 2".into()));
        }
        if self.run.trials < 1 {
            return Err(Error::InvalidConfig("run.trials must be >= 1".into()));
        }
        Ok(())
    }

    pub fn problem_kind(&self) -> Result<ProblemKind> {
        self.problem.name.parse()
    }

    pub fn quadrotor_task(&self, variant: ObstacleVariant) -> Result<QuadrotorTask> {
        let params = QuadrotorParams {
            dt: self.problem.dt,
            ..QuadrotorParams::default()
        };
        let mut task = QuadrotorTask::new(params, variant)?;
        task.horizon = self.problem.horizon;
        task.goal_threshold = self.problem.goal_threshold;
        task.likelihood_temperature = self.problem.likelihood_temperature;
        Ok(task)
    }

    /// The same config with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.run.seed = seed;
        cfg.solver.seed = seed;
        cfg.baseline.seed = seed;
        cfg
    }
}

/// Per-constraint violation summary over executed states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationSummary {
    pub name: String,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub problem: String,
    pub solver: SolverKind,
    pub seed: u64,
    pub completed: bool,
    pub failure: Option<String>,
    pub success: bool,
    pub final_distance: Option<f64>,
    pub goal_threshold: f64,
    pub collided: bool,
    pub steps: usize,
    pub violations: Vec<ViolationSummary>,
    pub total_wall_ms: f64,
    pub mean_step_ms: f64,
}

pub struct MpcReport {
    pub trace: MpcTrace,
    pub metrics: RunMetrics,
    pub state_names: Vec<String>,
    pub control_names: Vec<String>,
}

pub const QUADROTOR_STATE_NAMES: [&str; 12] = ["x", "y", "z", "p", "q", "r", "vx", "vy", "vz", "wp", "wq", "wr"];
pub const QUADROTOR_CONTROL_NAMES: [&str; 4] = ["u1", "u2", "u3", "u4"];

fn quadrotor_start(task: &QuadrotorTask, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match cfg.problem.start {
        Some([x, y]) => task.start_state(x, y),
        None => task.sample_start(rng),
    }
}

/// One receding-horizon run on a quadrotor problem.
pub fn run_mpc(cfg: &ExperimentConfig) -> Result<MpcReport> {
    let variant = match cfg.problem_kind()? {
        ProblemKind::Quadrotor(v) => v,
        ProblemKind::Toy2D => {
            return Err(Error::InvalidConfig(
                "toy2d has no dynamics; use `solve` instead of receding-horizon runs".into(),
            ))
        }
    };
    let task = cfg.quadrotor_task(variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let x0 = quadrotor_start(&task, cfg, &mut rng);
    let mut problem = task.problem(x0.clone(), 0.0);
    let mut env = task.env(x0);
    let start = Instant::now();
    let trace = match cfg.run.solver {
        SolverKind::Csvto => {
            let mut solver = cfg.solver.clone();
            solver.seed = cfg.run.seed;
            let init = task.initial_particles(&problem, solver.num_particles, &mut rng)?;
            let mut planner = CsvtoPlanner::new(solver, init)?;
            receding_horizon(&mut env, &mut problem, &mut planner, cfg.run.steps)
        }
        SolverKind::Mppi => {
            let mut baseline = cfg.baseline.clone();
            baseline.seed = cfg.run.seed;
            if baseline.noise_std.is_empty() {
                baseline.noise_std = task.control_std().iter().cloned().collect();
            }
            let mut nominal = DMatrix::zeros(task.horizon, quadrotor::CONTROL_DIM);
            nominal.column_mut(0).fill(task.params.hover_thrust());
            let mut planner = MppiPlanner::new(baseline, nominal)?;
            receding_horizon(&mut env, &mut problem, &mut planner, cfg.run.steps)
        }
    };
    let total_wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let metrics = mpc_metrics(cfg, &task, &trace, total_wall_ms);
    Ok(MpcReport {
        trace,
        metrics,
        state_names: QUADROTOR_STATE_NAMES.iter().map(|s| s.to_string()).collect(),
        control_names: QUADROTOR_CONTROL_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

fn mpc_metrics(cfg: &ExperimentConfig, task: &QuadrotorTask, trace: &MpcTrace, total_wall_ms: f64) -> RunMetrics {
    let violations: Vec<ViolationSummary> = trace
        .violation_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (mean, max) = trace.violation_stats(k, 0);
            ViolationSummary {
                name: name.clone(),
                mean,
                max,
            }
        })
        .collect();
    let collided = violations.iter().any(|v| v.name == "obstacle" && v.max > 0.0);
    let completed = trace.completed();
    let success = completed
        && !collided
        && trace.final_goal_distance.map_or(false, |d| d < task.goal_threshold);
    let step_ms: Vec<f64> = trace.steps.iter().map(|s| s.wall_time_ms).collect();
    RunMetrics {
        problem: cfg.problem.name.clone(),
        solver: cfg.run.solver,
        seed: cfg.run.seed,
        completed,
        failure: match &trace.status {
            RunStatus::Completed => None,
            RunStatus::Failed { step, message } => Some(format!("step {step}: {message}")),
        },
        success,
        final_distance: trace.final_goal_distance,
        goal_threshold: task.goal_threshold,
        collided,
        steps: trace.steps.len(),
        violations,
        total_wall_ms,
        mean_step_ms: if step_ms.is_empty() {
            0.0
        } else {
            step_ms.iter().sum::<f64>() / step_ms.len() as f64
        },
    }
}

pub struct SolveReport {
    pub result: SolveResult,
    pub problem: ProblemDef,
    pub metrics: Value,
    pub state_names: Vec<String>,
    pub control_names: Vec<String>,
}

/// One (warm-start) solve from freshly sampled particles.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<SolveReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut solver = cfg.solver.clone();
    solver.seed = cfg.run.seed;
    let kind = cfg.problem_kind()?;
    let (problem, init, state_names, control_names) = match kind {
        ProblemKind::Toy2D => {
            let problem = Toy2D::default().problem();
            let init: Vec<TrajectoryParticle> = (0..solver.num_particles)
                .map(|_| Toy2D::particle(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            (problem, init, vec!["x".to_string(), "y".to_string()], Vec::new())
        }
        ProblemKind::Quadrotor(v) => {
            let task = cfg.quadrotor_task(v)?;
            let x0 = quadrotor_start(&task, cfg, &mut rng);
            let problem = task.problem(x0, 0.0);
            let init = task.initial_particles(&problem, solver.num_particles, &mut rng)?;
            (
                problem,
                init,
                QUADROTOR_STATE_NAMES.iter().map(|s| s.to_string()).collect(),
                QUADROTOR_CONTROL_NAMES.iter().map(|s| s.to_string()).collect(),
            )
        }
    };
    let start = Instant::now();
    let result = solve(&problem, &init, solver.warm_start_iterations, solver.anneal, &solver)?;
    let total_wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut max_eq = 0.0f64;
    let mut max_ineq = f64::NEG_INFINITY;
    let mut max_aug = 0.0f64;
    for p in &result.particles {
        max_eq = problem.equality_values(&p.particle).iter().fold(max_eq, |m, v| m.max(v.abs()));
        max_ineq = problem.inequality_values(&p.particle).iter().fold(max_ineq, |m, v| m.max(*v));
        max_aug = problem.augmented_values(p)?.iter().fold(max_aug, |m, v| m.max(v.abs()));
    }
    let mut metrics = json!({
        "problem": kind.to_string(),
        "seed": cfg.run.seed,
        "iterations": solver.warm_start_iterations,
        "num_particles": result.particles.len(),
        "best_index": result.best_index,
        "penalties": result.penalties,
        "flagged": result.flagged,
        "max_equality_violation": max_eq,
        "max_inequality_value": if max_ineq.is_finite() { json!(max_ineq) } else { Value::Null },
        "max_augmented_violation": max_aug,
        "total_wall_ms": total_wall_ms,
        "config": cfg,
    });
    if kind == ProblemKind::Toy2D {
        let toy = Toy2D::default();
        let mut counts = [0usize; 3];
        for p in &result.particles {
            let s = p.particle.states();
            counts[toy.nearest_mode(&nalgebra::Vector2::new(s[(0, 0)], s[(0, 1)]))] += 1;
        }
        metrics["mode_counts"] = json!(counts);
    }
    Ok(SolveReport {
        result,
        problem,
        metrics,
        state_names,
        control_names,
    })
}

/// Aggregate of per-seed receding-horizon runs.
pub struct BenchReport {
    pub runs: Vec<MpcReport>,
    pub summary: Value,
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let seeds: Vec<u64> = (0..cfg.run.trials as u64).map(|i| cfg.run.seed + i).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    // Each trial owns its RNG streams, so results do not depend on scheduling.
    let mut results: Vec<Option<Result<MpcReport>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in results.chunks_mut(seeds.len().div_ceil(workers)).enumerate() {
            let start = w * seeds.len().div_ceil(workers);
            let seeds = &seeds;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(run_mpc(&cfg.with_seed(seeds[start + k])));
                }
            });
        }
    });
    let runs = results
        .into_iter()
        .map(|r| r.expect("every trial runs"))
        .collect::<Result<Vec<_>>>()?;
    let successes = runs.iter().filter(|r| r.metrics.success).count();
    let per_seed: Vec<&RunMetrics> = runs.iter().map(|r| &r.metrics).collect();
    let mean_violation = |name: &str| {
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.metrics.violations.iter().find(|v| v.name == name).map(|v| v.mean))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let summary = json!({
        "problem": cfg.problem.name,
        "solver": cfg.run.solver,
        "trials": runs.len(),
        "successes": successes,
        "success_rate": successes as f64 / runs.len() as f64,
        "mean_surface_violation": mean_violation("surface"),
        "mean_obstacle_violation": mean_violation("obstacle"),
        "runs": per_seed,
        "config": cfg,
    });
    Ok(BenchReport { runs, summary })
}

fn float(v: f64) -> String {
    format!("{v}")
}

/// `step, states…, controls…, violations…, wall_time_ms`.
pub fn write_trace_csv<W: Write>(report: &MpcReport, record_timing: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(report.state_names.iter().cloned());
    header.extend(report.control_names.iter().cloned());
    header.extend(report.trace.violation_names.iter().cloned());
    header.push("wall_time_ms".into());
    w.write_record(&header).map_err(csv_error)?;
    for s in &report.trace.steps {
        let mut row = vec![s.step.to_string()];
        row.extend(s.state.iter().map(|v| float(*v)));
        row.extend(s.control.iter().map(|v| float(*v)));
        row.extend(s.violations.iter().map(|v| float(*v)));
        row.push(float(if record_timing { s.wall_time_ms } else { 0.0 }));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per particle: index, best flag, penalty, then the flattened
/// trajectory with columns `<name>_<t>`.
pub fn write_particles_csv<W: Write>(report: &SolveReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let layout = report.problem.layout;
    let mut header = vec!["particle".to_string(), "best".into(), "penalty".into()];
    for t in 0..layout.horizon {
        header.extend(report.state_names.iter().map(|n| format!("{n}_{t}")));
    }
    for t in 0..layout.horizon {
        header.extend(report.control_names.iter().map(|n| format!("{n}_{t}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    for (i, p) in report.result.particles.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            u8::from(i == report.result.best_index).to_string(),
            float(report.result.penalties[i]),
        ];
        row.extend(p.particle.to_vector().iter().map(|v| float(*v)));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes `trace.csv` and `metrics.json` for one run into `dir`.
pub fn write_mpc_outputs(report: &MpcReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trace_csv(report, cfg.run.record_timing, fs::File::create(dir.join("trace.csv"))?)?;
    let mut metrics = serde_json::to_value(&report.metrics).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    metrics["config"] = serde_json::to_value(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_json(&dir.join("metrics.json"), &metrics)
}

pub fn write_solve_outputs(report: &SolveReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_particles_csv(report, fs::File::create(dir.join("particles.csv"))?)?;
    write_json(&dir.join("metrics.json"), &report.metrics)
}

/// Writes `seed_<s>/trace.csv`, `seed_<s>/metrics.json` and `summary.json`.
pub fn write_bench_outputs(report: &BenchReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for run in &report.runs {
        let seed_cfg = cfg.with_seed(run.metrics.seed);
        write_mpc_outputs(run, &seed_cfg, &dir.join(format!("seed_{}", run.metrics.seed)))?;
    }
    write_json(&dir.join("summary.json"), &report.summary)
}
