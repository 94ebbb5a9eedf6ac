//! Receding-horizon execution: plan, execute the first control, shift.

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{ProblemDef, TrajectoryParticle};
use crate::solver::{augment, resample, shift, solve_augmented, SolverConfig};

/// A system that can be stepped with controls.
pub trait Environment {
    fn state(&self) -> DVector<f64>;

    fn step(&mut self, control: &DVector<f64>) -> Result<()>;

    /// Names of the constraint violations reported by [`Environment::violations`].
    fn violation_names(&self) -> Vec<String>;

    /// Violation of each named constraint at the current (executed) state.
    fn violations(&self) -> Vec<f64>;

    /// Updates time-varying parts of the planning problem to what the
    /// planner can observe now.
    fn sync_problem(&self, _problem: &mut ProblemDef) {}

    fn goal_distance(&self) -> Option<f64> {
        None
    }
}

/// Produces the next control from the current problem.
pub trait Planner {
    /// `step` counts from 1.
    fn plan(&mut self, problem: &ProblemDef, step: usize) -> Result<TrajectoryParticle>;

    /// Warm-starts the next plan by advancing the internal trajectories.
    fn advance(&mut self) -> Result<()>;
}

/// Constrained Stein planner with warm starting, shifting and resampling.
pub struct CsvtoPlanner {
    pub cfg: SolverConfig,
    particles: Vec<TrajectoryParticle>,
    rng: ChaCha8Rng,
}

impl CsvtoPlanner {
    pub fn new(cfg: SolverConfig, init: Vec<TrajectoryParticle>) -> Result<Self> {
        cfg.validate()?;
        if init.is_empty() {
            return Err(Error::InvalidArgument("planner needs at least one particle".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            particles: init,
            rng,
        })
    }

    pub fn particles(&self) -> &[TrajectoryParticle] {
        &self.particles
    }
}

impl Planner for CsvtoPlanner {
    fn plan(&mut self, problem: &ProblemDef, step: usize) -> Result<TrajectoryParticle> {
        let mut particles = augment(problem, &self.particles);
        if step > 1 && self.cfg.resample_steps > 0 && step % self.cfg.resample_steps == 0 {
            particles = resample(
                &particles,
                problem,
                self.cfg.resample_temperature,
                self.cfg.resample_noise,
                self.cfg.penalty_weight,
                self.cfg.singular_cutoff,
                &mut self.rng,
            )?
            .particles;
        }
        let (iterations, anneal) = if step == 1 {
            (self.cfg.warm_start_iterations, self.cfg.anneal)
        } else {
            (self.cfg.online_iterations, false)
        };
        let result = solve_augmented(problem, particles, iterations, anneal, &self.cfg)?;
        self.particles = result.trajectories();
        Ok(result.best_trajectory().clone())
    }

    fn advance(&mut self) -> Result<()> {
        self.particles = shift(&self.particles)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    /// State after executing `control`.
    pub state: DVector<f64>,
    pub control: DVector<f64>,
    pub violations: Vec<f64>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcTrace {
    pub initial_state: DVector<f64>,
    pub violation_names: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub status: RunStatus,
    pub final_goal_distance: Option<f64>,
}

impl MpcTrace {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Mean and max of violation column `k` over steps `from..`.
    pub fn violation_stats(&self, k: usize, from: usize) -> (f64, f64) {
        let vals: Vec<f64> = self.steps.iter().skip(from).map(|s| s.violations[k]).collect();
        if vals.is_empty() {
            return (0.0, 0.0);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (mean, vals.iter().cloned().fold(0.0, f64::max))
    }
}

/// Runs `total_steps` of plan → execute → shift. Planner or environment
/// failures end the trace early with a failure status.
pub fn receding_horizon<E: Environment, P: Planner>(
    env: &mut E,
    problem: &mut ProblemDef,
    planner: &mut P,
    total_steps: usize,
) -> MpcTrace {
    let initial_state = env.state();
    let violation_names = env.violation_names();
    let mut steps = Vec::with_capacity(total_steps);
    let mut status = RunStatus::Completed;
    for step in 1..=total_steps {
        problem.initial_state = env.state();
        env.sync_problem(problem);
        let start = Instant::now();
        let outcome = planner.plan(problem, step).and_then(|best| {
            let control = best.control(0);
            env.step(&control)?;
            Ok(control)
        });
        let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        let control = match outcome {
            Ok(c) => c,
            Err(e) => {
                status = RunStatus::Failed {
                    step,
                    message: e.to_string(),
                };
                break;
            }
        };
        steps.push(TraceStep {
            step,
            state: env.state(),
            control,
            violations: env.violations(),
            wall_time_ms,
        });
        if step < total_steps {
            if let Err(e) = planner.advance() {
                status = RunStatus::Failed {
                    step,
                    message: e.to_string(),
                };
                break;
            }
        }
    }
    MpcTrace {
        initial_state,
        violation_names,
        steps,
        status,
        final_goal_distance: env.goal_distance(),
    }
}

/// Receding-horizon control with the constrained Stein planner.
pub fn mpc_run<E: Environment>(
    env: &mut E,
    problem: &mut ProblemDef,
    cfg: &SolverConfig,
    init: Vec<TrajectoryParticle>,
    total_steps: usize,
) -> Result<MpcTrace> {
    let mut planner = CsvtoPlanner::new(cfg.clone(), init)?;
    Ok(receding_horizon(env, problem, &mut planner, total_steps))
}
