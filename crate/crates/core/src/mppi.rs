//! Penalty-based model predictive path integral control.
//!
//! Controls are perturbed with Gaussian noise, rolled out through the
//! dynamics, scored with `C(τ) + λΣ|h(τ)| + µΣ max(g(τ), 0)`, and averaged
//! with weights `exp(-Ĉ/temperature)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::Planner;
use crate::problem::{rollout_dynamics, ProblemDef, TrajectoryParticle};
use crate::solver::{project_bounds, softmin_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub num_samples: usize,
    pub temperature: f64,
    /// Per-control-dimension perturbation standard deviation. Empty means
    /// "use the problem's control prior".
    pub noise_std: Vec<f64>,
    pub equality_penalty: f64,
    pub inequality_penalty: f64,
    pub warm_start_iterations: usize,
    pub online_iterations: usize,
    pub seed: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            num_samples: 256,
            temperature: 1.0,
            noise_std: Vec::new(),
            equality_penalty: 1000.0,
            inequality_penalty: 2000.0,
            warm_start_iterations: 100,
            online_iterations: 10,
            seed: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_samples < 1 {
            return bad("num_samples must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.equality_penalty >= 0.0) || !(self.inequality_penalty >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise_std entries must be non-negative");
        }
        if self.warm_start_iterations < 1 || self.online_iterations < 1 {
            return bad("iteration counts must be >= 1");
        }
        Ok(())
    }

    fn noise_for(&self, problem: &ProblemDef) -> Result<DVector<f64>> {
        let du = problem.layout.control_dim;
        if !self.noise_std.is_empty() {
            if self.noise_std.len() != du {
                return Err(Error::DimensionMismatch {
                    context: "MPPI noise_std",
                    expected: du,
                    actual: self.noise_std.len(),
                });
            }
            return Ok(DVector::from_column_slice(&self.noise_std));
        }
        problem
            .control_prior
            .as_ref()
            .map(|p| p.std.clone())
            .ok_or_else(|| Error::InvalidConfig("MPPI needs noise_std or a control prior".into()))
    }
}

/// `C(τ) + λ Σ|h(τ)| + µ Σ max(g(τ), 0)`; dynamics are assumed satisfied.
pub fn penalty_cost(problem: &ProblemDef, traj: &TrajectoryParticle, lambda: f64, mu: f64) -> f64 {
    let h: f64 = problem.equality_values(traj).iter().map(|v| v.abs()).sum();
    let g: f64 = problem.inequality_values(traj).iter().map(|v| v.max(0.0)).sum();
    problem.cost.value(traj) + lambda * h + mu * g
}

#[derive(Debug, Clone)]
pub struct MppiStep {
    pub controls: DMatrix<f64>,
    /// Lowest-penalty rollout among the samples.
    pub best: TrajectoryParticle,
    pub weights: Vec<f64>,
    pub uniform_fallback: bool,
}

/// One sampling round around `nominal` (`T × d_u`).
pub fn mppi_step<R: Rng + ?Sized>(
    nominal: &DMatrix<f64>,
    problem: &ProblemDef,
    cfg: &MppiConfig,
    rng: &mut R,
) -> Result<MppiStep> {
    let f = problem
        .dynamics
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("MPPI needs dynamics".into()))?;
    let std = cfg.noise_for(problem)?;
    let (t, du) = (nominal.nrows(), nominal.ncols());
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut costs = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let noise = DMatrix::from_fn(t, du, |_, k| std[k] * rng.sample::<f64, _>(StandardNormal));
        let mut controls = nominal + noise;
        for mut row in controls.row_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = v.max(problem.bounds.control_min[k]).min(problem.bounds.control_max[k]);
            }
        }
        let states = rollout_dynamics(&problem.initial_state, &controls, f.as_ref())?;
        let traj = project_bounds(&TrajectoryParticle::new(states, controls)?, &problem.bounds);
        costs.push(penalty_cost(problem, &traj, cfg.equality_penalty, cfg.inequality_penalty));
        samples.push(traj);
    }
    let (weights, uniform_fallback) = match softmin_weights(&costs, cfg.temperature) {
        Some(w) => (w, false),
        None => (vec![1.0 / costs.len() as f64; costs.len()], true),
    };
    let mut controls = DMatrix::zeros(t, du);
    for (w, s) in weights.iter().zip(samples.iter()) {
        controls += s.controls() * *w;
    }
    let best_idx = costs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    Ok(MppiStep {
        controls,
        best: samples.swap_remove(best_idx),
        weights,
        uniform_fallback,
    })
}

/// Receding-horizon MPPI; executes the first control of the weighted mean.
pub struct MppiPlanner {
    pub cfg: MppiConfig,
    nominal: DMatrix<f64>,
    rng: ChaCha8Rng,
}

impl MppiPlanner {
    pub fn new(cfg: MppiConfig, nominal: DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, nominal, rng })
    }

    pub fn nominal(&self) -> &DMatrix<f64> {
        &self.nominal
    }
}

impl Planner for MppiPlanner {
    fn plan(&mut self, problem: &ProblemDef, step: usize) -> Result<TrajectoryParticle> {
        let iterations = if step == 1 {
            self.cfg.warm_start_iterations
        } else {
            self.cfg.online_iterations
        };
        for _ in 0..iterations {
            self.nominal = mppi_step(&self.nominal, problem, &self.cfg, &mut self.rng)?.controls;
        }
        let f = problem.dynamics.as_ref().expect("checked by mppi_step");
        let states = rollout_dynamics(&problem.initial_state, &self.nominal, f.as_ref())?;
        TrajectoryParticle::new(states, self.nominal.clone())
    }

    fn advance(&mut self) -> Result<()> {
        let t = self.nominal.nrows();
        if t < 2 {
            return Err(Error::InvalidArgument(format!("shift needs a horizon of at least 2, got {t}")));
        }
        for r in 0..t - 1 {
            let next = self.nominal.row(r + 1).into_owned();
            self.nominal.set_row(r, &next);
        }
        Ok(())
    }
}
