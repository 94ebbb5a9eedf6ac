//! The constrained Stein iteration.
//!
//! Every iteration evaluates, per particle, the augmented constraint system,
//! its tangent-space projector, and the Gauss-Newton feasibility step. The
//! Stein direction is then assembled from all pairs with the tangent kernel
//! and every particle is updated synchronously:
//!
//! `τ̂ ← clamp(τ̂ + α_J·φ_⊥ + α_C·φ_C)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{init_slack, projection_divergence, projection_matrix_with_cutoff, ProjectionData};
use crate::kernel::TrajectoryKernel;
use crate::problem::{eval_constraints, AugmentedParticle, Bounds, ProblemDef, TrajectoryParticle};

/// Hyperparameters of the solver and its receding-horizon driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub num_particles: usize,
    /// Step size on the tangent-space Stein direction.
    pub tangent_step: f64,
    /// Step size on the Gauss-Newton feasibility step.
    pub feasibility_step: f64,
    /// Iterations for the first (annealed) solve.
    pub warm_start_iterations: usize,
    /// Iterations for every later solve.
    pub online_iterations: usize,
    /// Resample every this many MPC steps; 0 disables resampling.
    pub resample_steps: usize,
    pub resample_temperature: f64,
    pub resample_noise: f64,
    /// `λ` in the selection penalty `C(τ) + λ Σ|ĥ|`.
    pub penalty_weight: f64,
    /// Sliding-window length of the trajectory kernel. When it is not
    /// shorter than the horizon the whole trajectory is one window.
    pub window: usize,
    pub seed: u64,
    /// Anneal the posterior term during the warm-start solve.
    pub anneal: bool,
    pub singular_cutoff: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::quadrotor()
    }
}

impl SolverConfig {
    /// Hyperparameters used for the quadrotor benchmark.
    pub fn quadrotor() -> Self {
        Self {
            num_particles: 8,
            tangent_step: 0.05,
            feasibility_step: 1.0,
            warm_start_iterations: 100,
            online_iterations: 10,
            resample_steps: 10,
            resample_temperature: 0.55,
            resample_noise: 0.1,
            penalty_weight: 1000.0,
            window: 3,
            seed: 0,
            anneal: true,
            singular_cutoff: crate::geometry::DEFAULT_SINGULAR_CUTOFF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_particles < 1 {
            return bad("num_particles must be >= 1");
        }
        if !(self.tangent_step > 0.0) || !(self.feasibility_step > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.warm_start_iterations < 1 || self.online_iterations < 1 {
            return bad("iteration counts must be >= 1");
        }
        if !(self.resample_temperature > 0.0) {
            return bad("resample_temperature must be positive");
        }
        if !(self.resample_noise >= 0.0) {
            return bad("resample_noise must be non-negative");
        }
        if !(self.penalty_weight >= 0.0) {
            return bad("penalty_weight must be non-negative");
        }
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if !(self.singular_cutoff > 0.0) {
            return bad("singular_cutoff must be positive");
        }
        Ok(())
    }
}

/// Per-particle quantities shared by every pair in one iteration.
#[derive(Debug, Clone)]
pub struct ParticleGeometry {
    pub values: DVector<f64>,
    pub projection: ProjectionData,
    /// `Σ_m ∂_m P_{n,m}` of this particle's projector.
    pub divergence: DVector<f64>,
    /// `[∇ log p(τ|o=1); 0]`.
    pub posterior_gradient: DVector<f64>,
    /// `φ_C = -Jᵀ(JJᵀ)^†ĥ`.
    pub feasibility: DVector<f64>,
    pub cost: f64,
}

impl ParticleGeometry {
    pub fn max_violation(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn particle_geometry(
    problem: &ProblemDef,
    particle: &AugmentedParticle,
    singular_cutoff: f64,
) -> Result<ParticleGeometry> {
    let bundle = eval_constraints(problem, particle)?;
    let projection = projection_matrix_with_cutoff(&bundle.jacobian, singular_cutoff)?;
    let divergence = projection_divergence(&projection, &bundle.hessians)?;
    let feasibility = projection.feasibility_step(&bundle.values);
    let grad = problem.log_posterior_gradient(&particle.particle);
    let mut posterior_gradient = DVector::zeros(particle.len());
    posterior_gradient.rows_mut(0, grad.len()).copy_from(&grad);
    Ok(ParticleGeometry {
        values: bundle.values,
        projection,
        divergence,
        posterior_gradient,
        feasibility,
        cost: problem.cost.value(&particle.particle),
    })
}

/// Tangent-space Stein direction for every particle, given their geometry.
///
/// `φ_⊥(τ̂i) = (1/N) Σ_j [γ·K_⊥(τ̂i, τ̂j)·∇log p(τj) + ∇_{τ̂j}K_⊥(τ̂i, τ̂j)]`
/// which factors as `Pi·(1/N)·Σ_j [γ·k_ij·Pj·∇log p_j + Pj·∇k_ij + k_ij·c_j]`.
pub fn stein_direction_from(
    particles: &[AugmentedParticle],
    geometry: &[ParticleGeometry],
    kernel: &TrajectoryKernel,
    anneal: f64,
) -> Result<Vec<DVector<f64>>> {
    let n = particles.len();
    let driving: Vec<DVector<f64>> = geometry
        .iter()
        .map(|g| &g.projection.projection * &g.posterior_gradient)
        .collect();
    let mut out = Vec::with_capacity(n);
    for (i, pi) in particles.iter().enumerate() {
        let dim = pi.len();
        let n_tau = pi.particle.layout().len();
        let mut acc = DVector::zeros(dim);
        let mut grad_k = DVector::zeros(dim);
        for (j, pj) in particles.iter().enumerate() {
            let (k, g) = kernel.eval_with_grad(&pi.particle, &pj.particle);
            grad_k.rows_mut(0, n_tau).copy_from(&g);
            acc.axpy(anneal * k, &driving[j], 1.0);
            acc.gemv(1.0, &geometry[j].projection.projection, &grad_k, 1.0);
            acc.axpy(k, &geometry[j].divergence, 1.0);
        }
        let phi = &geometry[i].projection.projection * acc / n as f64;
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { particle: i });
        }
        out.push(phi);
    }
    Ok(out)
}

/// Stein direction for a particle set on `problem`.
pub fn stein_direction(
    particles: &[AugmentedParticle],
    problem: &ProblemDef,
    cfg: &SolverConfig,
    anneal: f64,
) -> Result<Vec<DVector<f64>>> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    let geometry = particles
        .iter()
        .map(|p| particle_geometry(problem, p, cfg.singular_cutoff))
        .collect::<Result<Vec<_>>>()?;
    let trajs: Vec<_> = particles.iter().map(|p| &p.particle).collect();
    let kernel = TrajectoryKernel::fit(&trajs, cfg.window)?;
    stein_direction_from(particles, &geometry, &kernel, anneal)
}

/// Componentwise clamp of states and controls into the box bounds.
pub fn project_bounds(particle: &TrajectoryParticle, bounds: &Bounds) -> TrajectoryParticle {
    let mut out = particle.clone();
    for mut row in out.states_mut().row_iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = v.max(bounds.state_min[k]).min(bounds.state_max[k]);
        }
    }
    for mut row in out.controls_mut().row_iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = v.max(bounds.control_min[k]).min(bounds.control_max[k]);
        }
    }
    out
}

/// What happened to the particle set during one iteration. Constraint and
/// cost figures describe the particles at the start of the iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub max_violation: f64,
    pub mean_cost: f64,
    pub max_tangent_norm: f64,
    pub max_feasibility_norm: f64,
    /// `‖α_J·φ_⊥ + α_C·φ_C‖` per particle, before bounds projection.
    pub update_norms: Vec<f64>,
    /// Per-particle `max |ĥ|` at the start of the iteration.
    pub violations: Vec<f64>,
    /// Particles whose update was non-finite and were left in place.
    pub reset_particles: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub particles: Vec<AugmentedParticle>,
    pub diagnostics: IterationDiagnostics,
    pub tangent_directions: Vec<DVector<f64>>,
    pub feasibility_steps: Vec<DVector<f64>>,
}

/// One synchronous update of the whole particle set.
pub fn csvto_step(
    particles: &[AugmentedParticle],
    problem: &ProblemDef,
    cfg: &SolverConfig,
    anneal: f64,
) -> Result<StepOutcome> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    let geometry = particles
        .iter()
        .map(|p| particle_geometry(problem, p, cfg.singular_cutoff))
        .collect::<Result<Vec<_>>>()?;
    let trajs: Vec<_> = particles.iter().map(|p| &p.particle).collect();
    let kernel = TrajectoryKernel::fit(&trajs, cfg.window)?;
    let directions = stein_direction_from(particles, &geometry, &kernel, anneal)?;

    let layout = problem.layout;
    let n_slack = problem.inequality_count();
    let mut next = Vec::with_capacity(particles.len());
    let mut update_norms = Vec::with_capacity(particles.len());
    let mut reset = Vec::new();
    for (i, particle) in particles.iter().enumerate() {
        let update = &directions[i] * cfg.tangent_step + &geometry[i].feasibility * cfg.feasibility_step;
        update_norms.push(update.norm());
        let moved = AugmentedParticle::from_vector(layout, n_slack, &(particle.to_vector() + update))?;
        if moved.is_finite() {
            next.push(AugmentedParticle::new(
                project_bounds(&moved.particle, &problem.bounds),
                moved.slack,
            ));
        } else {
            reset.push(i);
            next.push(particle.clone());
        }
    }

    let violations: Vec<f64> = geometry.iter().map(ParticleGeometry::max_violation).collect();
    let diagnostics = IterationDiagnostics {
        max_violation: violations.iter().cloned().fold(0.0, f64::max),
        mean_cost: geometry.iter().map(|g| g.cost).sum::<f64>() / geometry.len() as f64,
        max_tangent_norm: directions.iter().map(|d| d.norm()).fold(0.0, f64::max),
        max_feasibility_norm: geometry.iter().map(|g| g.feasibility.norm()).fold(0.0, f64::max),
        update_norms,
        violations,
        reset_particles: reset,
    };
    Ok(StepOutcome {
        particles: next,
        diagnostics,
        tangent_directions: directions,
        feasibility_steps: geometry.into_iter().map(|g| g.feasibility).collect(),
    })
}

/// Attaches slack `z = sqrt(2|g(τ)|)` to each trajectory.
pub fn augment(problem: &ProblemDef, particles: &[TrajectoryParticle]) -> Vec<AugmentedParticle> {
    particles
        .iter()
        .map(|p| AugmentedParticle::new(p.clone(), init_slack(&problem.inequality_values(p))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub particles: Vec<AugmentedParticle>,
    pub best_index: usize,
    /// Selection penalty per particle; `NaN` where it was not finite.
    pub penalties: Vec<f64>,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Particles excluded from selection because their penalty was not finite.
    pub flagged: Vec<usize>,
}

impl SolveResult {
    pub fn best(&self) -> &AugmentedParticle {
        &self.particles[self.best_index]
    }

    /// The selected trajectory with its slack discarded.
    pub fn best_trajectory(&self) -> &TrajectoryParticle {
        &self.particles[self.best_index].particle
    }

    pub fn trajectories(&self) -> Vec<TrajectoryParticle> {
        self.particles.iter().map(|p| p.particle.clone()).collect()
    }
}

/// Index of the lowest finite penalty (ties to the lowest index) and the
/// indices whose penalty was not finite.
pub fn select_best(
    problem: &ProblemDef,
    particles: &[AugmentedParticle],
    lambda: f64,
) -> Result<(usize, Vec<f64>, Vec<usize>)> {
    let mut penalties = Vec::with_capacity(particles.len());
    let mut flagged = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in particles.iter().enumerate() {
        let c = problem.penalty(p, lambda).unwrap_or(f64::NAN);
        if c.is_finite() {
            if best.map_or(true, |(_, b)| c < b) {
                best = Some((i, c));
            }
        } else {
            flagged.push(i);
        }
        penalties.push(if c.is_finite() { c } else { f64::NAN });
    }
    let (idx, _) = best.ok_or_else(|| Error::NonFinite {
        context: "every particle has a non-finite penalty".into(),
    })?;
    Ok((idx, penalties, flagged))
}

/// Runs `iterations` updates from `init` (slack initialized from `g`) and
/// selects the particle with the lowest penalty.
pub fn solve(
    problem: &ProblemDef,
    init: &[TrajectoryParticle],
    iterations: usize,
    anneal: bool,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    solve_augmented(problem, augment(problem, init), iterations, anneal, cfg)
}

/// [`solve`] starting from particles that already carry slack.
pub fn solve_augmented(
    problem: &ProblemDef,
    mut particles: Vec<AugmentedParticle>,
    iterations: usize,
    anneal: bool,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    let mut diagnostics = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        let gamma = if anneal { k as f64 / iterations as f64 } else { 1.0 };
        let out = csvto_step(&particles, problem, cfg, gamma)?;
        particles = out.particles;
        diagnostics.push(out.diagnostics);
    }
    let (best_index, penalties, flagged) = select_best(problem, &particles, cfg.penalty_weight)?;
    Ok(SolveResult {
        particles,
        best_index,
        penalties,
        diagnostics,
        flagged,
    })
}

/// Advances each trajectory one timestep, duplicating the last state and
/// control: `(x_2..x_T, x_T)` and `(u_1..u_{T-1}, u_{T-1})`.
pub fn shift(particles: &[TrajectoryParticle]) -> Result<Vec<TrajectoryParticle>> {
    particles.iter().map(shift_one).collect()
}

fn shift_one(p: &TrajectoryParticle) -> Result<TrajectoryParticle> {
    let t = p.horizon();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("shift needs a horizon of at least 2, got {t}")));
    }
    let mut out = p.clone();
    for r in 0..t - 1 {
        let s = p.states().row(r + 1).into_owned();
        out.states_mut().set_row(r, &s);
        let c = p.controls().row(r + 1).into_owned();
        out.controls_mut().set_row(r, &c);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ResampleOutcome {
    pub particles: Vec<AugmentedParticle>,
    pub weights: Vec<f64>,
    /// Source index of each new particle.
    pub ancestors: Vec<usize>,
    /// Weights were degenerate and replaced by uniform ones.
    pub uniform_fallback: bool,
}

/// Softmin weights `w_i ∝ exp(-Ĉ_i / β)`; non-finite penalties get zero
/// weight. Returns `None` when no weight is usable.
pub fn softmin_weights(penalties: &[f64], temperature: f64) -> Option<Vec<f64>> {
    let min = penalties
        .iter()
        .cloned()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let raw: Vec<f64> = penalties
        .iter()
        .map(|&c| if c.is_finite() { (-(c - min) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    Some(raw.into_iter().map(|w| w / total).collect())
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_draw<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let offset: f64 = rng.gen::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut idx = 0;
    for i in 0..n {
        let u = offset + i as f64 / n as f64;
        while u > cumulative && idx + 1 < weights.len() {
            idx += 1;
            cumulative += weights[idx];
        }
        out.push(idx);
    }
    out
}

/// Draws a new particle set by penalty softmin weights and perturbs each
/// draw with tangent-space noise `P(τ̂_i)·ε`, `ε ~ N(0, σ²I)`.
pub fn resample<R: Rng + ?Sized>(
    particles: &[AugmentedParticle],
    problem: &ProblemDef,
    temperature: f64,
    noise: f64,
    penalty_weight: f64,
    singular_cutoff: f64,
    rng: &mut R,
) -> Result<ResampleOutcome> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("resample temperature must be positive".into()));
    }
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    let n = particles.len();
    let penalties: Vec<f64> = particles
        .iter()
        .map(|p| problem.penalty(p, penalty_weight).unwrap_or(f64::NAN))
        .collect();
    let (weights, uniform_fallback) = match softmin_weights(&penalties, temperature) {
        Some(w) => (w, false),
        None => (vec![1.0 / n as f64; n], true),
    };
    let ancestors = systematic_draw(&weights, n, rng);
    let layout = problem.layout;
    let n_slack = problem.inequality_count();
    let mut projections: Vec<Option<ProjectionData>> = vec![None; n];
    let mut out = Vec::with_capacity(n);
    for &a in &ancestors {
        if projections[a].is_none() {
            let bundle = eval_constraints(problem, &particles[a])?;
            projections[a] = Some(projection_matrix_with_cutoff(&bundle.jacobian, singular_cutoff)?);
        }
        let proj = projections[a].as_ref().expect("projection computed above");
        let dim = particles[a].len();
        let eps = DVector::from_fn(dim, |_, _| {
            let e: f64 = rng.sample(StandardNormal);
            e * noise
        });
        let moved = particles[a].to_vector() + proj.project(&eps);
        out.push(AugmentedParticle::from_vector(layout, n_slack, &moved)?);
    }
    Ok(ResampleOutcome {
        particles: out,
        weights,
        ancestors,
        uniform_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Constraint, Cost, LocalHessian, TrajectoryLayout};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// `C(x) = ½‖x - target‖²` over a flat `T = 1` trajectory.
    struct Quadratic {
        target: DVector<f64>,
    }
    impl Cost for Quadratic {
        fn value(&self, traj: &TrajectoryParticle) -> f64 {
            0.5 * (traj.to_vector() - &self.target).norm_squared()
        }
        fn gradient(&self, traj: &TrajectoryParticle) -> DVector<f64> {
            traj.to_vector() - &self.target
        }
    }

    /// `A·x - b`.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }
    impl Constraint for Linear {
        fn name(&self) -> &str {
            "linear"
        }
        fn rows(&self, _: &TrajectoryLayout) -> usize {
            self.b.len()
        }
        fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
            &self.a * traj.to_vector() - &self.b
        }
        fn jacobian(&self, _: &TrajectoryParticle) -> DMatrix<f64> {
            self.a.clone()
        }
        fn hessians(&self, _: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
            Some(vec![LocalHessian::zero(); self.b.len()])
        }
    }

    fn flat_problem(n: usize, target: DVector<f64>) -> ProblemDef {
        let layout = TrajectoryLayout::new(1, n, 0);
        ProblemDef::new(layout, DVector::zeros(n), Arc::new(Quadratic { target }))
    }

    fn flat(values: &[f64]) -> TrajectoryParticle {
        let layout = TrajectoryLayout::new(1, values.len(), 0);
        TrajectoryParticle::from_slice(layout, values).unwrap()
    }

    fn cfg(n: usize) -> SolverConfig {
        SolverConfig {
            num_particles: n,
            tangent_step: 0.1,
            feasibility_step: 1.0,
            ..SolverConfig::quadrotor()
        }
    }

    #[test]
    fn single_unconstrained_particle_follows_posterior_gradient() {
        let p = flat_problem(3, DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let parts = augment(&p, &[flat(&[0.5, -0.5, 0.0])]);
        let phi = stein_direction(&parts, &p, &cfg(1), 1.0).unwrap();
        let expected = p.log_posterior_gradient(&parts[0].particle);
        assert!((&phi[0] - expected).norm() < 1e-14);
    }

    #[test]
    fn zero_anneal_keeps_only_repulsion() {
        let p = flat_problem(2, DVector::from_vec(vec![5.0, 5.0]));
        let parts = augment(&p, &[flat(&[0.0, 0.0]), flat(&[0.3, 0.1])]);
        let phi = stein_direction(&parts, &p, &cfg(2), 0.0).unwrap();
        let trajs: Vec<_> = parts.iter().map(|a| &a.particle).collect();
        let kernel = TrajectoryKernel::fit(&trajs, 3).unwrap();
        for i in 0..2 {
            let mut expected = DVector::zeros(2);
            for j in 0..2 {
                expected += kernel.eval_with_grad(&parts[i].particle, &parts[j].particle).1;
            }
            assert!((&phi[i] - expected / 2.0).norm() < 1e-14);
        }
        // Repulsion pushes the pair apart.
        let sep_dir = parts[1].to_vector() - parts[0].to_vector();
        assert!(phi[1].dot(&sep_dir) > 0.0);
    }

    #[test]
    fn directions_are_tangent_to_linear_constraints() {
        let mut p = flat_problem(3, DVector::from_vec(vec![1.0, -1.0, 0.5]));
        p.equalities.push(Arc::new(Linear {
            a: DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]),
            b: DVector::from_element(1, 0.3),
        }));
        let parts = augment(&p, &[flat(&[0.2, 0.4, 0.0]), flat(&[-0.5, 0.1, 0.9])]);
        let phi = stein_direction(&parts, &p, &cfg(2), 1.0).unwrap();
        for d in &phi {
            let jd = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]) * d;
            assert!(jd.norm() < 1e-8);
        }
    }

    #[test]
    fn linear_equality_is_met_after_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(2, 5, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let mut p = flat_problem(5, DVector::from_element(5, 1.0));
        p.equalities.push(Arc::new(Linear { a: a.clone(), b: b.clone() }));
        let init: Vec<_> = (0..3)
            .map(|_| flat(&(0..5).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        let out = csvto_step(&augment(&p, &init), &p, &cfg(3), 1.0).unwrap();
        for part in &out.particles {
            let h = &a * part.particle.to_vector() - &b;
            assert!(h.amax() < 1e-10);
        }
    }

    #[test]
    fn feasible_stationary_particle_is_fixed() {
        // Minimize ½‖x - (1, 1)‖² on x_1 = 1: the optimum (1, 1) is feasible.
        let mut p = flat_problem(2, DVector::from_vec(vec![1.0, 1.0]));
        p.equalities.push(Arc::new(Linear {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b: DVector::from_element(1, 1.0),
        }));
        let start = augment(&p, &[flat(&[1.0, 1.0])]);
        let out = csvto_step(&start, &p, &cfg(1), 1.0).unwrap();
        assert!((out.particles[0].to_vector() - start[0].to_vector()).norm() < 1e-10);
    }

    #[test]
    fn bounds_clamp_controls() {
        let layout = TrajectoryLayout::new(1, 1, 1);
        let t = TrajectoryParticle::from_slice(layout, &[0.5, 5.0]).unwrap();
        let mut b = Bounds::unbounded(1, 1);
        b.control_max[0] = 2.0;
        let out = project_bounds(&t, &b);
        assert_eq!(out.controls()[(0, 0)], 2.0);
        assert_eq!(out.states()[(0, 0)], 0.5);
        assert_eq!(project_bounds(&out, &b), out);
    }

    #[test]
    fn in_bounds_particle_is_untouched() {
        let layout = TrajectoryLayout::new(2, 1, 1);
        let t = TrajectoryParticle::from_slice(layout, &[0.5, -0.2, 1.0, 0.0]).unwrap();
        let mut b = Bounds::unbounded(1, 1);
        b.state_min[0] = -1.0;
        b.state_max[0] = 1.0;
        assert_eq!(project_bounds(&t, &b), t);
    }

    #[test]
    fn step_clamps_update_past_bound() {
        // The posterior drags the control toward 10 but the bound is 2.
        struct PullControl;
        impl Cost for PullControl {
            fn value(&self, t: &TrajectoryParticle) -> f64 {
                0.5 * (t.controls()[(0, 0)] - 10.0).powi(2)
            }
            fn gradient(&self, t: &TrajectoryParticle) -> DVector<f64> {
                DVector::from_vec(vec![0.0, t.controls()[(0, 0)] - 10.0])
            }
        }
        let layout = TrajectoryLayout::new(1, 1, 1);
        let mut p = ProblemDef::new(layout, DVector::zeros(1), Arc::new(PullControl));
        p.bounds.control_max[0] = 2.0;
        let mut c = cfg(1);
        c.tangent_step = 1.0;
        let start = augment(&p, &[TrajectoryParticle::from_slice(layout, &[0.0, 1.5]).unwrap()]);
        let out = csvto_step(&start, &p, &c, 1.0).unwrap();
        assert_eq!(out.particles[0].particle.controls()[(0, 0)], 2.0);
    }

    #[test]
    fn zero_iterations_select_initial_best() {
        let p = flat_problem(1, DVector::from_element(1, 3.0));
        let init = vec![flat(&[0.0]), flat(&[2.5]), flat(&[2.5]), flat(&[5.0])];
        let r = solve(&p, &init, 0, false, &cfg(4)).unwrap();
        assert_eq!(r.best_index, 1);
        assert!(r.diagnostics.is_empty());
        assert_eq!(r.trajectories(), init);
    }

    #[test]
    fn non_finite_penalty_is_flagged() {
        struct Weird;
        impl Cost for Weird {
            fn value(&self, t: &TrajectoryParticle) -> f64 {
                if t.states()[(0, 0)] < 0.0 {
                    f64::NAN
                } else {
                    t.states()[(0, 0)]
                }
            }
            fn gradient(&self, _: &TrajectoryParticle) -> DVector<f64> {
                DVector::zeros(1)
            }
        }
        let layout = TrajectoryLayout::new(1, 1, 0);
        let p = ProblemDef::new(layout, DVector::zeros(1), Arc::new(Weird));
        let init = vec![flat(&[-1.0]), flat(&[4.0]), flat(&[2.0])];
        let r = solve(&p, &init, 0, false, &cfg(3)).unwrap();
        assert_eq!(r.flagged, vec![0]);
        assert_eq!(r.best_index, 2);
    }

    #[test]
    fn shift_examples() {
        let layout = TrajectoryLayout::new(3, 1, 1);
        let t = TrajectoryParticle::from_slice(layout, &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let s = &shift(&[t]).unwrap()[0];
        assert_eq!(s.states().as_slice(), &[2.0, 3.0, 3.0]);
        assert_eq!(s.controls().as_slice(), &[20.0, 30.0, 30.0]);

        let layout = TrajectoryLayout::new(2, 1, 1);
        let t = TrajectoryParticle::from_slice(layout, &[1.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(shift(&[t]).unwrap()[0].states().as_slice(), &[2.0, 2.0]);

        let layout = TrajectoryLayout::new(1, 1, 1);
        assert!(shift(&[TrajectoryParticle::zeros(layout)]).is_err());
    }

    #[test]
    fn repeated_shift_saturates_to_last_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = TrajectoryLayout::new(5, 2, 1);
        let v: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = TrajectoryParticle::from_slice(layout, &v).unwrap();
        let mut cur = vec![t.clone()];
        for _ in 0..5 {
            cur = shift(&cur).unwrap();
        }
        for r in 0..5 {
            assert_eq!(cur[0].states().row(r), t.states().row(4));
            assert_eq!(cur[0].controls().row(r), t.controls().row(4));
        }
    }

    #[test]
    fn equal_penalties_give_uniform_weights() {
        let w = softmin_weights(&[3.0; 5], 0.5).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cold_softmin_concentrates_on_argmin() {
        let w = softmin_weights(&[3.0, 1.0, 2.0], 1e-6).unwrap();
        assert_eq!(w[1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(systematic_draw(&w, 3, &mut rng), vec![1, 1, 1]);
    }

    #[test]
    fn degenerate_weights_fall_back_to_uniform() {
        assert!(softmin_weights(&[f64::NAN, f64::INFINITY], 1.0).is_none());
        struct NanCost;
        impl Cost for NanCost {
            fn value(&self, _: &TrajectoryParticle) -> f64 {
                f64::NAN
            }
            fn gradient(&self, _: &TrajectoryParticle) -> DVector<f64> {
                DVector::zeros(1)
            }
        }
        let layout = TrajectoryLayout::new(1, 1, 0);
        let p = ProblemDef::new(layout, DVector::zeros(1), Arc::new(NanCost));
        let parts = augment(&p, &[flat(&[0.0]), flat(&[1.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = resample(&parts, &p, 1.0, 0.0, 1.0, 1e-6, &mut rng).unwrap();
        assert!(r.uniform_fallback);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn systematic_draw_respects_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = systematic_draw(&[0.5, 0.25, 0.25], 8, &mut rng);
        let count = |k| draws.iter().filter(|&&d| d == k).count();
        assert_eq!((count(0), count(1), count(2)), (4, 2, 2));
    }

    #[test]
    fn resample_noise_stays_on_linear_constraint() {
        let mut p = flat_problem(4, DVector::zeros(4));
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 2.0]);
        let b = DVector::from_vec(vec![0.5, -0.2]);
        p.equalities.push(Arc::new(Linear { a: a.clone(), b: b.clone() }));
        let parts = augment(&p, &[flat(&[0.1, 0.2, 0.3, 0.4]), flat(&[1.0, -1.0, 0.5, 0.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = resample(&parts, &p, 1.0, 0.3, 1.0, 1e-6, &mut rng).unwrap();
        for (new, &anc) in r.particles.iter().zip(r.ancestors.iter()) {
            let before = &a * parts[anc].particle.to_vector() - &b;
            let after = &a * new.particle.to_vector() - &b;
            assert!((after - before).amax() < 1e-10);
            assert!(new != &parts[anc]);
        }
    }
}
