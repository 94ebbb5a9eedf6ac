//! Trajectory optimization problems under direct transcription.
//!
//! A trajectory `τ = (X, U)` holds the states `x_1..x_T` and the controls
//! `u_0..u_{T-1}` as free decision variables. Dynamics enter as equality
//! constraints (defects) next to the user equalities, and inequalities are
//! turned into equalities with a squared slack variable per scalar row.
//!
//! The flattened decision vector is laid out as all states (row by row)
//! followed by all controls, then the slack block for augmented particles.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Shape of a transcribed trajectory and index helpers for its flat layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl TrajectoryLayout {
    pub fn new(horizon: usize, state_dim: usize, control_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            control_dim,
        }
    }

    /// Length of the flattened `(X, U)` vector, `T·(d_x + d_u)`.
    pub fn len(&self) -> usize {
        self.horizon * (self.state_dim + self.control_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of component `k` of state row `t` (row 0 is `x_1`).
    #[inline]
    pub fn state_index(&self, t: usize, k: usize) -> usize {
        t * self.state_dim + k
    }

    /// Flat index of component `k` of control row `t` (row 0 is `u_0`).
    #[inline]
    pub fn control_index(&self, t: usize, k: usize) -> usize {
        self.horizon * self.state_dim + t * self.control_dim + k
    }
}

/// A candidate trajectory: `T×d_x` states and `T×d_u` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParticle {
    states: DMatrix<f64>,
    controls: DMatrix<f64>,
}

impl TrajectoryParticle {
    pub fn new(states: DMatrix<f64>, controls: DMatrix<f64>) -> Result<Self> {
        if states.nrows() != controls.nrows() {
            return Err(Error::DimensionMismatch {
                context: "trajectory horizon",
                expected: states.nrows(),
                actual: controls.nrows(),
            });
        }
        if !states.iter().chain(controls.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "trajectory particle".into(),
            });
        }
        Ok(Self { states, controls })
    }

    pub fn zeros(layout: TrajectoryLayout) -> Self {
        Self {
            states: DMatrix::zeros(layout.horizon, layout.state_dim),
            controls: DMatrix::zeros(layout.horizon, layout.control_dim),
        }
    }

    pub fn layout(&self) -> TrajectoryLayout {
        TrajectoryLayout::new(self.horizon(), self.states.ncols(), self.controls.ncols())
    }

    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.ncols()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub fn controls_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.controls
    }

    /// State row `t` as a column vector (`t = 0` is `x_1`).
    pub fn state(&self, t: usize) -> DVector<f64> {
        self.states.row(t).transpose()
    }

    /// Control row `t` as a column vector (`t = 0` is `u_0`).
    pub fn control(&self, t: usize) -> DVector<f64> {
        self.controls.row(t).transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.states
            .iter()
            .chain(self.controls.iter())
            .all(|v| v.is_finite())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut out = DVector::zeros(layout.len());
        self.write_into(out.as_mut_slice());
        out
    }

    fn write_into(&self, out: &mut [f64]) {
        let layout = self.layout();
        for t in 0..layout.horizon {
            for k in 0..layout.state_dim {
                out[layout.state_index(t, k)] = self.states[(t, k)];
            }
            for k in 0..layout.control_dim {
                out[layout.control_index(t, k)] = self.controls[(t, k)];
            }
        }
    }

    pub fn from_slice(layout: TrajectoryLayout, values: &[f64]) -> Result<Self> {
        if values.len() < layout.len() {
            return Err(Error::DimensionMismatch {
                context: "trajectory vector",
                expected: layout.len(),
                actual: values.len(),
            });
        }
        let states = DMatrix::from_fn(layout.horizon, layout.state_dim, |t, k| {
            values[layout.state_index(t, k)]
        });
        let controls = DMatrix::from_fn(layout.horizon, layout.control_dim, |t, k| {
            values[layout.control_index(t, k)]
        });
        Ok(Self { states, controls })
    }
}

/// A trajectory together with one slack value per scalar inequality row.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedParticle {
    pub particle: TrajectoryParticle,
    pub slack: DVector<f64>,
}

impl AugmentedParticle {
    pub fn new(particle: TrajectoryParticle, slack: DVector<f64>) -> Self {
        Self { particle, slack }
    }

    /// Wraps a trajectory with an all-zero slack block of length `n_slack`.
    pub fn with_zero_slack(particle: TrajectoryParticle, n_slack: usize) -> Self {
        Self {
            particle,
            slack: DVector::zeros(n_slack),
        }
    }

    pub fn len(&self) -> usize {
        self.particle.layout().len() + self.slack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.particle.is_finite() && self.slack.iter().all(|v| v.is_finite())
    }

    /// `[τ; z]` as one flat vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.particle.layout().len();
        let mut out = DVector::zeros(n + self.slack.len());
        self.particle.write_into(&mut out.as_mut_slice()[..n]);
        out.rows_mut(n, self.slack.len()).copy_from(&self.slack);
        out
    }

    pub fn from_vector(
        layout: TrajectoryLayout,
        n_slack: usize,
        values: &DVector<f64>,
    ) -> Result<Self> {
        let n = layout.len();
        if values.len() != n + n_slack {
            return Err(Error::DimensionMismatch {
                context: "augmented particle vector",
                expected: n + n_slack,
                actual: values.len(),
            });
        }
        let particle = TrajectoryParticle::from_slice(layout, values.as_slice())?;
        let slack = values.rows(n, n_slack).into_owned();
        Ok(Self { particle, slack })
    }
}

/// Discrete-time dynamics `x' = f(x, u)` with analytic derivatives.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(∂f/∂x, ∂f/∂u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// Hessian of each output component with respect to `[x; u]`.
    fn hessians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Non-negative trajectory cost `C(τ)`.
pub trait Cost: Send + Sync {
    fn value(&self, traj: &TrajectoryParticle) -> f64;
    /// Gradient with respect to the flattened `(X, U)` vector.
    fn gradient(&self, traj: &TrajectoryParticle) -> DVector<f64>;
}

/// Second derivative of one constraint row, stored on the coordinates it
/// actually touches. `block[(a, b)]` is `∂²h/∂τ_{indices[a]}∂τ_{indices[b]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHessian {
    pub indices: Vec<usize>,
    pub block: DMatrix<f64>,
}

impl LocalHessian {
    pub fn new(indices: Vec<usize>, block: DMatrix<f64>) -> Self {
        debug_assert_eq!(indices.len(), block.nrows());
        debug_assert_eq!(indices.len(), block.ncols());
        Self { indices, block }
    }

    /// Hessian of a linear row.
    pub fn zero() -> Self {
        Self {
            indices: Vec::new(),
            block: DMatrix::zeros(0, 0),
        }
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        Self {
            indices: (0..dense.nrows()).collect(),
            block: dense.clone(),
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for (a, &ia) in self.indices.iter().enumerate() {
            for (b, &ib) in self.indices.iter().enumerate() {
                out[(ia, ib)] += self.block[(a, b)];
            }
        }
        out
    }

    /// Embeds the block into a larger coordinate system.
    pub fn shifted(&self, map: impl Fn(usize) -> usize) -> Self {
        Self {
            indices: self.indices.iter().map(|&i| map(i)).collect(),
            block: self.block.clone(),
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let b = &self.block;
        (0..b.nrows()).all(|i| (0..b.ncols()).all(|j| (b[(i, j)] - b[(j, i)]).abs() <= tol))
    }
}

/// A vector-valued constraint over the whole trajectory.
pub trait Constraint: Send + Sync {
    fn name(&self) -> &str;
    fn rows(&self, layout: &TrajectoryLayout) -> usize;
    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64>;
    /// `rows × T·(d_x + d_u)` Jacobian.
    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64>;
    /// Per-row Hessians, or `None` when second derivatives are unavailable.
    fn hessians(&self, _traj: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        None
    }
}

/// Zero-mean Gaussian prior on every control, `p(u) = N(0, diag(σ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianControlPrior {
    pub std: DVector<f64>,
}

impl GaussianControlPrior {
    pub fn new(std: DVector<f64>) -> Self {
        Self { std }
    }

    /// `∇ log p(U)`, embedded in the flat trajectory layout.
    pub fn log_density_gradient(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        let layout = traj.layout();
        let mut grad = DVector::zeros(layout.len());
        for t in 0..layout.horizon {
            for k in 0..layout.control_dim {
                let var = self.std[k] * self.std[k];
                grad[layout.control_index(t, k)] = -traj.controls()[(t, k)] / var;
            }
        }
        grad
    }

    pub fn sample_controls<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(horizon, self.std.len(), |_, k| {
            let e: f64 = rng.sample(StandardNormal);
            e * self.std[k]
        })
    }
}

/// Box bounds on states and controls; infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub state_min: DVector<f64>,
    pub state_max: DVector<f64>,
    pub control_min: DVector<f64>,
    pub control_max: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(state_dim: usize, control_dim: usize) -> Self {
        Self {
            state_min: DVector::from_element(state_dim, f64::NEG_INFINITY),
            state_max: DVector::from_element(state_dim, f64::INFINITY),
            control_min: DVector::from_element(control_dim, f64::NEG_INFINITY),
            control_max: DVector::from_element(control_dim, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .state_min
            .iter()
            .zip(self.state_max.iter())
            .chain(self.control_min.iter().zip(self.control_max.iter()))
            .all(|(lo, hi)| lo <= hi);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("bounds require min <= max".into()))
        }
    }
}

/// How rows without an analytic Hessian are treated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum HessianFallback {
    /// Treat the missing second derivative as zero (locally linear repulsion).
    #[default]
    Zero,
    /// Central differences of the analytic Jacobian. Costs `2N` Jacobian calls.
    FiniteDifference { step: f64 },
}

/// A complete trajectory optimization problem.
#[derive(Clone)]
pub struct ProblemDef {
    pub layout: TrajectoryLayout,
    pub initial_state: DVector<f64>,
    /// `None` for problems without dynamics (pure constrained sampling).
    pub dynamics: Option<Arc<dyn Dynamics>>,
    pub cost: Arc<dyn Cost>,
    /// `γ` in `p(o=1|τ) = exp(-γ C(τ))`.
    pub likelihood_temperature: f64,
    pub control_prior: Option<GaussianControlPrior>,
    pub equalities: Vec<Arc<dyn Constraint>>,
    pub inequalities: Vec<Arc<dyn Constraint>>,
    pub bounds: Bounds,
    pub hessian_fallback: HessianFallback,
}

impl std::fmt::Debug for ProblemDef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemDef")
            .field("layout", &self.layout)
            .field("initial_state", &self.initial_state)
            .field("has_dynamics", &self.dynamics.is_some())
            .field("likelihood_temperature", &self.likelihood_temperature)
            .field(
                "equalities",
                &self.equalities.iter().map(|c| c.name()).collect::<Vec<_>>(),
            )
            .field(
                "inequalities",
                &self.inequalities.iter().map(|c| c.name()).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl ProblemDef {
    pub fn new(layout: TrajectoryLayout, initial_state: DVector<f64>, cost: Arc<dyn Cost>) -> Self {
        Self {
            layout,
            initial_state,
            dynamics: None,
            cost,
            likelihood_temperature: 1.0,
            control_prior: None,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            bounds: Bounds::unbounded(layout.state_dim, layout.control_dim),
            hessian_fallback: HessianFallback::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.likelihood_temperature <= 0.0 {
            return Err(Error::InvalidArgument(
                "likelihood temperature must be positive".into(),
            ));
        }
        if self.initial_state.len() != self.layout.state_dim {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: self.layout.state_dim,
                actual: self.initial_state.len(),
            });
        }
        if let Some(f) = &self.dynamics {
            if f.state_dim() != self.layout.state_dim || f.control_dim() != self.layout.control_dim {
                return Err(Error::InvalidArgument(
                    "dynamics dimensions do not match the trajectory layout".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn user_equality_count(&self) -> usize {
        self.equalities.iter().map(|c| c.rows(&self.layout)).sum()
    }

    pub fn defect_count(&self) -> usize {
        if self.dynamics.is_some() {
            self.layout.horizon * self.layout.state_dim
        } else {
            0
        }
    }

    /// Number of scalar inequality rows, which is also the slack length.
    pub fn inequality_count(&self) -> usize {
        self.inequalities.iter().map(|c| c.rows(&self.layout)).sum()
    }

    /// Total rows of the augmented equality system `ĥ`.
    pub fn constraint_count(&self) -> usize {
        self.user_equality_count() + self.defect_count() + self.inequality_count()
    }

    /// Length of the augmented decision vector `[τ; z]`.
    pub fn augmented_len(&self) -> usize {
        self.layout.len() + self.inequality_count()
    }

    /// `∇ log p(τ|o=1) = -γ∇C(τ) + ∇ log p(U)`.
    pub fn log_posterior_gradient(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        let mut grad = self.cost.gradient(traj) * (-self.likelihood_temperature);
        if let Some(prior) = &self.control_prior {
            grad += prior.log_density_gradient(traj);
        }
        grad
    }

    /// Stacked inequality values `g(τ)`.
    pub fn inequality_values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        stack_values(&self.inequalities, traj)
    }

    /// Stacked user equality values `h(τ)` (dynamics defects excluded).
    pub fn equality_values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        stack_values(&self.equalities, traj)
    }

    /// `ĥ(τ̂) = [h(τ); defects; g(τ) + ½z²]` without derivatives.
    pub fn augmented_values(&self, particle: &AugmentedParticle) -> Result<DVector<f64>> {
        let traj = &particle.particle;
        let mut out = Vec::with_capacity(self.constraint_count());
        out.extend(self.equality_values(traj).iter());
        if let Some(f) = &self.dynamics {
            out.extend(assemble_defects(traj, &self.initial_state, f.as_ref())?.iter());
        }
        let g = self.inequality_values(traj);
        if g.len() != particle.slack.len() {
            return Err(Error::DimensionMismatch {
                context: "slack length",
                expected: g.len(),
                actual: particle.slack.len(),
            });
        }
        out.extend(
            g.iter()
                .zip(particle.slack.iter())
                .map(|(gi, zi)| gi + 0.5 * zi * zi),
        );
        Ok(DVector::from_vec(out))
    }

    /// Penalty `Ĉ_λ(τ̂) = C(τ) + λ Σ|ĥ(τ̂)|`.
    pub fn penalty(&self, particle: &AugmentedParticle, lambda: f64) -> Result<f64> {
        let h = self.augmented_values(particle)?;
        Ok(self.cost.value(&particle.particle) + lambda * h.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Samples controls from `std` and rolls them out from the initial state.
    pub fn sample_rollouts<R: Rng + ?Sized>(
        &self,
        control_std: &DVector<f64>,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<TrajectoryParticle>> {
        let f = self
            .dynamics
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("problem has no dynamics to roll out".into()))?;
        let prior = GaussianControlPrior::new(control_std.clone());
        (0..count)
            .map(|_| {
                let controls = prior.sample_controls(self.layout.horizon, rng);
                let states = rollout_dynamics(&self.initial_state, &controls, f.as_ref())?;
                TrajectoryParticle::new(states, controls)
            })
            .collect()
    }
}

fn stack_values(constraints: &[Arc<dyn Constraint>], traj: &TrajectoryParticle) -> DVector<f64> {
    let mut out = Vec::new();
    for c in constraints {
        out.extend(c.values(traj).iter());
    }
    DVector::from_vec(out)
}

/// Stacked constraint values, Jacobian, and per-row Hessians of `ĥ`.
#[derive(Debug, Clone)]
pub struct ConstraintBundle {
    pub values: DVector<f64>,
    /// `M × (T·(d_x+d_u) + n_slack)`.
    pub jacobian: DMatrix<f64>,
    /// One entry per row; `None` where no second derivative is available.
    /// Slack rows always carry the `∂²/∂z_i² = 1` entry.
    pub hessians: Vec<Option<LocalHessian>>,
}

impl ConstraintBundle {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn hessian_available(&self) -> Vec<bool> {
        self.hessians.iter().map(|h| h.is_some()).collect()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Rolls the control sequence forward from `x0`: `x_t = f(x_{t-1}, u_{t-1})`.
pub fn rollout_dynamics(
    x0: &DVector<f64>,
    controls: &DMatrix<f64>,
    f: &dyn Dynamics,
) -> Result<DMatrix<f64>> {
    if x0.len() != f.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "rollout initial state",
            expected: f.state_dim(),
            actual: x0.len(),
        });
    }
    if controls.nrows() > 0 && controls.ncols() != f.control_dim() {
        return Err(Error::DimensionMismatch {
            context: "rollout controls",
            expected: f.control_dim(),
            actual: controls.ncols(),
        });
    }
    let horizon = controls.nrows();
    let mut states = DMatrix::zeros(horizon, f.state_dim());
    let mut x = x0.clone();
    for t in 0..horizon {
        x = f.step(&x, &controls.row(t).transpose());
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { timestep: t + 1 });
        }
        states.set_row(t, &x.transpose());
    }
    Ok(states)
}

/// Stacked dynamics defects `f(x_{t-1}, u_{t-1}) - x_t` for `t = 1..T`.
pub fn assemble_defects(
    particle: &TrajectoryParticle,
    x0: &DVector<f64>,
    f: &dyn Dynamics,
) -> Result<DVector<f64>> {
    let layout = particle.layout();
    check_dynamics_dims(&layout, x0, f)?;
    let dx = layout.state_dim;
    let mut out = DVector::zeros(layout.horizon * dx);
    let mut prev = x0.clone();
    for t in 0..layout.horizon {
        let next = f.step(&prev, &particle.control(t));
        let x_t = particle.state(t);
        out.rows_mut(t * dx, dx).copy_from(&(next - &x_t));
        prev = x_t;
    }
    Ok(out)
}

fn check_dynamics_dims(
    layout: &TrajectoryLayout,
    x0: &DVector<f64>,
    f: &dyn Dynamics,
) -> Result<()> {
    if layout.state_dim != f.state_dim() || x0.len() != f.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "dynamics state dimension",
            expected: f.state_dim(),
            actual: layout.state_dim,
        });
    }
    if layout.control_dim != f.control_dim() {
        return Err(Error::DimensionMismatch {
            context: "dynamics control dimension",
            expected: f.control_dim(),
            actual: layout.control_dim,
        });
    }
    Ok(())
}

/// Evaluates the augmented system `ĥ = [h(τ); defects; g(τ) + ½z²]` with its
/// Jacobian over `[τ; z]` and whatever Hessians the providers expose.
pub fn eval_constraints(problem: &ProblemDef, particle: &AugmentedParticle) -> Result<ConstraintBundle> {
    let traj = &particle.particle;
    let layout = problem.layout;
    if traj.layout() != layout {
        return Err(Error::DimensionMismatch {
            context: "particle layout",
            expected: layout.len(),
            actual: traj.layout().len(),
        });
    }
    let n_tau = layout.len();
    let n_slack = problem.inequality_count();
    if particle.slack.len() != n_slack {
        return Err(Error::DimensionMismatch {
            context: "slack length",
            expected: n_slack,
            actual: particle.slack.len(),
        });
    }
    let n = n_tau + n_slack;
    let m = problem.constraint_count();
    let mut values = DVector::zeros(m);
    let mut jacobian = DMatrix::zeros(m, n);
    let mut hessians: Vec<Option<LocalHessian>> = Vec::with_capacity(m);
    let mut row = 0;

    for c in &problem.equalities {
        let block = eval_provider(problem, c.as_ref(), traj, row)?;
        let r = block.values.len();
        values.rows_mut(row, r).copy_from(&block.values);
        jacobian.view_mut((row, 0), (r, n_tau)).copy_from(&block.jacobian);
        hessians.extend(block.hessians);
        row += r;
    }

    if let Some(f) = &problem.dynamics {
        let defects = assemble_defects(traj, &problem.initial_state, f.as_ref())?;
        let dx = layout.state_dim;
        let du = layout.control_dim;
        let mut prev = problem.initial_state.clone();
        for t in 0..layout.horizon {
            let u = traj.control(t);
            let (a, b) = f.jacobians(&prev, &u);
            let base = row + t * dx;
            if t > 0 {
                jacobian
                    .view_mut((base, layout.state_index(t - 1, 0)), (dx, dx))
                    .copy_from(&a);
            }
            jacobian
                .view_mut((base, layout.control_index(t, 0)), (dx, du))
                .copy_from(&b);
            for k in 0..dx {
                jacobian[(base + k, layout.state_index(t, k))] -= 1.0;
            }
            // Hessians over [x_{t-1}; u_{t-1}]; x_0 is fixed so only its
            // control block survives at t = 0.
            let dyn_hessians = f.hessians(&prev, &u);
            for k in 0..dx {
                let h = dyn_hessians.as_ref().map(|hs| {
                    let full = &hs[k];
                    if t > 0 {
                        let indices = (0..dx)
                            .map(|i| layout.state_index(t - 1, i))
                            .chain((0..du).map(|i| layout.control_index(t, i)))
                            .collect();
                        LocalHessian::new(indices, full.clone())
                    } else {
                        let indices = (0..du).map(|i| layout.control_index(t, i)).collect();
                        LocalHessian::new(indices, full.view((dx, dx), (du, du)).into_owned())
                    }
                });
                hessians.push(h);
            }
            prev = traj.state(t);
        }
        values.rows_mut(row, defects.len()).copy_from(&defects);
        if !defects.iter().all(|v| v.is_finite()) {
            let bad = defects.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::ConstraintProvider {
                row: row + bad,
                message: "dynamics produced a non-finite defect".into(),
            });
        }
        row += defects.len();
    }

    let mut slack_index = 0;
    for c in &problem.inequalities {
        let block = eval_provider(problem, c.as_ref(), traj, row)?;
        let r = block.values.len();
        for i in 0..r {
            let z = particle.slack[slack_index + i];
            values[row + i] = block.values[i] + 0.5 * z * z;
            jacobian
                .view_mut((row + i, 0), (1, n_tau))
                .copy_from(&block.jacobian.row(i));
            jacobian[(row + i, n_tau + slack_index + i)] = z;
            let slack_entry = n_tau + slack_index + i;
            let h = match &block.hessians[i] {
                Some(hg) => {
                    let k = hg.indices.len();
                    let mut indices = hg.indices.clone();
                    indices.push(slack_entry);
                    let mut b = DMatrix::zeros(k + 1, k + 1);
                    b.view_mut((0, 0), (k, k)).copy_from(&hg.block);
                    b[(k, k)] = 1.0;
                    LocalHessian::new(indices, b)
                }
                None => LocalHessian::new(vec![slack_entry], DMatrix::from_element(1, 1, 1.0)),
            };
            hessians.push(Some(h));
        }
        slack_index += r;
        row += r;
    }

    debug_assert_eq!(row, m);
    Ok(ConstraintBundle {
        values,
        jacobian,
        hessians,
    })
}

struct ProviderBlock {
    values: DVector<f64>,
    jacobian: DMatrix<f64>,
    hessians: Vec<Option<LocalHessian>>,
}

fn eval_provider(
    problem: &ProblemDef,
    c: &dyn Constraint,
    traj: &TrajectoryParticle,
    row: usize,
) -> Result<ProviderBlock> {
    let layout = problem.layout;
    let r = c.rows(&layout);
    let values = c.values(traj);
    if values.len() != r {
        return Err(Error::ConstraintProvider {
            row,
            message: format!(
                "'{}' returned {} values, expected {}",
                c.name(),
                values.len(),
                r
            ),
        });
    }
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::ConstraintProvider {
            row: row + bad,
            message: format!("'{}' returned a non-finite value", c.name()),
        });
    }
    let jacobian = c.jacobian(traj);
    if jacobian.nrows() != r || jacobian.ncols() != layout.len() {
        return Err(Error::ConstraintProvider {
            row,
            message: format!("'{}' returned a misshapen Jacobian", c.name()),
        });
    }
    if let Some((bad, _)) = jacobian
        .row_iter()
        .enumerate()
        .find(|(_, r)| !r.iter().all(|v| v.is_finite()))
    {
        return Err(Error::ConstraintProvider {
            row: row + bad,
            message: format!("'{}' returned a non-finite Jacobian", c.name()),
        });
    }
    let hessians = match c.hessians(traj) {
        Some(hs) => {
            if hs.len() != r {
                return Err(Error::ConstraintProvider {
                    row,
                    message: format!("'{}' returned {} Hessians, expected {}", c.name(), hs.len(), r),
                });
            }
            hs.into_iter().map(Some).collect()
        }
        None => match problem.hessian_fallback {
            HessianFallback::Zero => vec![None; r],
            HessianFallback::FiniteDifference { step } => {
                fd_constraint_hessians(c, traj, step)?.into_iter().map(Some).collect()
            }
        },
    };
    Ok(ProviderBlock {
        values,
        jacobian,
        hessians,
    })
}

fn fd_constraint_hessians(
    c: &dyn Constraint,
    traj: &TrajectoryParticle,
    step: f64,
) -> Result<Vec<LocalHessian>> {
    let layout = traj.layout();
    let n = layout.len();
    let base = traj.to_vector();
    let rows = c.rows(&layout);
    let mut dense = vec![DMatrix::zeros(n, n); rows];
    for j in 0..n {
        let mut plus = base.clone();
        plus[j] += step;
        let mut minus = base.clone();
        minus[j] -= step;
        let jp = c.jacobian(&TrajectoryParticle::from_slice(layout, plus.as_slice())?);
        let jm = c.jacobian(&TrajectoryParticle::from_slice(layout, minus.as_slice())?);
        for (l, h) in dense.iter_mut().enumerate() {
            for i in 0..n {
                h[(i, j)] = (jp[(l, i)] - jm[(l, i)]) / (2.0 * step);
            }
        }
    }
    Ok(dense
        .into_iter()
        .map(|h| LocalHessian::from_dense(&((&h + h.transpose()) * 0.5)))
        .collect())
}

/// Central-difference Jacobian; column `j` is `(f(p + s·e_j) - f(p - s·e_j)) / 2s`.
pub fn finite_diff_jacobian<F>(f: F, point: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let n = point.len();
    let mut columns = Vec::with_capacity(n);
    let mut x = point.clone();
    for j in 0..n {
        x[j] = point[j] + step;
        let plus = f(&x);
        x[j] = point[j] - step;
        let minus = f(&x);
        x[j] = point[j];
        if !plus.iter().chain(minus.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("finite-difference evaluation along coordinate {j}"),
            });
        }
        columns.push((plus - minus) / (2.0 * step));
    }
    if columns.is_empty() {
        let m = f(point).len();
        return Ok(DMatrix::zeros(m, 0));
    }
    Ok(DMatrix::from_columns(&columns))
}
