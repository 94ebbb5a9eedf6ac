//! 12-state quadrotor flying along a GP surface, with optional obstacles.
//!
//! State `[x, y, z, p, q, r, ẋ, ẏ, ż, ṗ, q̇, ṙ]` (position, Euler angles and
//! their rates), control `[u1, u2, u3, u4]` (collective thrust and three
//! torques), explicit Euler integration.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gp::{self, GpPosterior};
use crate::error::{Error, Result};
use crate::mpc::Environment;
use crate::problem::{
    rollout_dynamics, Bounds, Constraint, Cost, Dynamics, GaussianControlPrior, LocalHessian, ProblemDef,
    TrajectoryLayout, TrajectoryParticle,
};

pub const STATE_DIM: usize = 12;
pub const CONTROL_DIM: usize = 4;
pub const HORIZON: usize = 12;
pub const GOAL_XY: [f64; 2] = [4.0, 4.0];
pub const START_RANGE: [f64; 2] = [-4.5, -3.0];
pub const GOAL_THRESHOLD: f64 = 0.3;
pub const STATE_COST: [f64; STATE_DIM] = [5.0, 5.0, 0.5, 2.5, 2.5, 0.025, 1.25, 1.25, 1.25, 2.5, 2.5, 2.5];
pub const CONTROL_COST: [f64; CONTROL_DIM] = [0.5, 128.0, 128.0, 128.0];
pub const OBSTACLE_RADIUS: f64 = 0.5;
pub const OBSTACLE_SPEED: f64 = 0.5;
pub const OBSTACLE_START: [f64; 2] = [1.0, -1.0];
/// Scale `γ` of the cost in the trajectory likelihood `exp(-γ C(τ))`.
pub const LIKELIHOOD_TEMPERATURE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub thrust_gain: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.5, 0.1, 0.3],
            thrust_gain: 5.0,
            gravity: -9.81,
            dt: 0.1,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || self.inertia.iter().any(|&i| !(i > 0.0)) {
            return Err(Error::InvalidConfig("mass and inertias must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        Ok(())
    }

    /// Collective thrust that cancels gravity at level attitude.
    pub fn hover_thrust(&self) -> f64 {
        self.gravity * self.mass / self.thrust_gain
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadrotorDynamics {
    pub params: QuadrotorParams,
}

struct Trig {
    sp: f64,
    cp: f64,
    sq: f64,
    cq: f64,
    tq: f64,
    sr: f64,
    cr: f64,
}

impl Trig {
    fn new(x: &DVector<f64>) -> Self {
        let (sp, cp) = x[3].sin_cos();
        let (sq, cq) = x[4].sin_cos();
        let (sr, cr) = x[5].sin_cos();
        Self {
            sp,
            cp,
            sq,
            cq,
            tq: sq / cq,
            sr,
            cr,
        }
    }

    /// Attitude factors of the three linear accelerations.
    fn thrust_dirs(&self) -> [f64; 3] {
        [
            self.sp * self.sr + self.cr * self.cp * self.sq,
            self.cr * self.sp - self.cp * self.sr * self.sq,
            self.cp * self.cq,
        ]
    }

    /// `∂/∂(p, q, r)` of each thrust direction factor.
    fn thrust_dir_gradients(&self) -> [[f64; 3]; 3] {
        let Trig { sp, cp, sq, cq, sr, cr, .. } = *self;
        [
            [cp * sr - cr * sp * sq, cr * cp * cq, sp * cr - sr * cp * sq],
            [cr * cp + sp * sr * sq, -cp * sr * cq, -sr * sp - cp * cr * sq],
            [-sp * cq, -cp * sq, 0.0],
        ]
    }

    /// Second derivatives over `(p, q, r)` of each thrust direction factor.
    fn thrust_dir_hessians(&self) -> [[[f64; 3]; 3]; 3] {
        let Trig { sp, cp, sq, cq, sr, cr, .. } = *self;
        let a_pp = -sp * sr - cr * cp * sq;
        let a_pq = -cr * sp * cq;
        let a_pr = cp * cr + sr * sp * sq;
        let a_qq = -cr * cp * sq;
        let a_qr = -sr * cp * cq;
        let b_pp = -cr * sp + cp * sr * sq;
        let b_pq = sp * sr * cq;
        let b_pr = -sr * cp + sp * cr * sq;
        let b_qq = cp * sr * sq;
        let b_qr = -cp * cr * cq;
        [
            [[a_pp, a_pq, a_pr], [a_pq, a_qq, a_qr], [a_pr, a_qr, a_pp]],
            [[b_pp, b_pq, b_pr], [b_pq, b_qq, b_qr], [b_pr, b_qr, b_pp]],
            [[-cp * cq, sp * sq, 0.0], [sp * sq, -cp * cq, 0.0], [0.0, 0.0, 0.0]],
        ]
    }
}

const P: usize = 3;
const Q: usize = 4;
const WP: usize = 9;
const WQ: usize = 10;
const WR: usize = 11;
const U1: usize = 12;

impl Dynamics for QuadrotorDynamics {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let pr = &self.params;
        let t = Trig::new(x);
        let (wp, wq, wr) = (x[WP], x[WQ], x[WR]);
        let thrust = pr.thrust_gain * u[0] / pr.mass;
        let dirs = t.thrust_dirs();
        let [ix, iy, iz] = pr.inertia;
        let rate = [
            x[6],
            x[7],
            x[8],
            wp + wq * t.sp * t.tq + wr * t.cp * t.tq,
            wq * t.cp - wr * t.sp,
            (wq * t.sp + wr * t.cp) / t.cq,
            -dirs[0] * thrust,
            -dirs[1] * thrust,
            pr.gravity - dirs[2] * thrust,
            ((iy - iz) * wq * wr + pr.thrust_gain * u[1]) / ix,
            ((iz - ix) * wp * wr + pr.thrust_gain * u[2]) / iy,
            ((ix - iy) * wp * wq + pr.thrust_gain * u[3]) / iz,
        ];
        DVector::from_fn(STATE_DIM, |i, _| x[i] + pr.dt * rate[i])
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let pr = &self.params;
        let dt = pr.dt;
        let t = Trig::new(x);
        let (wp, wq, wr) = (x[WP], x[WQ], x[WR]);
        let kappa = pr.thrust_gain / pr.mass;
        let [ix, iy, iz] = pr.inertia;
        let sec2 = 1.0 / (t.cq * t.cq);
        let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
        let mut b = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
        for i in 0..3 {
            a[(i, 6 + i)] += dt;
        }
        // Euler angle kinematics.
        a[(3, P)] += dt * (wq * t.cp * t.tq - wr * t.sp * t.tq);
        a[(3, Q)] += dt * (wq * t.sp + wr * t.cp) * sec2;
        a[(3, WP)] += dt;
        a[(3, WQ)] += dt * t.sp * t.tq;
        a[(3, WR)] += dt * t.cp * t.tq;
        a[(4, P)] += dt * (-wq * t.sp - wr * t.cp);
        a[(4, WQ)] += dt * t.cp;
        a[(4, WR)] += dt * -t.sp;
        a[(5, P)] += dt * (wq * t.cp - wr * t.sp) / t.cq;
        a[(5, Q)] += dt * (wq * t.sp + wr * t.cp) * t.sq * sec2;
        a[(5, WQ)] += dt * t.sp / t.cq;
        a[(5, WR)] += dt * t.cp / t.cq;
        // Linear accelerations.
        let dirs = t.thrust_dirs();
        let grads = t.thrust_dir_gradients();
        for k in 0..3 {
            for (j, g) in grads[k].iter().enumerate() {
                a[(6 + k, P + j)] += -dt * kappa * u[0] * g;
            }
            b[(6 + k, 0)] = -dt * kappa * dirs[k];
        }
        // Angular accelerations.
        a[(9, WQ)] += dt * (iy - iz) * wr / ix;
        a[(9, WR)] += dt * (iy - iz) * wq / ix;
        a[(10, WP)] += dt * (iz - ix) * wr / iy;
        a[(10, WR)] += dt * (iz - ix) * wp / iy;
        a[(11, WP)] += dt * (ix - iy) * wq / iz;
        a[(11, WQ)] += dt * (ix - iy) * wp / iz;
        b[(9, 1)] = dt * pr.thrust_gain / ix;
        b[(10, 2)] = dt * pr.thrust_gain / iy;
        b[(11, 3)] = dt * pr.thrust_gain / iz;
        (a, b)
    }

    fn hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let pr = &self.params;
        let dt = pr.dt;
        let t = Trig::new(x);
        let (wq, wr) = (x[WQ], x[WR]);
        let kappa = pr.thrust_gain / pr.mass;
        let [ix, iy, iz] = pr.inertia;
        let n = STATE_DIM + CONTROL_DIM;
        let mut out = vec![DMatrix::zeros(n, n); STATE_DIM];
        let set = |m: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
            m[(i, j)] = dt * v;
            m[(j, i)] = dt * v;
        };
        let sec2 = 1.0 / (t.cq * t.cq);
        let a = wq * t.sp + wr * t.cp;
        let b = wq * t.cp - wr * t.sp;

        let h = &mut out[3];
        set(h, P, P, -a * t.tq);
        set(h, P, Q, b * sec2);
        set(h, P, WQ, t.cp * t.tq);
        set(h, P, WR, -t.sp * t.tq);
        set(h, Q, Q, 2.0 * a * sec2 * t.tq);
        set(h, Q, WQ, t.sp * sec2);
        set(h, Q, WR, t.cp * sec2);

        let h = &mut out[4];
        set(h, P, P, -b);
        set(h, P, WQ, -t.sp);
        set(h, P, WR, -t.cp);

        let h = &mut out[5];
        set(h, P, P, -a / t.cq);
        set(h, P, Q, b * t.sq * sec2);
        set(h, P, WQ, t.cp / t.cq);
        set(h, P, WR, -t.sp / t.cq);
        set(h, Q, Q, a * (t.cq * t.cq + 2.0 * t.sq * t.sq) / (t.cq * t.cq * t.cq));
        set(h, Q, WQ, t.sp * t.sq * sec2);
        set(h, Q, WR, t.cp * t.sq * sec2);

        let grads = t.thrust_dir_gradients();
        let hess = t.thrust_dir_hessians();
        for k in 0..3 {
            let h = &mut out[6 + k];
            for i in 0..3 {
                for j in i..3 {
                    set(h, P + i, P + j, -kappa * u[0] * hess[k][i][j]);
                }
                set(h, P + i, U1, -kappa * grads[k][i]);
            }
        }

        set(&mut out[9], WQ, WR, (iy - iz) / ix);
        set(&mut out[10], WP, WR, (iz - ix) / iy);
        set(&mut out[11], WP, WQ, (ix - iy) / iz);
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleVariant {
    None,
    Static,
    Dynamic,
}

impl FromStr for ObstacleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::InvalidArgument(format!("unknown obstacle variant `{other}`"))),
        }
    }
}

/// `Σ_{t<T} (x_t - x_g)ᵀQ(x_t - x_g) + (x_T - x_g)ᵀ·2Q·(x_T - x_g) + Σ_t u_tᵀRu_t`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub state_weight: DVector<f64>,
    pub terminal_weight: DVector<f64>,
    pub control_weight: DVector<f64>,
    pub goal: DVector<f64>,
}

impl QuadraticCost {
    fn state_weight_at(&self, t: usize, horizon: usize) -> &DVector<f64> {
        if t + 1 == horizon {
            &self.terminal_weight
        } else {
            &self.state_weight
        }
    }
}

impl Cost for QuadraticCost {
    fn value(&self, traj: &TrajectoryParticle) -> f64 {
        let horizon = traj.horizon();
        let mut c = 0.0;
        for t in 0..horizon {
            let w = self.state_weight_at(t, horizon);
            for k in 0..traj.state_dim() {
                let d = traj.states()[(t, k)] - self.goal[k];
                c += w[k] * d * d;
            }
            for k in 0..traj.control_dim() {
                let u = traj.controls()[(t, k)];
                c += self.control_weight[k] * u * u;
            }
        }
        c
    }

    fn gradient(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        let layout = traj.layout();
        let mut g = DVector::zeros(layout.len());
        for t in 0..layout.horizon {
            let w = self.state_weight_at(t, layout.horizon);
            for k in 0..layout.state_dim {
                g[layout.state_index(t, k)] = 2.0 * w[k] * (traj.states()[(t, k)] - self.goal[k]);
            }
            for k in 0..layout.control_dim {
                g[layout.control_index(t, k)] = 2.0 * self.control_weight[k] * traj.controls()[(t, k)];
            }
        }
        g
    }
}

fn xy(traj: &TrajectoryParticle, t: usize) -> Vector2<f64> {
    Vector2::new(traj.states()[(t, 0)], traj.states()[(t, 1)])
}

/// `z_t - f(x_t, y_t) = 0` for every planned state.
#[derive(Debug, Clone)]
pub struct SurfaceConstraint(pub Arc<GpPosterior>);

impl SurfaceConstraint {
    pub fn violation(&self, state: &DVector<f64>) -> f64 {
        state[2] - self.0.value(&Vector2::new(state[0], state[1]))
    }
}

impl Constraint for SurfaceConstraint {
    fn name(&self) -> &str {
        "surface"
    }

    fn rows(&self, layout: &TrajectoryLayout) -> usize {
        layout.horizon
    }

    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        DVector::from_fn(traj.horizon(), |t, _| traj.states()[(t, 2)] - self.0.value(&xy(traj, t)))
    }

    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64> {
        let layout = traj.layout();
        let mut j = DMatrix::zeros(layout.horizon, layout.len());
        for t in 0..layout.horizon {
            let (_, g) = self.0.value_and_gradient(&xy(traj, t));
            j[(t, layout.state_index(t, 0))] = -g.x;
            j[(t, layout.state_index(t, 1))] = -g.y;
            j[(t, layout.state_index(t, 2))] = 1.0;
        }
        j
    }

    fn hessians(&self, traj: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        let layout = traj.layout();
        Some(
            (0..layout.horizon)
                .map(|t| {
                    let h = -self.0.hessian(&xy(traj, t));
                    LocalHessian::new(
                        vec![layout.state_index(t, 0), layout.state_index(t, 1)],
                        DMatrix::from_column_slice(2, 2, h.as_slice()),
                    )
                })
                .collect(),
        )
    }
}

/// `f_obs(x_t, y_t) ≤ 0` for every planned state.
#[derive(Debug, Clone)]
pub struct ObstacleField(pub Arc<GpPosterior>);

impl Constraint for ObstacleField {
    fn name(&self) -> &str {
        "obstacle"
    }

    fn rows(&self, layout: &TrajectoryLayout) -> usize {
        layout.horizon
    }

    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        DVector::from_fn(traj.horizon(), |t, _| self.0.value(&xy(traj, t)))
    }

    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64> {
        let layout = traj.layout();
        let mut j = DMatrix::zeros(layout.horizon, layout.len());
        for t in 0..layout.horizon {
            let (_, g) = self.0.value_and_gradient(&xy(traj, t));
            j[(t, layout.state_index(t, 0))] = g.x;
            j[(t, layout.state_index(t, 1))] = g.y;
        }
        j
    }

    fn hessians(&self, traj: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        let layout = traj.layout();
        Some(
            (0..layout.horizon)
                .map(|t| {
                    let h = self.0.hessian(&xy(traj, t));
                    LocalHessian::new(
                        vec![layout.state_index(t, 0), layout.state_index(t, 1)],
                        DMatrix::from_column_slice(2, 2, h.as_slice()),
                    )
                })
                .collect(),
        )
    }
}

/// Keeps every planned state outside a vertical cylinder:
/// `r² - ‖(x_t, y_t) - c‖² ≤ 0`.
#[derive(Debug, Clone)]
pub struct CylinderObstacle {
    pub center: Vector2<f64>,
    pub radius: f64,
}

impl CylinderObstacle {
    pub fn value_at(&self, p: &Vector2<f64>) -> f64 {
        self.radius * self.radius - (p - self.center).norm_squared()
    }
}

impl Constraint for CylinderObstacle {
    fn name(&self) -> &str {
        "obstacle"
    }

    fn rows(&self, layout: &TrajectoryLayout) -> usize {
        layout.horizon
    }

    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        DVector::from_fn(traj.horizon(), |t, _| self.value_at(&xy(traj, t)))
    }

    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64> {
        let layout = traj.layout();
        let mut j = DMatrix::zeros(layout.horizon, layout.len());
        for t in 0..layout.horizon {
            let d = xy(traj, t) - self.center;
            j[(t, layout.state_index(t, 0))] = -2.0 * d.x;
            j[(t, layout.state_index(t, 1))] = -2.0 * d.y;
        }
        j
    }

    fn hessians(&self, traj: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        let layout = traj.layout();
        Some(
            (0..layout.horizon)
                .map(|t| {
                    LocalHessian::new(
                        vec![layout.state_index(t, 0), layout.state_index(t, 1)],
                        DMatrix::identity(2, 2) * -2.0,
                    )
                })
                .collect(),
        )
    }
}

/// Obstacle moving on a straight line at constant speed across the
/// start-goal diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstaclePath {
    pub start: Vector2<f64>,
    pub velocity: Vector2<f64>,
    pub radius: f64,
}

impl Default for ObstaclePath {
    fn default() -> Self {
        let dir = Vector2::new(-1.0, 1.0).normalize();
        Self {
            start: Vector2::new(OBSTACLE_START[0], OBSTACLE_START[1]),
            velocity: dir * OBSTACLE_SPEED,
            radius: OBSTACLE_RADIUS,
        }
    }
}

impl ObstaclePath {
    pub fn center_at(&self, time: f64) -> Vector2<f64> {
        self.start + self.velocity * time
    }
}

/// The quadrotor benchmark: shared surface, obstacle field and parameters.
#[derive(Debug, Clone)]
pub struct QuadrotorTask {
    pub params: QuadrotorParams,
    pub variant: ObstacleVariant,
    pub horizon: usize,
    pub surface: Arc<GpPosterior>,
    pub obstacles: Option<Arc<GpPosterior>>,
    pub path: ObstaclePath,
    pub goal_xy: Vector2<f64>,
    pub goal_threshold: f64,
    pub likelihood_temperature: f64,
}

impl QuadrotorTask {
    pub fn new(params: QuadrotorParams, variant: ObstacleVariant) -> Result<Self> {
        params.validate()?;
        let obstacles = match variant {
            ObstacleVariant::Static => Some(Arc::new(gp::default_obstacles()?)),
            _ => None,
        };
        Ok(Self {
            params,
            variant,
            horizon: HORIZON,
            surface: Arc::new(gp::default_surface()?),
            obstacles,
            path: ObstaclePath::default(),
            goal_xy: Vector2::new(GOAL_XY[0], GOAL_XY[1]),
            goal_threshold: GOAL_THRESHOLD,
            likelihood_temperature: LIKELIHOOD_TEMPERATURE,
        })
    }

    pub fn dynamics(&self) -> QuadrotorDynamics {
        QuadrotorDynamics { params: self.params }
    }

    pub fn goal_position(&self) -> [f64; 3] {
        [self.goal_xy.x, self.goal_xy.y, self.surface.value(&self.goal_xy)]
    }

    pub fn goal_state(&self) -> DVector<f64> {
        let mut g = DVector::zeros(STATE_DIM);
        g.rows_mut(0, 3).copy_from_slice(&self.goal_position());
        g
    }

    /// Hovering start on the surface at `(x, y)`.
    pub fn start_state(&self, x: f64, y: f64) -> DVector<f64> {
        let mut s = DVector::zeros(STATE_DIM);
        s[0] = x;
        s[1] = y;
        s[2] = self.surface.value(&Vector2::new(x, y));
        s
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let x = rng.gen_range(START_RANGE[0]..START_RANGE[1]);
        let y = rng.gen_range(START_RANGE[0]..START_RANGE[1]);
        self.start_state(x, y)
    }

    pub fn layout(&self) -> TrajectoryLayout {
        TrajectoryLayout::new(self.horizon, STATE_DIM, CONTROL_DIM)
    }

    /// Control prior `N(0, 2R⁻¹)` whose log-density matches the control cost.
    pub fn control_std(&self) -> DVector<f64> {
        DVector::from_iterator(CONTROL_DIM, CONTROL_COST.iter().map(|r| (2.0 / r).sqrt()))
    }

    pub fn cost(&self) -> QuadraticCost {
        let q = DVector::from_column_slice(&STATE_COST);
        QuadraticCost {
            terminal_weight: &q * 2.0,
            state_weight: q,
            control_weight: DVector::from_column_slice(&CONTROL_COST),
            goal: self.goal_state(),
        }
    }

    /// Planning problem from `x0`, with the dynamic obstacle frozen at
    /// `obstacle_time`.
    pub fn problem(&self, x0: DVector<f64>, obstacle_time: f64) -> ProblemDef {
        let mut p = ProblemDef::new(self.layout(), x0, Arc::new(self.cost()));
        p.dynamics = Some(Arc::new(self.dynamics()));
        p.likelihood_temperature = self.likelihood_temperature;
        p.equalities.push(Arc::new(SurfaceConstraint(self.surface.clone())));
        match self.variant {
            ObstacleVariant::None => {}
            ObstacleVariant::Static => {
                let field = self.obstacles.clone().expect("static variant has an obstacle field");
                p.inequalities.push(Arc::new(ObstacleField(field)));
            }
            ObstacleVariant::Dynamic => p.inequalities.push(Arc::new(self.cylinder_at(obstacle_time))),
        }
        let mut bounds = Bounds::unbounded(STATE_DIM, CONTROL_DIM);
        for k in 0..2 {
            bounds.state_min[k] = -gp::WORKSPACE_HALF_WIDTH;
            bounds.state_max[k] = gp::WORKSPACE_HALF_WIDTH;
        }
        p.bounds = bounds;
        p
    }

    pub fn cylinder_at(&self, time: f64) -> CylinderObstacle {
        CylinderObstacle {
            center: self.path.center_at(time),
            radius: self.path.radius,
        }
    }

    /// Rollouts of controls drawn around hover from the control prior.
    pub fn initial_particles<R: Rng + ?Sized>(
        &self,
        problem: &ProblemDef,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<TrajectoryParticle>> {
        let prior = GaussianControlPrior::new(self.control_std());
        let f = self.dynamics();
        (0..count)
            .map(|_| {
                let mut controls = prior.sample_controls(self.horizon, rng);
                controls.column_mut(0).add_scalar_mut(self.params.hover_thrust());
                let states = rollout_dynamics(&problem.initial_state, &controls, &f)?;
                TrajectoryParticle::new(states, controls)
            })
            .collect()
    }

    pub fn env(&self, x0: DVector<f64>) -> QuadrotorEnv {
        QuadrotorEnv {
            task: self.clone(),
            dynamics: self.dynamics(),
            state: x0,
            steps: 0,
        }
    }
}

/// Simulator stepping the same dynamics the planner uses.
#[derive(Debug, Clone)]
pub struct QuadrotorEnv {
    task: QuadrotorTask,
    dynamics: QuadrotorDynamics,
    state: DVector<f64>,
    steps: usize,
}

impl QuadrotorEnv {
    pub fn time(&self) -> f64 {
        self.steps as f64 * self.task.params.dt
    }

    fn obstacle_value(&self) -> Option<f64> {
        let p = Vector2::new(self.state[0], self.state[1]);
        match self.task.variant {
            ObstacleVariant::None => None,
            ObstacleVariant::Static => Some(self.task.obstacles.as_ref().expect("obstacle field").value(&p)),
            ObstacleVariant::Dynamic => Some(self.task.cylinder_at(self.time()).value_at(&p)),
        }
    }
}

impl Environment for QuadrotorEnv {
    fn state(&self) -> DVector<f64> {
        self.state.clone()
    }

    fn step(&mut self, control: &DVector<f64>) -> Result<()> {
        let next = self.dynamics.step(&self.state, control);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::EnvStep {
                step: self.steps,
                message: "non-finite state".into(),
            });
        }
        self.state = next;
        self.steps += 1;
        Ok(())
    }

    fn violation_names(&self) -> Vec<String> {
        let mut names = vec!["surface".to_string()];
        if self.task.variant != ObstacleVariant::None {
            names.push("obstacle".to_string());
        }
        names
    }

    fn violations(&self) -> Vec<f64> {
        let mut v = vec![SurfaceConstraint(self.task.surface.clone()).violation(&self.state).abs()];
        if let Some(o) = self.obstacle_value() {
            v.push(o.max(0.0));
        }
        v
    }

    fn sync_problem(&self, problem: &mut ProblemDef) {
        if self.task.variant == ObstacleVariant::Dynamic {
            problem.inequalities = vec![Arc::new(self.task.cylinder_at(self.time()))];
        }
    }

    fn goal_distance(&self) -> Option<f64> {
        let g = self.task.goal_position();
        Some(((self.state[0] - g[0]).powi(2) + (self.state[1] - g[1]).powi(2) + (self.state[2] - g[2]).powi(2)).sqrt())
    }
}
