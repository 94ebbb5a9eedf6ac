//! Constrained sampling from a three-peak mixture on a circle.
//!
//! The "trajectory" is a single 2D point without dynamics. Points must lie
//! on a circle and outside a disk; one of the three mixture peaks sits in
//! the middle of the disk and acts as a trap for unconstrained ascent.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::problem::{Constraint, Cost, LocalHessian, ProblemDef, TrajectoryLayout, TrajectoryParticle};

pub const CIRCLE_RADIUS: f64 = 2.0;
pub const MIXTURE_VARIANCE: f64 = 0.25;
pub const EXCLUDED_RADIUS: f64 = 0.8;
/// Angles (degrees) of the mixture means on the circle.
pub const MEAN_ANGLES_DEG: [f64; 3] = [90.0, 210.0, 330.0];
/// Index of the peak placed inside the excluded disk.
pub const TRAPPED_MEAN: usize = 2;

#[derive(Debug, Clone)]
pub struct Toy2D {
    pub means: [Vector2<f64>; 3],
    pub variance: f64,
    pub circle_radius: f64,
    pub excluded_center: Vector2<f64>,
    pub excluded_radius: f64,
}

impl Default for Toy2D {
    fn default() -> Self {
        let means = MEAN_ANGLES_DEG.map(|a| {
            let r = a * PI / 180.0;
            Vector2::new(CIRCLE_RADIUS * r.cos(), CIRCLE_RADIUS * r.sin())
        });
        Self {
            means,
            variance: MIXTURE_VARIANCE,
            circle_radius: CIRCLE_RADIUS,
            excluded_center: means[TRAPPED_MEAN],
            excluded_radius: EXCLUDED_RADIUS,
        }
    }
}

fn point(traj: &TrajectoryParticle) -> Vector2<f64> {
    Vector2::new(traj.states()[(0, 0)], traj.states()[(0, 1)])
}

impl Toy2D {
    pub fn layout() -> TrajectoryLayout {
        TrajectoryLayout::new(1, 2, 0)
    }

    /// Mixture responsibilities and `-log Σ_k (1/3) N(x; μ_k, σ²I)` up to
    /// the Gaussian normalizer.
    fn responsibilities(&self, x: &Vector2<f64>) -> ([f64; 3], f64) {
        let e = self.means.map(|m| -(x - m).norm_squared() / (2.0 * self.variance));
        let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = e.map(|v| (v - top).exp());
        let total: f64 = w.iter().sum();
        (w.map(|v| v / total), -(top + (total / 3.0).ln()))
    }

    pub fn cost_value(&self, x: &Vector2<f64>) -> f64 {
        self.responsibilities(x).1
    }

    pub fn cost_gradient(&self, x: &Vector2<f64>) -> Vector2<f64> {
        let (r, _) = self.responsibilities(x);
        (0..3).fold(Vector2::zeros(), |acc, k| acc + (x - self.means[k]) * (r[k] / self.variance))
    }

    pub fn circle_value(&self, x: &Vector2<f64>) -> f64 {
        x.norm_squared() - self.circle_radius.powi(2)
    }

    pub fn exclusion_value(&self, x: &Vector2<f64>) -> f64 {
        self.excluded_radius.powi(2) - (x - self.excluded_center).norm_squared()
    }

    /// Index of the mixture mean closest in angle to `x`.
    pub fn nearest_mode(&self, x: &Vector2<f64>) -> usize {
        let angle = x.y.atan2(x.x);
        let dist = |m: &Vector2<f64>| {
            let d = (angle - m.y.atan2(m.x)).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d)
        };
        (0..3)
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .expect("three means")
    }

    pub fn problem(&self) -> ProblemDef {
        let shared = Arc::new(self.clone());
        let mut p = ProblemDef::new(Self::layout(), DVector::zeros(2), Arc::new(MixtureCost(shared.clone())));
        p.equalities.push(Arc::new(Circle(shared.clone())));
        p.inequalities.push(Arc::new(Exclusion(shared)));
        p
    }

    pub fn particle(x: f64, y: f64) -> TrajectoryParticle {
        TrajectoryParticle::from_slice(Self::layout(), &[x, y]).expect("2D layout")
    }
}

struct MixtureCost(Arc<Toy2D>);

impl Cost for MixtureCost {
    fn value(&self, traj: &TrajectoryParticle) -> f64 {
        self.0.cost_value(&point(traj))
    }

    fn gradient(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        let g = self.0.cost_gradient(&point(traj));
        DVector::from_column_slice(g.as_slice())
    }
}

struct Circle(Arc<Toy2D>);

impl Constraint for Circle {
    fn name(&self) -> &str {
        "circle"
    }

    fn rows(&self, _: &TrajectoryLayout) -> usize {
        1
    }

    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        DVector::from_element(1, self.0.circle_value(&point(traj)))
    }

    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64> {
        let x = point(traj);
        DMatrix::from_row_slice(1, 2, &[2.0 * x.x, 2.0 * x.y])
    }

    fn hessians(&self, _: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        Some(vec![LocalHessian::new(vec![0, 1], DMatrix::identity(2, 2) * 2.0)])
    }
}

struct Exclusion(Arc<Toy2D>);

impl Constraint for Exclusion {
    fn name(&self) -> &str {
        "exclusion"
    }

    fn rows(&self, _: &TrajectoryLayout) -> usize {
        1
    }

    fn values(&self, traj: &TrajectoryParticle) -> DVector<f64> {
        DVector::from_element(1, self.0.exclusion_value(&point(traj)))
    }

    fn jacobian(&self, traj: &TrajectoryParticle) -> DMatrix<f64> {
        let d = point(traj) - self.0.excluded_center;
        DMatrix::from_row_slice(1, 2, &[-2.0 * d.x, -2.0 * d.y])
    }

    fn hessians(&self, _: &TrajectoryParticle) -> Option<Vec<LocalHessian>> {
        Some(vec![LocalHessian::new(vec![0, 1], DMatrix::identity(2, 2) * -2.0)])
    }
}
