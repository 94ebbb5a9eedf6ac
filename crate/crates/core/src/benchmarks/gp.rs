//! Noise-free Gaussian process regression over the plane with an RBF
//! kernel, used to build smooth random surfaces and obstacle fields.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal jitter added to kernel matrices before factorization.
pub const JITTER: f64 = 1e-8;

fn rbf(a: &Vector2<f64>, b: &Vector2<f64>, lengthscale: f64) -> f64 {
    (-(a - b).norm_squared() / (2.0 * lengthscale * lengthscale)).exp()
}

fn kernel_matrix(points: &[Vector2<f64>], lengthscale: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| rbf(&points[i], &points[j], lengthscale))
}

/// `n × n` grid spanning `[lo, hi]²`, row-major in `y` then `x`.
pub fn grid(n: usize, lo: f64, hi: f64) -> Vec<Vector2<f64>> {
    let coord = |i: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            out.push(Vector2::new(coord(ix), coord(iy)));
        }
    }
    out
}

/// Eigen-directions of the prior kernel matrix with eigenvalue below this
/// fraction of the largest are dropped when sampling.
pub const PRIOR_RANK_CUTOFF: f64 = 1e-4;

/// Draws function values at `points` from a zero-mean GP prior.
///
/// Samples through the eigendecomposition of the kernel matrix and drops
/// the directions below [`PRIOR_RANK_CUTOFF`]. Dense grids make the kernel
/// matrix nearly singular; keeping those directions would put components
/// in the sample that the jittered posterior cannot reproduce, and it would
/// no longer interpolate its own observations.
pub fn sample_prior<R: Rng + ?Sized>(points: &[Vector2<f64>], lengthscale: f64, rng: &mut R) -> DVector<f64> {
    let eig = kernel_matrix(points, lengthscale).symmetric_eigen();
    let n = points.len();
    let top = eig.eigenvalues.max();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scaled = DVector::from_fn(n, |i, _| {
        let l = eig.eigenvalues[i];
        if l >= PRIOR_RANK_CUTOFF * top {
            l.sqrt() * z[i]
        } else {
            0.0
        }
    });
    &eig.eigenvectors * scaled
}

/// Posterior mean `m + k(x)ᵀ(K + εI)⁻¹(y - m)` of a noise-free GP.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    points: Vec<Vector2<f64>>,
    weights: DVector<f64>,
    lengthscale: f64,
    mean: f64,
}

impl GpPosterior {
    pub fn fit(points: Vec<Vector2<f64>>, values: &DVector<f64>, lengthscale: f64, mean: f64) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch {
                context: "GP observations",
                expected: points.len(),
                actual: values.len(),
            });
        }
        if !(lengthscale > 0.0) {
            return Err(Error::InvalidArgument("GP lengthscale must be positive".into()));
        }
        let n = points.len();
        let k = kernel_matrix(&points, lengthscale) + DMatrix::identity(n, n) * JITTER;
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::SingularKernel(format!("{n} observations, lengthscale {lengthscale}")))?;
        let weights = chol.solve(&values.add_scalar(-mean));
        Ok(Self {
            points,
            weights,
            lengthscale,
            mean,
        })
    }

    pub fn value(&self, q: &Vector2<f64>) -> f64 {
        self.mean
            + self
                .points
                .iter()
                .zip(self.weights.iter())
                .map(|(p, w)| w * rbf(q, p, self.lengthscale))
                .sum::<f64>()
    }

    pub fn value_and_gradient(&self, q: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let l2 = self.lengthscale * self.lengthscale;
        let mut v = self.mean;
        let mut g = Vector2::zeros();
        for (p, w) in self.points.iter().zip(self.weights.iter()) {
            let k = w * rbf(q, p, self.lengthscale);
            v += k;
            g -= (q - p) * (k / l2);
        }
        (v, g)
    }

    pub fn hessian(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let l2 = self.lengthscale * self.lengthscale;
        let mut h = Matrix2::zeros();
        for (p, w) in self.points.iter().zip(self.weights.iter()) {
            let k = w * rbf(q, p, self.lengthscale);
            let d = q - p;
            h += (d * d.transpose() / (l2 * l2) - Matrix2::identity() / l2) * k;
        }
        h
    }

    pub fn observations(&self) -> &[Vector2<f64>] {
        &self.points
    }
}

/// Workspace side length is `2·WORKSPACE_HALF_WIDTH`.
pub const WORKSPACE_HALF_WIDTH: f64 = 5.0;
pub const GRID_SIZE: usize = 10;
pub const LENGTHSCALE: f64 = 2.0;
pub const SURFACE_SEED: u64 = 0;
pub const OBSTACLE_MEAN: f64 = -0.5;
/// Obstacle-free anchors at the start and goal corners.
pub const OBSTACLE_ANCHORS: [(f64, f64); 2] = [(-4.0, -4.0), (4.0, 4.0)];
pub const OBSTACLE_ANCHOR_VALUE: f64 = -2.0;

/// The surface `z = f(x, y)`: a zero-mean prior sample on the workspace grid,
/// interpolated by the posterior mean.
pub fn default_surface() -> Result<GpPosterior> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SURFACE_SEED);
    let pts = grid(GRID_SIZE, -WORKSPACE_HALF_WIDTH, WORKSPACE_HALF_WIDTH);
    let y = sample_prior(&pts, LENGTHSCALE, &mut rng);
    GpPosterior::fit(pts, &y, LENGTHSCALE, 0.0)
}

/// Obstacle field with free region `f(x, y) ≤ 0`.
///
/// The grid sample is drawn conditioned on the anchor observations so the
/// joint observation set stays consistent with the kernel; anchors sit
/// close to grid nodes and independent values there would make the
/// interpolant oscillate wildly.
pub fn default_obstacles() -> Result<GpPosterior> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SURFACE_SEED + 1);
    let grid_pts = grid(GRID_SIZE, -WORKSPACE_HALF_WIDTH, WORKSPACE_HALF_WIDTH);
    let anchors: Vec<Vector2<f64>> = OBSTACLE_ANCHORS.iter().map(|&(x, y)| Vector2::new(x, y)).collect();
    let mut all = grid_pts.clone();
    all.extend(anchors.iter().cloned());
    let joint = sample_prior(&all, LENGTHSCALE, &mut rng);

    // Condition on the anchors: f + K_·a K_aa⁻¹ (y_a - m - f_a).
    let n = grid_pts.len();
    let na = anchors.len();
    let kaa = kernel_matrix(&anchors, LENGTHSCALE) + DMatrix::identity(na, na) * JITTER;
    let kxa = DMatrix::from_fn(all.len(), na, |i, j| rbf(&all[i], &anchors[j], LENGTHSCALE));
    let target = DVector::from_element(na, OBSTACLE_ANCHOR_VALUE - OBSTACLE_MEAN);
    let resid = target - joint.rows(n, na);
    let correction = kxa * kaa
        .cholesky()
        .ok_or_else(|| Error::SingularKernel("obstacle anchors".into()))?
        .solve(&resid);
    let values = (joint + correction).add_scalar(OBSTACLE_MEAN);
    GpPosterior::fit(all, &values, LENGTHSCALE, OBSTACLE_MEAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_gradient(gp: &GpPosterior, q: &Vector2<f64>, h: f64) -> Vector2<f64> {
        let e = |i: usize| if i == 0 { Vector2::new(h, 0.0) } else { Vector2::new(0.0, h) };
        Vector2::from_fn(|i, _| (gp.value(&(q + e(i))) - gp.value(&(q - e(i)))) / (2.0 * h))
    }

    #[test]
    fn no_signal_gives_zero_mean_everywhere() {
        let pts = grid(3, -1.0, 1.0);
        let gp = GpPosterior::fit(pts, &DVector::zeros(9), 1.0, 0.0).unwrap();
        assert_eq!(gp.value(&Vector2::new(0.3, -7.0)), 0.0);
        let (_, g) = gp.value_and_gradient(&Vector2::new(0.3, 0.2));
        assert_eq!(g, Vector2::zeros());
    }

    #[test]
    fn surface_interpolates_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(SURFACE_SEED);
        let pts = grid(GRID_SIZE, -WORKSPACE_HALF_WIDTH, WORKSPACE_HALF_WIDTH);
        let y = sample_prior(&pts, LENGTHSCALE, &mut rng);
        let gp = default_surface().unwrap();
        for (p, v) in pts.iter().zip(y.iter()) {
            assert!((gp.value(p) - v).abs() < 1e-6, "at {p}: {} vs {v}", gp.value(p));
        }
    }

    #[test]
    fn obstacle_anchors_are_free() {
        let gp = default_obstacles().unwrap();
        for &(x, y) in &OBSTACLE_ANCHORS {
            assert!((gp.value(&Vector2::new(x, y)) - OBSTACLE_ANCHOR_VALUE).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for gp in [default_surface().unwrap(), default_obstacles().unwrap()] {
            for _ in 0..40 {
                let q = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                let (_, g) = gp.value_and_gradient(&q);
                let fd = fd_gradient(&gp, &q, 1e-5);
                assert!((g - fd).norm() <= 1e-5 * g.norm().max(1e-2), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let gp = default_surface().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for _ in 0..20 {
            let q = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let mut fd = Matrix2::zeros();
            for j in 0..2 {
                let mut e = Vector2::zeros();
                e[j] = h;
                let d = (gp.value_and_gradient(&(q + e)).1 - gp.value_and_gradient(&(q - e)).1) / (2.0 * h);
                fd.set_column(j, &d);
            }
            let an = gp.hessian(&q);
            assert!((an - fd).norm() <= 1e-5 * an.norm().max(1e-2));
        }
    }

    #[test]
    fn mismatched_observations_rejected() {
        assert!(GpPosterior::fit(grid(2, 0.0, 1.0), &DVector::zeros(3), 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_spans_bounds() {
        let g = grid(10, -5.0, 5.0);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], Vector2::new(-5.0, -5.0));
        assert_eq!(g[99], Vector2::new(5.0, 5.0));
    }
}
