//! Stein kernels: the scalar RBF, the sliding-window trajectory kernel with
//! median-heuristic bandwidths, and the matrix-valued tangent-space kernel
//! `K_⊥(τi, τj) = K(τi, τj)·P(τi)·P(τj)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{TrajectoryLayout, TrajectoryParticle};

/// Lower bound on any median-heuristic bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-8;

/// `exp(-‖a - b‖² / h)`.
pub fn rbf(a: &DVector<f64>, b: &DVector<f64>, bandwidth: f64) -> f64 {
    (-(a - b).norm_squared() / bandwidth).exp()
}

/// RBF value and its gradient with respect to the second argument.
pub fn rbf_with_grad(a: &DVector<f64>, b: &DVector<f64>, bandwidth: f64) -> (f64, DVector<f64>) {
    let diff = a - b;
    let k = (-diff.norm_squared() / bandwidth).exp();
    let grad = diff * (2.0 * k / bandwidth);
    (k, grad)
}

/// Median heuristic `h = median(‖xi - xj‖)² / log N` over distinct pairs.
///
/// A single point has no pairs; its bandwidth is 1.
pub fn median_bandwidth(points: &[DVector<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push((&points[i] - &points[j]).norm());
        }
    }
    let med = median(&mut dists);
    (med * med / (n as f64).ln()).max(MIN_BANDWIDTH)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Window starting at row `start`: states and controls of rows
/// `start..=start+window`, i.e. `[x_{t:t+W}, u_{t-1:t-1+W}]` for `t = start + 1`.
pub fn trajectory_window(traj: &TrajectoryParticle, start: usize, window: usize) -> DVector<f64> {
    let dx = traj.state_dim();
    let du = traj.control_dim();
    let rows = window + 1;
    let mut out = DVector::zeros(rows * (dx + du));
    let mut idx = 0;
    for r in start..start + rows {
        for k in 0..dx {
            out[idx] = traj.states()[(r, k)];
            idx += 1;
        }
    }
    for r in start..start + rows {
        for k in 0..du {
            out[idx] = traj.controls()[(r, k)];
            idx += 1;
        }
    }
    out
}

/// Scatters a window-space gradient back into the flat trajectory layout.
fn add_window_grad(
    layout: &TrajectoryLayout,
    start: usize,
    window: usize,
    grad: &DVector<f64>,
    scale: f64,
    out: &mut DVector<f64>,
) {
    let rows = window + 1;
    let mut idx = 0;
    for r in start..start + rows {
        for k in 0..layout.state_dim {
            out[layout.state_index(r, k)] += scale * grad[idx];
            idx += 1;
        }
    }
    for r in start..start + rows {
        for k in 0..layout.control_dim {
            out[layout.control_index(r, k)] += scale * grad[idx];
            idx += 1;
        }
    }
}

/// Base kernel over trajectories, with bandwidths fitted to a particle set.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKernel {
    /// Mean of RBF kernels over `T - W` sliding windows, one bandwidth each.
    SlidingWindow { window: usize, bandwidths: Vec<f64> },
    /// A single RBF over the whole flattened trajectory.
    Whole { bandwidth: f64 },
}

impl TrajectoryKernel {
    /// Sliding-window kernel with per-window median bandwidths.
    pub fn sliding_window(particles: &[&TrajectoryParticle], window: usize) -> Result<Self> {
        let horizon = particles
            .first()
            .map(|p| p.horizon())
            .ok_or_else(|| Error::InvalidArgument("empty particle set".into()))?;
        if window == 0 || window >= horizon {
            return Err(Error::InvalidArgument(format!(
                "window length {window} must satisfy 1 <= W < T = {horizon}"
            )));
        }
        let bandwidths = (0..horizon - window)
            .map(|start| {
                let windows: Vec<_> = particles
                    .iter()
                    .map(|p| trajectory_window(p, start, window))
                    .collect();
                median_bandwidth(&windows)
            })
            .collect();
        Ok(Self::SlidingWindow { window, bandwidths })
    }

    pub fn whole(particles: &[&TrajectoryParticle]) -> Self {
        let points: Vec<_> = particles.iter().map(|p| p.to_vector()).collect();
        Self::Whole {
            bandwidth: median_bandwidth(&points),
        }
    }

    /// Sliding windows when the horizon allows them, otherwise the whole
    /// trajectory as a single window.
    pub fn fit(particles: &[&TrajectoryParticle], window: usize) -> Result<Self> {
        let horizon = particles.first().map(|p| p.horizon()).unwrap_or(0);
        if window >= 1 && window < horizon {
            Self::sliding_window(particles, window)
        } else {
            Ok(Self::whole(particles))
        }
    }

    pub fn eval(&self, ti: &TrajectoryParticle, tj: &TrajectoryParticle) -> f64 {
        match self {
            Self::SlidingWindow { window, bandwidths } => {
                let count = bandwidths.len() as f64;
                bandwidths
                    .iter()
                    .enumerate()
                    .map(|(start, &h)| {
                        rbf(
                            &trajectory_window(ti, start, *window),
                            &trajectory_window(tj, start, *window),
                            h,
                        )
                    })
                    .sum::<f64>()
                    / count
            }
            Self::Whole { bandwidth } => rbf(&ti.to_vector(), &tj.to_vector(), *bandwidth),
        }
    }

    /// Kernel value and gradient with respect to `tj` in the flat layout.
    pub fn eval_with_grad(
        &self,
        ti: &TrajectoryParticle,
        tj: &TrajectoryParticle,
    ) -> (f64, DVector<f64>) {
        let layout = tj.layout();
        match self {
            Self::SlidingWindow { window, bandwidths } => {
                let count = bandwidths.len() as f64;
                let mut value = 0.0;
                let mut grad = DVector::zeros(layout.len());
                for (start, &h) in bandwidths.iter().enumerate() {
                    let (k, g) = rbf_with_grad(
                        &trajectory_window(ti, start, *window),
                        &trajectory_window(tj, start, *window),
                        h,
                    );
                    value += k;
                    add_window_grad(&layout, start, *window, &g, 1.0 / count, &mut grad);
                }
                (value / count, grad)
            }
            Self::Whole { bandwidth } => rbf_with_grad(&ti.to_vector(), &tj.to_vector(), *bandwidth),
        }
    }
}

/// Sliding-window kernel between two trajectories, with bandwidths fitted
/// to `population` (which should contain both).
pub fn trajectory_kernel(
    ti: &TrajectoryParticle,
    tj: &TrajectoryParticle,
    window: usize,
    population: &[TrajectoryParticle],
) -> Result<f64> {
    if window >= ti.horizon() {
        return Err(Error::InvalidArgument(format!(
            "window length {window} must be shorter than the horizon {}",
            ti.horizon()
        )));
    }
    let refs: Vec<_> = population.iter().collect();
    Ok(TrajectoryKernel::sliding_window(&refs, window)?.eval(ti, tj))
}

fn check_square_pair(pi: &DMatrix<f64>, pj: &DMatrix<f64>) -> Result<()> {
    let n = pi.nrows();
    if pi.ncols() != n || pj.nrows() != n || pj.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "tangent kernel projectors",
            expected: n,
            actual: pj.nrows(),
        });
    }
    Ok(())
}

/// `K_⊥ = k·Pi·Pj`.
pub fn tangent_kernel(k: f64, pi: &DMatrix<f64>, pj: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square_pair(pi, pj)?;
    Ok(pi * pj * k)
}

/// Divergence of the tangent kernel with respect to its second argument,
/// `[∇_{τj}K_⊥]_l = Σ_m ∂_{τj_m}[K_⊥]_{l,m}`.
///
/// Differentiating `k·Pi·Pj` gives `Pi·Pj·∇k + k·Pi·c` where
/// `c_n = Σ_m ∂_m[Pj]_{n,m}`. `dpj[m]` is `∂Pj/∂τj_m`; `grad_k` must be zero
/// on slack coordinates since the base kernel ignores them.
pub fn tangent_kernel_gradient(
    k: f64,
    grad_k: &DVector<f64>,
    pi: &DMatrix<f64>,
    pj: &DMatrix<f64>,
    dpj: &[DMatrix<f64>],
) -> Result<DVector<f64>> {
    check_square_pair(pi, pj)?;
    let n = pi.nrows();
    if grad_k.len() != n || dpj.len() != n {
        return Err(Error::DimensionMismatch {
            context: "tangent kernel gradient",
            expected: n,
            actual: if grad_k.len() != n { grad_k.len() } else { dpj.len() },
        });
    }
    let divergence = DVector::from_fn(n, |row, _| (0..n).map(|m| dpj[m][(row, m)]).sum());
    tangent_kernel_gradient_from_divergence(k, grad_k, pi, pj, &divergence)
}

/// Same as [`tangent_kernel_gradient`] given the projector divergence of `Pj`.
pub fn tangent_kernel_gradient_from_divergence(
    k: f64,
    grad_k: &DVector<f64>,
    pi: &DMatrix<f64>,
    pj: &DMatrix<f64>,
    divergence_j: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_square_pair(pi, pj)?;
    Ok(pi * (pj * grad_k + divergence_j * k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{projection_derivative, projection_matrix};
    use crate::problem::{finite_diff_jacobian, LocalHessian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, layout: TrajectoryLayout) -> TrajectoryParticle {
        let v: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TrajectoryParticle::from_slice(layout, &v).unwrap()
    }

    #[test]
    fn rbf_basics() {
        let a = DVector::from_vec(vec![0.3, -0.4]);
        assert_eq!(rbf(&a, &a, 0.7), 1.0);
        let h = 1.3;
        let b = &a + DVector::from_vec(vec![(h * 2f64.ln()).sqrt(), 0.0]);
        assert!((rbf(&a, &b, h) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rbf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let h = rng.gen_range(0.5..3.0);
            let (_, g) = rbf_with_grad(&a, &b, h);
            let fd = finite_diff_jacobian(|x| DVector::from_element(1, rbf(&a, x, h)), &b, 1e-6).unwrap();
            let err = (g - fd.row(0).transpose()).norm() / fd.norm();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn two_point_bandwidth() {
        let pts = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![3.0, 4.0])];
        assert!((median_bandwidth(&pts) - 25.0 / 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_points_floor_bandwidth() {
        let pts = vec![DVector::from_element(3, 1.5); 4];
        assert_eq!(median_bandwidth(&pts), MIN_BANDWIDTH);
    }

    #[test]
    fn single_point_bandwidth_is_one() {
        assert_eq!(median_bandwidth(&[DVector::zeros(2)]), 1.0);
    }

    #[test]
    fn five_point_bandwidth_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..5)
            .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-2.0f64..2.0)))
            .collect();
        let mut d = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                if i < j {
                    let s: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                    d.push(s.sqrt());
                }
            }
        }
        assert_eq!(d.len(), 10);
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = 0.5 * (d[4] + d[5]);
        let expected = med * med / 5f64.ln();
        assert!((median_bandwidth(&pts) - expected).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_ignores_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pts: Vec<_> = (0..7)
            .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let h = median_bandwidth(&pts);
        pts.reverse();
        pts.swap(1, 4);
        assert_eq!(median_bandwidth(&pts), h);
    }

    #[test]
    fn self_kernel_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = TrajectoryLayout::new(6, 2, 1);
        let pop: Vec<_> = (0..4).map(|_| random_traj(&mut rng, layout)).collect();
        let k = trajectory_kernel(&pop[1], &pop[1], 2, &pop).unwrap();
        assert!((k - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_window_reduces_to_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = TrajectoryLayout::new(2, 2, 1);
        let pop: Vec<_> = (0..3).map(|_| random_traj(&mut rng, layout)).collect();
        let refs: Vec<_> = pop.iter().collect();
        let kernel = TrajectoryKernel::sliding_window(&refs, 1).unwrap();
        let TrajectoryKernel::SlidingWindow { bandwidths, .. } = &kernel else {
            unreachable!()
        };
        assert_eq!(bandwidths.len(), 1);
        // With one window covering every row, the window is the flat trajectory.
        let expected = rbf(&pop[0].to_vector(), &pop[2].to_vector(), bandwidths[0]);
        assert!((kernel.eval(&pop[0], &pop[2]) - expected).abs() < 1e-15);
    }

    #[test]
    fn sliding_window_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = TrajectoryLayout::new(7, 3, 2);
        let w = 3;
        let pop: Vec<_> = (0..5).map(|_| random_traj(&mut rng, layout)).collect();
        let (ti, tj) = (&pop[0], &pop[3]);
        let mut total = 0.0;
        for t in 1..=(7 - w) {
            // States x_t..x_{t+W} (row t-1 holds x_t), controls u_{t-1}..u_{t-1+W}.
            let build = |p: &TrajectoryParticle| {
                let mut v = Vec::new();
                for s in t..=t + w {
                    v.extend(p.states().row(s - 1).iter());
                }
                for s in (t - 1)..=(t - 1 + w) {
                    v.extend(p.controls().row(s).iter());
                }
                v
            };
            let windows: Vec<Vec<f64>> = pop.iter().map(build).collect();
            let mut d = Vec::new();
            for i in 0..5 {
                for j in (i + 1)..5 {
                    let s: f64 = windows[i]
                        .iter()
                        .zip(windows[j].iter())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    d.push(s.sqrt());
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = 0.5 * (d[4] + d[5]);
            let h = med * med / 5f64.ln();
            let (a, b) = (build(ti), build(tj));
            let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
            total += (-sq / h).exp();
        }
        let naive = total / (7 - w) as f64;
        let k = trajectory_kernel(ti, tj, w, &pop).unwrap();
        assert!((k - naive).abs() < 1e-13, "{k} vs {naive}");
    }

    #[test]
    fn window_must_be_shorter_than_horizon() {
        let layout = TrajectoryLayout::new(3, 1, 1);
        let t = TrajectoryParticle::zeros(layout);
        assert!(trajectory_kernel(&t, &t, 3, &[t.clone()]).is_err());
    }

    #[test]
    fn trajectory_kernel_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = TrajectoryLayout::new(8, 2, 2);
        let pop: Vec<_> = (0..6).map(|_| random_traj(&mut rng, layout)).collect();
        let refs: Vec<_> = pop.iter().collect();
        let kernel = TrajectoryKernel::sliding_window(&refs, 3).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((kernel.eval(&pop[i], &pop[j]) - kernel.eval(&pop[j], &pop[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layout = TrajectoryLayout::new(6, 2, 1);
        let pop: Vec<_> = (0..4).map(|_| random_traj(&mut rng, layout)).collect();
        let refs: Vec<_> = pop.iter().collect();
        for kernel in [
            TrajectoryKernel::sliding_window(&refs, 2).unwrap(),
            TrajectoryKernel::whole(&refs),
        ] {
            let (_, g) = kernel.eval_with_grad(&pop[0], &pop[1]);
            let f = |v: &DVector<f64>| {
                let tj = TrajectoryParticle::from_slice(layout, v.as_slice()).unwrap();
                DVector::from_element(1, kernel.eval(&pop[0], &tj))
            };
            let fd = finite_diff_jacobian(f, &pop[1].to_vector(), 1e-6).unwrap();
            let err = (g - fd.row(0).transpose()).norm() / fd.norm();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn tangent_kernel_cases() {
        let i3 = DMatrix::identity(3, 3);
        assert!((tangent_kernel(0.7, &i3, &i3).unwrap() - &i3 * 0.7).abs().max() < 1e-15);
        let p = projection_matrix(&DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]))
            .unwrap()
            .projection;
        assert!((tangent_kernel(1.0, &p, &p).unwrap() - &p).abs().max() < 1e-12);
        let pa = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let pb = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        assert_eq!(tangent_kernel(0.4, &pa, &pb).unwrap(), DMatrix::zeros(3, 3));
        assert!(tangent_kernel(1.0, &i3, &DMatrix::identity(2, 2)).is_err());
    }

    /// Finite-difference oracle: `Σ_m ∂_{τj_m} [k(τi, τj)·Pi·P(τj)]_{l,m}`
    /// with the RBF bandwidth held fixed.
    fn fd_kernel_divergence(
        xi: &DVector<f64>,
        xj: &DVector<f64>,
        h: f64,
        jac: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
        step: f64,
    ) -> DVector<f64> {
        let n = xj.len();
        let pi = projection_matrix(&jac(xi)).unwrap().projection;
        let kperp = |x: &DVector<f64>| {
            let pj = projection_matrix(&jac(x)).unwrap().projection;
            tangent_kernel(rbf(xi, x, h), &pi, &pj).unwrap()
        };
        let mut out = DVector::zeros(n);
        for m in 0..n {
            let mut xp = xj.clone();
            xp[m] += step;
            let mut xm = xj.clone();
            xm[m] -= step;
            let d = (kperp(&xp) - kperp(&xm)) / (2.0 * step);
            for l in 0..n {
                out[l] += d[(l, m)];
            }
        }
        out
    }

    #[test]
    fn linear_constraint_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(2, 5, |_, _| rng.gen_range(-1.0..1.0));
        let jac = move |_: &DVector<f64>| a.clone();
        let xi = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let xj = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let h = 1.7;
        let p = projection_matrix(&jac(&xi)).unwrap().projection;
        let (k, gk) = rbf_with_grad(&xi, &xj, h);
        let dp = projection_derivative(&jac(&xj), &[None, None]).unwrap();
        let g = tangent_kernel_gradient(k, &gk, &p, &p, &dp).unwrap();
        // With constant projections this is P·∇k.
        assert!((&g - &p * &gk).norm() < 1e-12);
        let fd = fd_kernel_divergence(&xi, &xj, h, &jac, 1e-6);
        assert!((&g - &fd).norm() / fd.norm() < 1e-5);
    }

    #[test]
    fn coincident_particles_leave_only_projection_term() {
        let jac = |x: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]);
        let x = DVector::from_vec(vec![0.6, 0.8]);
        let hs = vec![Some(LocalHessian::from_dense(&(DMatrix::identity(2, 2) * 2.0)))];
        let data = projection_matrix(&jac(&x)).unwrap();
        let dp = projection_derivative(&jac(&x), &hs).unwrap();
        let (k, gk) = rbf_with_grad(&x, &x, 0.9);
        assert_eq!(gk, DVector::zeros(2));
        let g = tangent_kernel_gradient(k, &gk, &data.projection, &data.projection, &dp).unwrap();
        let divergence = DVector::from_fn(2, |r, _| (0..2).map(|m| dp[m][(r, m)]).sum());
        assert!((g - &data.projection * divergence).norm() < 1e-14);
    }

    #[test]
    fn quadratic_constraint_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.gen_range(3..7);
            let a: DMatrix<f64> = {
                let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                &r + r.transpose()
            };
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let lin = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let (a2, b2, lin2) = (a.clone(), b.clone(), lin.clone());
            let jac = move |x: &DVector<f64>| {
                DMatrix::from_rows(&[(&a2 * x + &b2).transpose(), lin2.transpose()])
            };
            let hs = vec![Some(LocalHessian::from_dense(&a)), Some(LocalHessian::zero())];
            let xi = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let xj = &xi + DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
            let h = rng.gen_range(0.5..2.0);
            let pi = projection_matrix(&jac(&xi)).unwrap().projection;
            let pj = projection_matrix(&jac(&xj)).unwrap().projection;
            let (k, gk) = rbf_with_grad(&xi, &xj, h);
            let dp = projection_derivative(&jac(&xj), &hs).unwrap();
            let g = tangent_kernel_gradient(k, &gk, &pi, &pj, &dp).unwrap();
            let fd = fd_kernel_divergence(&xi, &xj, h, &jac, 1e-6);
            let err = (&g - &fd).norm() / fd.norm().max(1e-3);
            assert!(err < 1e-4, "{err}");
        }
    }
}
