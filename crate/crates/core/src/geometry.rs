//! Constraint-manifold linear algebra.
//!
//! Everything here is built on the truncated pseudo-inverse of the Gram
//! matrix `J·Jᵀ` of the constraint Jacobian `J = ∇ĥ`:
//!
//! * the tangent-space projector `P = I - Jᵀ(JJᵀ)^†J`,
//! * the Gauss-Newton feasibility step `δ = -Jᵀ(JJᵀ)^†h`,
//! * the derivative of `P` with respect to each coordinate, which needs the
//!   constraint Hessians `H_l = ∇²h_l`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::LocalHessian;

/// Singular values of `J·Jᵀ` below this are discarded.
pub const DEFAULT_SINGULAR_CUTOFF: f64 = 1e-6;

/// Truncated pseudo-inverse of `J·Jᵀ`.
#[derive(Debug, Clone)]
pub struct GramPinv {
    pub matrix: DMatrix<f64>,
    pub retained_rank: usize,
}

/// Pseudo-inverse of `J·Jᵀ` with the default cutoff.
pub fn gram_pinv(jacobian: &DMatrix<f64>) -> Result<GramPinv> {
    gram_pinv_with_cutoff(jacobian, DEFAULT_SINGULAR_CUTOFF)
}

/// Pseudo-inverse of `J·Jᵀ` discarding singular values below `cutoff`.
///
/// `J·Jᵀ` is symmetric positive semi-definite, so its singular value
/// decomposition coincides with its eigendecomposition and the cheaper
/// symmetric eigensolver is used.
pub fn gram_pinv_with_cutoff(jacobian: &DMatrix<f64>, cutoff: f64) -> Result<GramPinv> {
    if !jacobian.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "constraint Jacobian".into(),
        });
    }
    let m = jacobian.nrows();
    if m == 0 {
        return Ok(GramPinv {
            matrix: DMatrix::zeros(0, 0),
            retained_rank: 0,
        });
    }
    let gram = jacobian * jacobian.transpose();
    let eig = faer::mat::from_column_major_slice::<f64>(gram.as_slice(), m, m)
        .selfadjoint_eigendecomposition(faer::Side::Lower);
    let (values, vectors) = (eig.s(), eig.u());
    let mut retained = Vec::new();
    for i in 0..m {
        let sigma = values.column_vector().read(i);
        if !sigma.is_finite() {
            return Err(Error::NonFinite {
                context: "Gram matrix decomposition".into(),
            });
        }
        if sigma >= cutoff {
            retained.push((i, sigma));
        }
    }
    // pinv = W·Wᵀ with W = U_r·diag(σ^-1/2).
    let w = DMatrix::from_fn(m, retained.len(), |r, c| {
        let (i, sigma) = retained[c];
        vectors.read(r, i) / sigma.sqrt()
    });
    Ok(GramPinv {
        matrix: &w * w.transpose(),
        retained_rank: retained.len(),
    })
}

/// Tangent-space projector and the intermediates it was built from.
#[derive(Debug, Clone)]
pub struct ProjectionData {
    /// `P = I - Jᵀ(JJᵀ)^†J`, `N×N`.
    pub projection: DMatrix<f64>,
    /// `(JJᵀ)^†`, `M×M`.
    pub gram_pinv: DMatrix<f64>,
    /// `J`, `M×N`.
    pub jacobian: DMatrix<f64>,
    /// `(JJᵀ)^†J`, `M×N`.
    pub pinv_jacobian: DMatrix<f64>,
    pub retained_rank: usize,
}

impl ProjectionData {
    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    /// `δ = -Jᵀ(JJᵀ)^†h`.
    pub fn feasibility_step(&self, values: &DVector<f64>) -> DVector<f64> {
        -(self.jacobian.transpose() * (&self.gram_pinv * values))
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.projection * v
    }
}

pub fn projection_matrix(jacobian: &DMatrix<f64>) -> Result<ProjectionData> {
    projection_matrix_with_cutoff(jacobian, DEFAULT_SINGULAR_CUTOFF)
}

pub fn projection_matrix_with_cutoff(jacobian: &DMatrix<f64>, cutoff: f64) -> Result<ProjectionData> {
    let GramPinv {
        matrix: gram_pinv,
        retained_rank,
    } = gram_pinv_with_cutoff(jacobian, cutoff)?;
    let n = jacobian.ncols();
    let pinv_jacobian = &gram_pinv * jacobian;
    let mut projection = DMatrix::identity(n, n) - jacobian.transpose() * &pinv_jacobian;
    // Remove rounding asymmetry from the product.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (projection[(i, j)] + projection[(j, i)]);
            projection[(i, j)] = avg;
            projection[(j, i)] = avg;
        }
    }
    Ok(ProjectionData {
        projection,
        gram_pinv,
        jacobian: jacobian.clone(),
        pinv_jacobian,
        retained_rank,
    })
}

/// Gauss-Newton step on `½hᵀh`: `δ = -Jᵀ(JJᵀ)^†h`, to be added to the point.
pub fn feasibility_step(jacobian: &DMatrix<f64>, values: &DVector<f64>) -> Result<DVector<f64>> {
    if jacobian.nrows() != values.len() {
        return Err(Error::DimensionMismatch {
            context: "feasibility step",
            expected: jacobian.nrows(),
            actual: values.len(),
        });
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "constraint values".into(),
        });
    }
    let g = gram_pinv(jacobian)?;
    Ok(-(jacobian.transpose() * (&g.matrix * values)))
}

fn check_hessians(m: usize, n: usize, hessians: &[Option<LocalHessian>]) -> Result<()> {
    if hessians.len() != m {
        return Err(Error::DimensionMismatch {
            context: "constraint Hessian count",
            expected: m,
            actual: hessians.len(),
        });
    }
    for h in hessians.iter().flatten() {
        if let Some(&bad) = h.indices.iter().find(|&&i| i >= n) {
            return Err(Error::DimensionMismatch {
                context: "constraint Hessian index",
                expected: n,
                actual: bad + 1,
            });
        }
    }
    Ok(())
}

/// Derivative of the projector, `∂P/∂τ_k` for every coordinate `k`.
///
/// With `E = (JJᵀ)^†J` and `[∂_kJ]_{l,j} = [H_l]_{j,k}`:
///
/// * `A_k = Jᵀ(JJᵀ)^†∂_kJ = Eᵀ∂_kJ`
/// * `D_k = ∂_kJ·Jᵀ + J·∂_kJᵀ`
/// * `B_k = Eᵀ D_k E`
///
/// and `∂_kP = B_k - A_k - A_kᵀ`. Absent Hessians count as zero, which is
/// the locally linear treatment of that constraint row.
pub fn projection_derivative(
    jacobian: &DMatrix<f64>,
    hessians: &[Option<LocalHessian>],
) -> Result<Vec<DMatrix<f64>>> {
    let data = projection_matrix(jacobian)?;
    projection_derivative_from(&data, hessians)
}

pub fn projection_derivative_from(
    data: &ProjectionData,
    hessians: &[Option<LocalHessian>],
) -> Result<Vec<DMatrix<f64>>> {
    let j = &data.jacobian;
    let (m, n) = j.shape();
    check_hessians(m, n, hessians)?;
    let e = &data.pinv_jacobian;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut dj = DMatrix::zeros(m, n);
        for (l, h) in hessians.iter().enumerate() {
            let Some(h) = h else { continue };
            if let Some(bk) = h.indices.iter().position(|&i| i == k) {
                for (a, &ia) in h.indices.iter().enumerate() {
                    dj[(l, ia)] += h.block[(a, bk)];
                }
            }
        }
        let a = e.transpose() * &dj;
        let d = &dj * j.transpose() + j * dj.transpose();
        let b = e.transpose() * d * e;
        out.push(b - &a - a.transpose());
    }
    Ok(out)
}

/// Row divergence of the projector, `c_n = Σ_m ∂_{τ_m} P_{n,m}`.
///
/// This is the contraction the tangent-kernel gradient needs, computed in
/// `O(M·N + Σ_l |H_l|)` after the projector itself instead of forming the
/// full `N×N×N` derivative. With `E = (JJᵀ)^†J`:
///
/// * `s = Σ_l H_l e_l` where `e_l` is row `l` of `E`,
/// * `f_l = ⟨H_l, I - P⟩ + (J s)_l - tr(H_l)`,
/// * `c = Eᵀ f - s`.
pub fn projection_divergence(
    data: &ProjectionData,
    hessians: &[Option<LocalHessian>],
) -> Result<DVector<f64>> {
    let j = &data.jacobian;
    let (m, n) = j.shape();
    check_hessians(m, n, hessians)?;
    let e = &data.pinv_jacobian;
    let p = &data.projection;
    let mut s = DVector::zeros(n);
    let mut f = DVector::zeros(m);
    for (l, h) in hessians.iter().enumerate() {
        let Some(h) = h else { continue };
        let mut inner = 0.0;
        let mut trace = 0.0;
        for (a, &ia) in h.indices.iter().enumerate() {
            trace += h.block[(a, a)];
            let mut acc = 0.0;
            for (b, &ib) in h.indices.iter().enumerate() {
                let hab = h.block[(a, b)];
                acc += hab * e[(l, ib)];
                let identity = if ia == ib { 1.0 } else { 0.0 };
                inner += hab * (identity - p[(ia, ib)]);
            }
            s[ia] += acc;
        }
        f[l] = inner - trace;
    }
    f += j * &s;
    Ok(e.transpose() * f - s)
}

/// Slack initialization `z_i = sqrt(2·|g_i|)`.
pub fn init_slack(g: &DVector<f64>) -> DVector<f64> {
    g.map(|v| (2.0 * v.abs()).sqrt())
}
