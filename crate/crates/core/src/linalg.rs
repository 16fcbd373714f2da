//! Matrix SVD helpers over real and complex fields.
//!
//! nalgebra only returns the economy factors; the full unitary factors are
//! obtained by completing the economy basis with a Householder QR of
//! `[U_thin | I]`.

use nalgebra::{ComplexField, DMatrix, QR, SVD};

/// Economy SVD: `u` is `m × p`, `v` is `n × p` with `p = min(m, n)` and
/// `a = u · diag(sigma) · vᴴ`, `sigma` descending.
pub struct MatSvd<T: ComplexField> {
    pub u: DMatrix<T>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<T>,
}

fn max_iterations(m: usize, n: usize) -> usize {
    200 * (m.max(n) + 10)
}

pub fn thin_svd<T>(a: &DMatrix<T>) -> Result<MatSvd<T>, String>
where
    T: ComplexField<RealField = f64>,
{
    let (m, n) = a.shape();
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, max_iterations(m, n))
        .ok_or_else(|| format!("SVD of a {m}x{n} matrix did not converge"))?;
    let u = svd.u.ok_or("left singular vectors missing")?;
    let v_t = svd.v_t.ok_or("right singular vectors missing")?;
    Ok(MatSvd {
        u,
        sigma: svd.singular_values.iter().copied().collect(),
        v: v_t.adjoint(),
    })
}

pub fn singular_values<T>(a: &DMatrix<T>) -> Result<Vec<f64>, String>
where
    T: ComplexField<RealField = f64>,
{
    let (m, n) = a.shape();
    let svd = SVD::try_new(a.clone(), false, false, f64::EPSILON, max_iterations(m, n))
        .ok_or_else(|| format!("SVD of a {m}x{n} matrix did not converge"))?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Extends orthonormal columns `q` (`m × p`) to an `m × m` unitary matrix
/// whose first `p` columns are exactly `q`.
pub fn complete_basis<T>(q: &DMatrix<T>) -> DMatrix<T>
where
    T: ComplexField<RealField = f64>,
{
    let (m, p) = q.shape();
    if p == m {
        return q.clone();
    }
    let mut aug = DMatrix::<T>::zeros(m, p + m);
    aug.columns_mut(0, p).copy_from(q);
    aug.columns_mut(p, m).fill_with_identity();
    let mut full = QR::new(aug).q();
    full.columns_mut(0, p).copy_from(q);
    full
}

/// Full SVD: `u` is `m × m`, `v` is `n × n`, `sigma` has `min(m, n)` entries.
pub fn full_svd<T>(a: &DMatrix<T>) -> Result<MatSvd<T>, String>
where
    T: ComplexField<RealField = f64>,
{
    let thin = thin_svd(a)?;
    Ok(MatSvd {
        u: complete_basis(&thin.u),
        sigma: thin.sigma,
        v: complete_basis(&thin.v),
    })
}
