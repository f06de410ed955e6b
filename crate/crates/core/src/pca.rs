//! Principal components of the fitted increment covariance and the modified
//! volatility functions `w_m = √γ_m · o_m`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Eigen-decomposition with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `γ_1 ≥ … ≥ γ_D ≥ 0`.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub eigenvectors: DMatrix<f64>,
    /// Retained component count (0 until [`select_components`] runs).
    pub n_components: usize,
    /// Fraction of variance explained by the retained components.
    pub explained: f64,
    /// `D × F` modified volatility functions.
    pub w: DMatrix<f64>,
}

impl PcaResult {
    /// `φ(F) = Σ_{m ≤ F} γ_m / Σ γ_m`.
    pub fn phi(&self, f: usize) -> f64 {
        let total = self.eigenvalues.sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues.rows(0, f.min(self.eigenvalues.len())).sum() / total
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Diagonalises a symmetric covariance matrix.
///
/// Eigenvalues are sorted descending (ties keep their original order) and
/// clipped at zero; each eigenvector is signed so that its largest-magnitude
/// entry is positive.
pub fn decompose(c: &DMatrix<f64>) -> Result<PcaResult> {
    if !c.is_square() {
        return Err(Error::dim("covariance", c.nrows(), c.ncols()));
    }
    let scale = c.amax().max(1e-300);
    if (c - c.transpose()).amax() > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::Input("covariance matrix is not symmetric".into()));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("covariance has non-finite entries".into()));
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = c.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| {
        eig.eigenvalues[*b]
            .partial_cmp(&eig.eigenvalues[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let eigenvalues = DVector::from_iterator(d, order.iter().map(|i| eig.eigenvalues[*i].max(0.0)));
    let mut eigenvectors = DMatrix::zeros(d, d);
    for (col, i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(*i).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        eigenvectors.set_column(col, &v);
    }
    Ok(PcaResult {
        eigenvalues,
        eigenvectors,
        n_components: 0,
        explained: 0.0,
        w: DMatrix::zeros(d, 0),
    })
}

/// Keeps the smallest `F` with `φ(F) ≥ threshold` and builds `W`.
pub fn select_components(res: &PcaResult, threshold: f64) -> Result<PcaResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "explained-variance threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let d = res.dim();
    // Tolerance absorbs round-off in the cumulative sum (e.g. φ(D) = 1 - 1e-16).
    let f = (1..=d)
        .find(|f| res.phi(*f) >= threshold - 1e-12)
        .unwrap_or(d);
    with_components(res, f)
}

/// Retains exactly `f` components.
pub fn with_components(res: &PcaResult, f: usize) -> Result<PcaResult> {
    let d = res.dim();
    if f > d {
        return Err(Error::InvalidParameter(format!("cannot keep {f} of {d} components")));
    }
    let mut w = DMatrix::zeros(d, f);
    for m in 0..f {
        w.set_column(m, &(res.eigenvectors.column(m) * res.eigenvalues[m].sqrt()));
    }
    Ok(PcaResult {
        n_components: f,
        explained: res.phi(f),
        w,
        ..res.clone()
    })
}

/// `D × F` loading used as the volatility matrix when simulating.
pub fn reduced_volatility(res: &PcaResult) -> &DMatrix<f64> {
    &res.w
}
