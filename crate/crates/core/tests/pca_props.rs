use mchjm_core::pca::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(entries: &[f64], d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, entries);
    &a * a.transpose() + DMatrix::identity(d, d) * 1e-3
}

/// Real roots of a monic cubic with three real roots, largest first.
fn cubic_roots(a: f64, b: f64, c: f64) -> [f64; 3] {
    // x³ + a x² + b x + c, trigonometric form.
    let q = (a * a - 3.0 * b) / 9.0;
    let r = (2.0 * a.powi(3) - 9.0 * a * b + 27.0 * c) / 54.0;
    let theta = (r / q.powf(1.5)).clamp(-1.0, 1.0).acos();
    let m = -2.0 * q.sqrt();
    let tau = 2.0 * std::f64::consts::PI;
    let mut roots = [
        m * (theta / 3.0).cos() - a / 3.0,
        m * ((theta + tau) / 3.0).cos() - a / 3.0,
        m * ((theta - tau) / 3.0).cos() - a / 3.0,
    ];
    roots.sort_by(|x, y| y.total_cmp(x));
    roots
}

#[test]
fn three_by_three_matches_characteristic_polynomial() {
    let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
    let tr = c.trace();
    let minors = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)] + c[(0, 0)] * c[(2, 2)]
        - c[(0, 2)] * c[(2, 0)]
        + c[(1, 1)] * c[(2, 2)]
        - c[(1, 2)] * c[(2, 1)];
    let det = c.determinant();
    let roots = cubic_roots(-tr, minors, -det);
    let res = decompose(&c).unwrap();
    for (got, want) in res.eigenvalues.iter().zip(roots) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn known_selections() {
    let diag = |v: &[f64]| DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v));
    let base = decompose(&diag(&[4.0, 3.0, 2.0, 1.0])).unwrap();
    for (threshold, f) in [(0.95, 4), (0.9, 3), (0.7, 2), (0.4, 1), (1.0, 4)] {
        assert_eq!(select_components(&base, threshold).unwrap().n_components, f, "threshold {threshold}");
    }
    let skew = decompose(&diag(&[90.0, 5.0, 3.0, 2.0])).unwrap();
    let s = select_components(&skew, 0.95).unwrap();
    assert_eq!(s.n_components, 2);
    assert!((s.explained - 0.95).abs() < 1e-15);
    let flat = decompose(&DMatrix::identity(22, 22)).unwrap();
    assert_eq!(select_components(&flat, 0.95).unwrap().n_components, 21);
    assert!(select_components(&flat, 0.0).is_err());
    assert!(select_components(&flat, 1.5).is_err());
}

#[test]
fn zero_matrix_is_fully_explained() {
    let res = decompose(&DMatrix::zeros(3, 3)).unwrap();
    assert_eq!(select_components(&res, 0.95).unwrap().n_components, 1);
    assert!(res.eigenvalues.iter().all(|v| *v == 0.0));
}

#[test]
fn rejects_non_square_and_non_finite() {
    assert!(decompose(&DMatrix::zeros(2, 3)).is_err());
    let mut c = DMatrix::identity(2, 2);
    c[(0, 0)] = f64::NAN;
    assert!(decompose(&c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_invariants(entries in proptest::collection::vec(-1.0f64..1.0, 36), threshold in 0.05f64..1.0) {
        let c = spd(&entries, 6);
        let res = decompose(&c).unwrap();
        let v = &res.eigenvectors;
        prop_assert!((v.transpose() * v - DMatrix::identity(6, 6)).amax() < 1e-12);
        prop_assert!(res.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((res.eigenvalues.sum() - c.trace()).abs() < 1e-10 * c.trace());
        for j in 0..6 {
            let col = v.column(j);
            prop_assert!(col[col.iamax()] > 0.0);
        }

        let full = with_components(&res, 6).unwrap();
        prop_assert!((&full.w * full.w.transpose() - &c).amax() < 1e-10 * c.amax());

        let sel = select_components(&res, threshold).unwrap();
        let f = sel.n_components;
        prop_assert!(res.phi(f) >= threshold - 1e-12);
        prop_assert!(f == 1 || res.phi(f - 1) < threshold);
        prop_assert_eq!(sel.w.ncols(), f);
        // W Wᵀ is the rank-F truncation; the remainder is the discarded variance.
        let rest: f64 = res.eigenvalues.rows(f, 6 - f).sum();
        prop_assert!(((&c - &sel.w * sel.w.transpose()).trace() - rest).abs() < 1e-10 * c.trace());
    }
}
