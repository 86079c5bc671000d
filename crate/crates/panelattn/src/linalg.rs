//! Small dense-matrix helpers shared by the numerical core.

use ndarray::{Array2, ArrayView2};

/// Max absolute entry of `a`.
pub fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// `‖a − b‖_∞` over entries.
pub fn max_abs_diff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// `‖aᵀa − I‖_∞`, the orthogonality defect.
pub fn orthogonality_defect(a: &ArrayView2<f64>) -> f64 {
    let gram = a.t().dot(a);
    let n = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[[i, j]] - target).abs());
        }
    }
    worst
}

/// Matrix 1-norm (max column sum of absolute values).
pub fn one_norm(a: &ArrayView2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for col in a.columns() {
        worst = worst.max(col.iter().map(|v| v.abs()).sum());
    }
    worst
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(a: &ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "determinant needs a square matrix");
    let mut lu: Array2<f64> = a.to_owned();
    let mut det = 1.0f64;
    for k in 0..n {
        let mut pivot = k;
        let mut best = lu[[k, k]].abs();
        for r in (k + 1)..n {
            let v = lu[[r, k]].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if pivot != k {
            for c in 0..n {
                let tmp = lu[[k, c]];
                lu[[k, c]] = lu[[pivot, c]];
                lu[[pivot, c]] = tmp;
            }
            det = -det;
        }
        det *= lu[[k, k]];
        let inv = 1.0 / lu[[k, k]];
        for r in (k + 1)..n {
            let factor = lu[[r, k]] * inv;
            lu[[r, k]] = factor;
            for c in (k + 1)..n {
                lu[[r, c]] -= factor * lu[[k, c]];
            }
        }
    }
    det
}

/// True when every entry is finite.
pub fn all_finite(a: &ArrayView2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn determinant_matches_closed_forms() {
        let a = array![[2.0, 0.0], [0.0, 3.0]];
        assert!((determinant(&a.view()) - 6.0).abs() < 1e-12);
        let r = array![[0.0, -1.0], [1.0, 0.0]];
        assert!((determinant(&r.view()) - 1.0).abs() < 1e-12);
        let sing = array![[1.0, 2.0], [2.0, 4.0]];
        assert_eq!(determinant(&sing.view()), 0.0);
    }

    #[test]
    fn orthogonality_defect_of_identity_is_zero() {
        let eye = Array2::<f64>::eye(5);
        assert_eq!(orthogonality_defect(&eye.view()), 0.0);
    }
}
