//! Finite-difference oracles for the exponential adjoint and the factor
//! gradients, plus the operator-level group properties.
//!
//! The oracle perturbs one coordinate at a time and re-runs the forward
//! computation only, so it shares no code with the backward pass it checks.

use ndarray::{Array1, Array2};
use panelattn::linalg;
use panelattn::ortho::{
    assemble_generator, exp_backward, generator_backward, init_zero_interference, matrix_exp,
    LowRankGenerator, SkewMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

fn random_skew(rng: &mut ChaCha12Rng, dim: usize, scale: f64) -> SkewMatrix {
    let m = random_matrix(rng, dim, dim, scale);
    SkewMatrix::new(&m - &m.t()).unwrap()
}

/// Frobenius inner product.
fn inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

#[test]
fn exp_backward_matches_finite_differences_on_basis_directions() {
    // d ≤ 6, small generator norm; checks every one of the d² basis
    // directions E_ij against the adjoint entry G̃_ij.
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for &dim in &[2usize, 4, 6] {
        let a = random_skew(&mut rng, dim, 0.05 / dim as f64);
        assert!(linalg::one_norm(&a.data().view()) <= 0.1);
        let g = random_matrix(&mut rng, dim, dim, 1.0);
        let g_tilde = exp_backward(&a, &g.view()).unwrap();

        let eps = 1e-6;
        let scale = linalg::max_abs(&g_tilde.view()).max(1.0);
        for i in 0..dim {
            for j in 0..dim {
                // Direction E_ij is not skew, so the probe evaluates the
                // exponential of a general matrix with an independent series
                // implementation below.
                let mut plus = a.data().clone();
                plus[[i, j]] += eps;
                let mut minus = a.data().clone();
                minus[[i, j]] -= eps;
                let f_plus = inner(&g, &exp_general(&plus));
                let f_minus = inner(&g, &exp_general(&minus));
                let fd = (f_plus - f_minus) / (2.0 * eps);
                let err = (fd - g_tilde[[i, j]]).abs();
                assert!(
                    err <= 1e-5 * scale,
                    "dim {dim} entry ({i},{j}): fd {fd} vs adjoint {}",
                    g_tilde[[i, j]]
                );
            }
        }
    }
}

/// Plain scaling-and-squaring Taylor exponential for a general (not
/// necessarily skew) matrix. Independent re-implementation used only as the
/// oracle's forward evaluator.
fn exp_general(a: &Array2<f64>) -> Array2<f64> {
    let dim = a.nrows();
    let norm = linalg::one_norm(&a.view());
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as i32
    } else {
        0
    };
    let b = a.mapv(|v| v * 0.5f64.powi(s));
    let mut term: Array2<f64> = Array2::eye(dim);
    let mut total: Array2<f64> = Array2::eye(dim);
    for k in 1..=24 {
        term = term.dot(&b) / (k as f64);
        total += &term;
    }
    let mut value = total;
    for _ in 0..s {
        value = value.dot(&value);
    }
    value
}

#[test]
fn generator_backward_matches_end_to_end_finite_differences() {
    // Loss ⟨G, exp(A(L,R))⟩ composed through assemble → exp; analytic path
    // composes exp_backward with generator_backward. d = 6, rank = 2.
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let dim = 6;
    let rank = 2;
    let left = random_matrix(&mut rng, dim, rank, 0.4);
    let right = random_matrix(&mut rng, dim, rank, 0.4);
    let g = random_matrix(&mut rng, dim, dim, 1.0);

    let gen = LowRankGenerator::new(left.clone(), right.clone()).unwrap();
    let a = assemble_generator(&gen);
    let g_tilde = exp_backward(&a, &g.view()).unwrap();
    let bundle = generator_backward(&gen, &g_tilde.view()).unwrap();

    let loss = |l: &Array2<f64>, r: &Array2<f64>| -> f64 {
        let gen = LowRankGenerator::new(l.clone(), r.clone()).unwrap();
        let u = matrix_exp(&assemble_generator(&gen)).unwrap();
        inner(&g, u.data())
    };

    let eps = 1e-6;
    let scale_l = linalg::max_abs(&bundle.grad_left.view()).max(1.0);
    for i in 0..dim {
        for j in 0..rank {
            let mut plus = left.clone();
            plus[[i, j]] += eps;
            let mut minus = left.clone();
            minus[[i, j]] -= eps;
            let fd = (loss(&plus, &right) - loss(&minus, &right)) / (2.0 * eps);
            let err = (fd - bundle.grad_left[[i, j]]).abs();
            assert!(
                err <= 1e-4 * scale_l,
                "left ({i},{j}): fd {fd} vs analytic {}",
                bundle.grad_left[[i, j]]
            );
        }
    }
    let scale_r = linalg::max_abs(&bundle.grad_right.view()).max(1.0);
    for i in 0..dim {
        for j in 0..rank {
            let mut plus = right.clone();
            plus[[i, j]] += eps;
            let mut minus = right.clone();
            minus[[i, j]] -= eps;
            let fd = (loss(&left, &plus) - loss(&left, &minus)) / (2.0 * eps);
            let err = (fd - bundle.grad_right[[i, j]]).abs();
            assert!(
                err <= 1e-4 * scale_r,
                "right ({i},{j}): fd {fd} vs analytic {}",
                bundle.grad_right[[i, j]]
            );
        }
    }
}

#[test]
fn exp_is_orthogonal_and_norm_preserving_at_width_16() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for trial in 0..20 {
        let scale = 0.1 + 0.2 * trial as f64;
        let a = random_skew(&mut rng, 16, scale / 16.0);
        let u = matrix_exp(&a).unwrap();
        assert!(linalg::orthogonality_defect(&u.data().view()) <= 1e-9);

        let v: Array1<f64> = Array1::from_shape_fn(16, |_| rng.gen::<f64>() * 2.0 - 1.0);
        let uv = u.data().dot(&v);
        let out = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            (out - norm).abs() <= 1e-9 * norm.max(1.0),
            "norm drift {} vs {}",
            out,
            norm
        );
    }
}

#[test]
fn exp_of_negated_generator_is_group_inverse() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    for &dim in &[4usize, 8, 12] {
        let a = random_skew(&mut rng, dim, 1.5 / dim as f64);
        let neg = SkewMatrix::new(a.data().mapv(|v| -v)).unwrap();
        let u = matrix_exp(&a).unwrap();
        let u_inv = matrix_exp(&neg).unwrap();
        let prod = u_inv.data().dot(u.data());
        let eye = Array2::eye(dim);
        assert!(linalg::max_abs_diff(&prod.view(), &eye.view()) <= 1e-8);
    }
}

#[test]
fn random_factors_produce_exactly_skew_generators() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let left = random_matrix(&mut rng, 8, 3, 1.0);
    let right = random_matrix(&mut rng, 8, 3, 1.0);
    let gen = LowRankGenerator::new(left, right).unwrap();
    let a = assemble_generator(&gen);
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(a.data()[[i, j]], -a.data()[[j, i]]);
        }
    }
}

#[test]
fn zero_init_gradient_flows_only_through_left_factor() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let gen = init_zero_interference(8, 3, 0.02, 123).unwrap();
    let a = assemble_generator(&gen);
    let g = random_matrix(&mut rng, 8, 8, 1.0);
    let g_tilde = exp_backward(&a, &g.view()).unwrap();
    // At A = 0 the adjoint is the upstream itself.
    assert_eq!(linalg::max_abs_diff(&g_tilde.view(), &g.view()), 0.0);
    let bundle = generator_backward(&gen, &g_tilde.view()).unwrap();
    assert_eq!(linalg::max_abs(&bundle.grad_right.view()), 0.0);
    assert!(linalg::max_abs(&bundle.grad_left.view()) > 1e-9);
}
