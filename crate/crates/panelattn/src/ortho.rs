//! Learnable special-orthogonal operators from low-rank skew generators.
//!
//! An operator is parameterized by two factor matrices `left`, `right` of
//! shape `dim × rank`. The generator
//!
//! ```text
//! A = left · rightᵀ − right · leftᵀ
//! ```
//!
//! is skew-symmetric by construction, and `U = exp(A)` lies in `SO(dim)`, so
//! gradient descent on the factors moves the operator along the orthogonal
//! group without projections or constrained optimizers.
//!
//! The exponential uses scaling-and-squaring around a truncated Taylor core.
//! Its backward pass ([`exp_backward`]) differentiates the same recurrence
//! (product rule over every series term and squaring), which yields the
//! adjoint of the differential of `exp` under the Frobenius inner product.
//! [`generator_backward`] then chains that adjoint onto the factors:
//!
//! ```text
//! grad_left = (G̃ − G̃ᵀ) · right      grad_right = (G̃ᵀ − G̃) · left
//! ```
//!
//! With `left = 0` and `right` Gaussian, the operator starts as the exact
//! identity while `grad_left` is generically nonzero, so training moves
//! immediately even though the initial mapping is a no-op.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg;
use crate::{Error, Result};

/// Absolute tolerance for the skew-symmetry invariant `A + Aᵀ = 0`.
pub const SKEW_TOL: f64 = 1e-12;
/// Tolerance for the orthogonality invariant `‖UᵀU − I‖_∞`.
pub const ORTHO_TOL: f64 = 1e-9;
/// Relative tolerance for `det U = +1`.
pub const DET_TOL: f64 = 1e-8;

/// Series order of the Taylor core. With the scaled norm bounded by
/// `SCALING_THRESHOLD` the truncation error is far below double rounding.
const TAYLOR_ORDER: usize = 16;
/// Upper bound on `‖A/2^s‖₁` before the Taylor core is applied.
const SCALING_THRESHOLD: f64 = 0.25;

/// Learnable factor pair defining a skew generator.
#[derive(Debug, Clone)]
pub struct LowRankGenerator {
    dim: usize,
    rank: usize,
    left: Array2<f64>,
    right: Array2<f64>,
}

impl LowRankGenerator {
    /// Builds a generator from its factors. Both must be `dim × rank` with
    /// `rank ≤ dim`.
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        if left.dim() != right.dim() {
            return Err(Error::shape(format!(
                "factor shapes differ: left {:?}, right {:?}",
                left.dim(),
                right.dim()
            )));
        }
        let (dim, rank) = left.dim();
        if dim == 0 || rank == 0 {
            return Err(Error::param("factor dimensions must be positive"));
        }
        if rank > dim {
            return Err(Error::param(format!("rank {rank} exceeds dim {dim}")));
        }
        Ok(Self {
            dim,
            rank,
            left,
            right,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn left(&self) -> &Array2<f64> {
        &self.left
    }

    pub fn right(&self) -> &Array2<f64> {
        &self.right
    }

    /// Replaces both factors, keeping the shape invariants.
    pub fn set_factors(&mut self, left: Array2<f64>, right: Array2<f64>) -> Result<()> {
        let updated = LowRankGenerator::new(left, right)?;
        if updated.dim != self.dim || updated.rank != self.rank {
            return Err(Error::shape(format!(
                "factor update changes shape from {}x{} to {}x{}",
                self.dim, self.rank, updated.dim, updated.rank
            )));
        }
        *self = updated;
        Ok(())
    }
}

/// A square matrix with `A = −Aᵀ` enforced at construction.
#[derive(Debug, Clone)]
pub struct SkewMatrix {
    data: Array2<f64>,
}

impl SkewMatrix {
    /// Validates skew-symmetry within [`SKEW_TOL`].
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::shape(format!(
                "skew matrix must be square, got {:?}",
                data.dim()
            )));
        }
        if !linalg::all_finite(&data.view()) {
            return Err(Error::numeric("skew matrix has non-finite entries"));
        }
        let n = data.nrows();
        for i in 0..n {
            for j in i..n {
                if (data[[i, j]] + data[[j, i]]).abs() > SKEW_TOL {
                    return Err(Error::invariant(format!(
                        "matrix is not skew-symmetric at ({i},{j}): {} vs {}",
                        data[[i, j]],
                        data[[j, i]]
                    )));
                }
            }
        }
        Ok(Self { data })
    }

    /// The zero matrix, trivially skew.
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: Array2::zeros((dim, dim)),
        }
    }

    /// Wraps a matrix that is skew by construction.
    pub(crate) fn new_unchecked(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// A special-orthogonal matrix: `‖UᵀU − I‖_∞ ≤ 1e-9`, `det U = +1`.
#[derive(Debug, Clone)]
pub struct OrthogonalOperator {
    data: Array2<f64>,
}

impl OrthogonalOperator {
    /// Validates both invariants.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::shape(format!(
                "operator must be square, got {:?}",
                data.dim()
            )));
        }
        if !linalg::all_finite(&data.view()) {
            return Err(Error::numeric("operator has non-finite entries"));
        }
        let defect = linalg::orthogonality_defect(&data.view());
        if defect > ORTHO_TOL {
            return Err(Error::invariant(format!(
                "orthogonality defect {defect:.3e} exceeds {ORTHO_TOL:.0e}"
            )));
        }
        let det = linalg::determinant(&data.view());
        if (det - 1.0).abs() > DET_TOL {
            return Err(Error::invariant(format!(
                "determinant {det} is not +1 within {DET_TOL:.0e}"
            )));
        }
        Ok(Self { data })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: Array2::eye(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Applies the operator to a vector (length `dim`).
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(v.len(), n, "vector length must match operator dim");
        let mut out = vec![0.0; n];
        for (i, row) in self.data.rows().into_iter().enumerate() {
            out[i] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }
}

/// Gradients of a scalar loss with respect to a generator's factors.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grad_left: Array2<f64>,
    pub grad_right: Array2<f64>,
}

/// `A = left · rightᵀ − right · leftᵀ`.
///
/// The subtraction `M − Mᵀ` is exactly antisymmetric in floating point, so
/// the output satisfies the skew invariant bitwise.
pub fn assemble_generator(gen: &LowRankGenerator) -> SkewMatrix {
    let m = gen.left.dot(&gen.right.t());
    let a = &m - &m.t();
    SkewMatrix::new_unchecked(a)
}

/// Intermediates of one exponential evaluation, kept for the backward pass.
struct ExpTrace {
    /// `A / 2^s`.
    scaled: Array2<f64>,
    /// Taylor terms `t_k = B^k / k!` for `k = 0..ORDER-1` (the inputs of each
    /// recurrence step).
    terms: Vec<Array2<f64>>,
    /// Pre-squaring values `E_i` for each of the `s` squarings.
    squarings: Vec<Array2<f64>>,
    scaling_steps: u32,
}

fn exp_core(a: &ArrayView2<f64>, keep_trace: bool) -> (Array2<f64>, Option<ExpTrace>) {
    let dim = a.nrows();
    let norm = linalg::one_norm(a);
    let scaling_steps = if norm > SCALING_THRESHOLD {
        (norm / SCALING_THRESHOLD).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(scaling_steps as i32);
    let b = a.mapv(|v| v * scale);

    let mut terms = Vec::new();
    let mut term: Array2<f64> = Array2::eye(dim);
    let mut total: Array2<f64> = Array2::eye(dim);
    for k in 1..=TAYLOR_ORDER {
        if keep_trace {
            terms.push(term.clone());
        }
        term = term.dot(&b) / (k as f64);
        total += &term;
    }

    let mut squarings = Vec::new();
    let mut value = total;
    for _ in 0..scaling_steps {
        if keep_trace {
            squarings.push(value.clone());
        }
        value = value.dot(&value);
    }

    let trace = keep_trace.then_some(ExpTrace {
        scaled: b,
        terms,
        squarings,
        scaling_steps,
    });
    (value, trace)
}

/// `U = exp(A)` for a skew matrix, guaranteed special-orthogonal.
pub fn matrix_exp(a: &SkewMatrix) -> Result<OrthogonalOperator> {
    if !linalg::all_finite(&a.data.view()) {
        return Err(Error::numeric("exponential input has non-finite entries"));
    }
    let (value, _) = exp_core(&a.data.view(), false);
    OrthogonalOperator::new(value)
}

/// Adjoint of the differential of the exponential at `A`, applied to
/// `upstream`, under the Frobenius inner product.
///
/// Equivalently: the gradient of `⟨upstream, exp(A)⟩` with respect to `A`,
/// treating `A` as an unconstrained matrix. Computed by reverse-mode
/// differentiation of the forward recurrence, so it is exact for the value
/// the forward pass actually produces.
pub fn exp_backward(a: &SkewMatrix, upstream: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let dim = a.dim();
    if upstream.dim() != (dim, dim) {
        return Err(Error::shape(format!(
            "upstream shape {:?} does not match operator dim {dim}",
            upstream.dim()
        )));
    }
    let (_, trace) = exp_core(&a.data.view(), true);
    let trace = trace.expect("trace requested");

    // Squarings, in reverse: for C = E·E, the adjoint is Ē = C̄·Eᵀ + Eᵀ·C̄.
    let mut grad = upstream.to_owned();
    for e in trace.squarings.iter().rev() {
        grad = grad.dot(&e.t()) + e.t().dot(&grad);
    }

    // Taylor recurrence, in reverse. Every term contributes to the sum, so
    // its total adjoint is the running `carry` plus the sum's adjoint.
    let grad_total = grad;
    let mut carry = grad_total.clone();
    let mut grad_b: Array2<f64> = Array2::zeros((dim, dim));
    for k in (1..=TAYLOR_ORDER).rev() {
        let prev = &trace.terms[k - 1];
        grad_b += &(prev.t().dot(&carry) / (k as f64));
        if k > 1 {
            carry = &grad_total + &(carry.dot(&trace.scaled.t()) / (k as f64));
        }
    }

    let scale = 0.5f64.powi(trace.scaling_steps as i32);
    Ok(grad_b.mapv(|v| v * scale))
}

/// Chains an exponential adjoint `G̃` onto the generator factors.
pub fn generator_backward(gen: &LowRankGenerator, g_tilde: &ArrayView2<f64>) -> Result<GradientBundle> {
    let dim = gen.dim();
    if g_tilde.dim() != (dim, dim) {
        return Err(Error::shape(format!(
            "adjoint shape {:?} does not match generator dim {dim}",
            g_tilde.dim()
        )));
    }
    let skew_part = g_tilde.to_owned() - g_tilde.t();
    let grad_left = skew_part.dot(&gen.right);
    let grad_right = skew_part.t().dot(&gen.left);
    Ok(GradientBundle {
        grad_left,
        grad_right,
    })
}

/// Zero-interference initialization: `left = 0`, `right ~ N(0, sigma²)` from
/// a seeded stream. The resulting operator is the exact identity while the
/// first gradient step is generically nonzero through `left`.
pub fn init_zero_interference(
    dim: usize,
    rank: usize,
    sigma: f64,
    seed: u64,
) -> Result<LowRankGenerator> {
    if dim == 0 || rank == 0 {
        return Err(Error::param("dim and rank must be positive"));
    }
    if rank > dim {
        return Err(Error::param(format!("rank {rank} exceeds dim {dim}")));
    }
    // sigma = 0 is permitted as the degenerate all-zero draw; gradients then
    // vanish permanently through both factors.
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::param(format!(
            "sigma must be a finite non-negative real, got {sigma}"
        )));
    }
    let left = Array2::zeros((dim, rank));
    let right = if sigma == 0.0 {
        Array2::zeros((dim, rank))
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
        Array2::from_shape_fn((dim, rank), |_| normal.sample(&mut rng))
    };
    LowRankGenerator::new(left, right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn assemble_zero_left_gives_zero_generator() {
        let gen = LowRankGenerator::new(Array2::zeros((4, 2)), Array2::from_elem((4, 2), 0.7)).unwrap();
        let a = assemble_generator(&gen);
        assert_eq!(linalg::max_abs(&a.data().view()), 0.0);
    }

    #[test]
    fn assemble_canonical_2d_pair() {
        let left = array![[1.0], [0.0]];
        let right = array![[0.0], [1.0]];
        let gen = LowRankGenerator::new(left, right).unwrap();
        let a = assemble_generator(&gen);
        let expected = array![[0.0, 1.0], [-1.0, 0.0]];
        assert_eq!(linalg::max_abs_diff(&a.data().view(), &expected.view()), 0.0);
    }

    #[test]
    fn rank_above_dim_rejected() {
        let err = LowRankGenerator::new(Array2::zeros((2, 3)), Array2::zeros((2, 3)));
        assert!(matches!(err, Err(Error::Param(_))));
    }

    #[test]
    fn mismatched_factor_shapes_rejected() {
        let err = LowRankGenerator::new(Array2::zeros((4, 2)), Array2::zeros((4, 3)));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn exp_of_zero_is_identity_exactly() {
        let u = matrix_exp(&SkewMatrix::zeros(5)).unwrap();
        assert_eq!(linalg::max_abs_diff(&u.data().view(), &Array2::eye(5).view()), 0.0);
    }

    #[test]
    fn exp_of_planar_generator_is_rotation() {
        let theta = std::f64::consts::FRAC_PI_2;
        let a = SkewMatrix::new(array![[0.0, -theta], [theta, 0.0]]).unwrap();
        let u = matrix_exp(&a).unwrap();
        let expected = array![[0.0, -1.0], [1.0, 0.0]];
        assert!(linalg::max_abs_diff(&u.data().view(), &expected.view()) < 1e-12);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let mut data = Array2::zeros((2, 2));
        data[[0, 1]] = f64::NAN;
        data[[1, 0]] = f64::NAN;
        assert!(SkewMatrix::new(data).is_err());
    }

    #[test]
    fn backward_at_zero_is_identity_map() {
        let a = SkewMatrix::zeros(4);
        let g = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.3 - 1.0);
        let gt = exp_backward(&a, &g.view()).unwrap();
        assert_eq!(linalg::max_abs_diff(&gt.view(), &g.view()), 0.0);
        let eye = Array2::eye(4);
        let gt_eye = exp_backward(&a, &eye.view()).unwrap();
        assert_eq!(linalg::max_abs_diff(&gt_eye.view(), &eye.view()), 0.0);
    }

    #[test]
    fn zero_init_operator_is_identity_and_deterministic() {
        let gen = init_zero_interference(8, 3, 0.02, 7).unwrap();
        assert_eq!(linalg::max_abs(&gen.left().view()), 0.0);
        let u = matrix_exp(&assemble_generator(&gen)).unwrap();
        assert_eq!(
            linalg::max_abs_diff(&u.data().view(), &Array2::eye(8).view()),
            0.0
        );
        let again = init_zero_interference(8, 3, 0.02, 7).unwrap();
        assert_eq!(gen.right(), again.right());
        let other = init_zero_interference(8, 3, 0.02, 8).unwrap();
        assert_ne!(gen.right(), other.right());
    }

    #[test]
    fn zero_sigma_degenerates_to_all_zero() {
        let gen = init_zero_interference(4, 2, 0.0, 1).unwrap();
        assert_eq!(linalg::max_abs(&gen.right().view()), 0.0);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(matches!(
            init_zero_interference(4, 2, -0.1, 1),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn symmetric_adjoint_gives_zero_factor_grads() {
        let gen = init_zero_interference(5, 2, 0.5, 3).unwrap();
        let sym = Array2::from_shape_fn((5, 5), |(i, j)| ((i + j) as f64).cos());
        let bundle = generator_backward(&gen, &sym.view()).unwrap();
        assert_eq!(linalg::max_abs(&bundle.grad_left.view()), 0.0);
        assert_eq!(linalg::max_abs(&bundle.grad_right.view()), 0.0);
    }

    #[test]
    fn zero_left_keeps_right_frozen_at_first_step() {
        let gen = init_zero_interference(6, 2, 0.3, 11).unwrap();
        let g = Array2::from_shape_fn((6, 6), |(i, j)| ((3 * i + j) as f64 * 0.17).sin());
        let bundle = generator_backward(&gen, &g.view()).unwrap();
        assert_eq!(linalg::max_abs(&bundle.grad_right.view()), 0.0);
        assert!(linalg::max_abs(&bundle.grad_left.view()) > 1e-6);
    }
}
