//! Positional-encoding regimes behind one interface: an additive learnable
//! table (APE) and three rotation families applied to queries/keys — fixed
//! axial block rotations (2D RoPE), dense learnable skew generators per axis
//! (LieRE), and learnable per-block angular rates in the shared RoPE basis
//! (ComRoPE).
//!
//! The rotation families are isometries by construction. RoPE and ComRoPE
//! additionally satisfy the relative-position identity
//! `R(a)ᵀ R(b) = R(b − a)` exactly, because all their blocks commute; LieRE
//! satisfies it only along a single axis (or when the two generators
//! commute), while isometry holds regardless.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::ortho::{matrix_exp, SkewMatrix};
use crate::{Error, Result};

/// Token-grid coordinate in patch units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord2D {
    pub x: f64,
    pub y: f64,
}

impl Coord2D {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::param(format!("coordinate must be finite, got ({x}, {y})")));
        }
        Ok(Self { x, y })
    }

    pub const ORIGIN: Coord2D = Coord2D { x: 0.0, y: 0.0 };
}

/// Per-block base angles per unit displacement, `dim/2` entries. The first
/// `dim/4` blocks respond to the x coordinate, the remaining to y.
#[derive(Debug, Clone)]
pub struct FrequencyBank {
    thetas: Vec<f64>,
}

impl FrequencyBank {
    pub fn new(thetas: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() || thetas.len() % 2 != 0 {
            return Err(Error::config(format!(
                "frequency bank needs an even, positive number of blocks, got {}",
                thetas.len()
            )));
        }
        if thetas.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::config("frequencies must be finite and positive"));
        }
        Ok(Self { thetas })
    }

    /// Standard geometric progression, `base^(−j / blocks_per_axis)` within
    /// each axis half. `dim` must be divisible by 4.
    pub fn geometric(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::config(format!(
                "2D rotary encoding needs dim divisible by 4, got {dim}"
            )));
        }
        let per_axis = dim / 4;
        let mut thetas = Vec::with_capacity(dim / 2);
        for axis in 0..2 {
            let _ = axis;
            for j in 0..per_axis {
                thetas.push(base.powf(-(j as f64) / per_axis as f64));
            }
        }
        Self::new(thetas)
    }

    /// Number of 2×2 blocks (`dim / 2`).
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Rotation angle of block `k` at `coord`.
    pub fn angle(&self, k: usize, coord: Coord2D) -> f64 {
        if k < self.len() / 2 {
            self.thetas[k] * coord.x
        } else {
            self.thetas[k] * coord.y
        }
    }
}

/// Learnable rotation parameters for the trainable families.
#[derive(Debug, Clone)]
pub enum LearnableGeneratorSet {
    /// Dense skew generators per axis; the applied operator is
    /// `exp(x·gen_x + y·gen_y)`.
    Liere { gen_x: SkewMatrix, gen_y: SkewMatrix },
    /// Per-block angular rates in the shared 2×2 block basis; block `k`
    /// rotates by `rate_x[k]·x + rate_y[k]·y`. Commutativity is guaranteed
    /// because every member is block-diagonal in the same basis.
    Comrope { rate_x: Vec<f64>, rate_y: Vec<f64> },
}

impl LearnableGeneratorSet {
    pub fn liere(gen_x: SkewMatrix, gen_y: SkewMatrix) -> Result<Self> {
        if gen_x.dim() != gen_y.dim() {
            return Err(Error::shape(format!(
                "axis generators disagree on dim: {} vs {}",
                gen_x.dim(),
                gen_y.dim()
            )));
        }
        Ok(Self::Liere { gen_x, gen_y })
    }

    /// Small random skew generators for both axes, deterministic in `seed`.
    pub fn liere_random(dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::config(format!("LieRE dim must be even, got {dim}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::param(e.to_string()))?;
        let mut draw = |dim: usize| -> SkewMatrix {
            let w = Array2::from_shape_fn((dim, dim), |_| normal.sample(&mut rng) * scale);
            SkewMatrix::new_unchecked(&w - &w.t())
        };
        let gen_x = draw(dim);
        let gen_y = draw(dim);
        Self::liere(gen_x, gen_y)
    }

    pub fn comrope(rate_x: Vec<f64>, rate_y: Vec<f64>) -> Result<Self> {
        if rate_x.len() != rate_y.len() || rate_x.is_empty() {
            return Err(Error::shape(format!(
                "per-axis rate vectors must have equal, positive length: {} vs {}",
                rate_x.len(),
                rate_y.len()
            )));
        }
        if rate_x.iter().chain(rate_y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("angular rates must be finite"));
        }
        Ok(Self::Comrope { rate_x, rate_y })
    }

    /// ComRoPE rates initialized to reproduce the axial RoPE spectrum, so
    /// the regime starts identical to 2D RoPE and learns deviations from it.
    pub fn comrope_from_bank(bank: &FrequencyBank) -> Self {
        let blocks = bank.len();
        let mut rate_x = vec![0.0; blocks];
        let mut rate_y = vec![0.0; blocks];
        for k in 0..blocks {
            if k < blocks / 2 {
                rate_x[k] = bank.thetas()[k];
            } else {
                rate_y[k] = bank.thetas()[k];
            }
        }
        Self::Comrope { rate_x, rate_y }
    }

    /// Channel dimension the set acts on.
    pub fn dim(&self) -> usize {
        match self {
            Self::Liere { gen_x, .. } => gen_x.dim(),
            Self::Comrope { rate_x, .. } => rate_x.len() * 2,
        }
    }
}

/// Learnable additive position table, one row per token.
#[derive(Debug, Clone)]
pub struct PositionTable {
    table: Array2<f64>,
}

impl PositionTable {
    pub fn new(table: Array2<f64>) -> Self {
        Self { table }
    }

    /// Gaussian-initialized table, deterministic in `seed`.
    pub fn gaussian(rows: usize, dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::param(format!("sigma must be non-negative, got {sigma}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::param(e.to_string()))?;
        let table = if sigma == 0.0 {
            Array2::zeros((rows, dim))
        } else {
            Array2::from_shape_fn((rows, dim), |_| normal.sample(&mut rng))
        };
        Ok(Self { table })
    }

    pub fn rows(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

/// Adds the position table to a token-embedding matrix (rows = tokens).
pub fn encode_ape(embeddings: &ArrayView2<f64>, table: &PositionTable) -> Result<Array2<f64>> {
    if embeddings.dim() != table.table.dim() {
        return Err(Error::shape(format!(
            "embeddings {:?} vs position table {:?}",
            embeddings.dim(),
            table.table.dim()
        )));
    }
    Ok(embeddings.to_owned() + &table.table)
}

/// Rotates each 2×2 block `(v[2k], v[2k+1])` by `angles[k]`.
pub(crate) fn rotate_blocks(vec: &ArrayView1<f64>, angles: &[f64]) -> Array1<f64> {
    let mut out = vec.to_owned();
    for (k, &angle) in angles.iter().enumerate() {
        let (s, c) = angle.sin_cos();
        let a = vec[2 * k];
        let b = vec[2 * k + 1];
        out[2 * k] = c * a - s * b;
        out[2 * k + 1] = s * a + c * b;
    }
    out
}

/// Axial 2D RoPE: block `k` rotates by `θ_k · x` (first half of blocks) or
/// `θ_k · y` (second half).
pub fn rope2d_apply(
    vec: &ArrayView1<f64>,
    coord: Coord2D,
    bank: &FrequencyBank,
) -> Result<Array1<f64>> {
    if vec.len() != 2 * bank.len() {
        return Err(Error::config(format!(
            "vector length {} must equal twice the bank length {}",
            vec.len(),
            bank.len()
        )));
    }
    let coord = Coord2D::new(coord.x, coord.y)?;
    let angles: Vec<f64> = (0..bank.len()).map(|k| bank.angle(k, coord)).collect();
    Ok(rotate_blocks(vec, &angles))
}

/// LieRE: applies `exp(x·gen_x + y·gen_y)` to the vector.
pub fn liere_apply(
    vec: &ArrayView1<f64>,
    coord: Coord2D,
    gens: &LearnableGeneratorSet,
) -> Result<Array1<f64>> {
    let LearnableGeneratorSet::Liere { gen_x, gen_y } = gens else {
        return Err(Error::config("generator set is not the LieRE variant"));
    };
    if vec.len() != gen_x.dim() {
        return Err(Error::shape(format!(
            "vector length {} does not match generator dim {}",
            vec.len(),
            gen_x.dim()
        )));
    }
    let coord = Coord2D::new(coord.x, coord.y)?;
    let combined = gen_x.data().mapv(|v| v * coord.x) + gen_y.data().mapv(|v| v * coord.y);
    let u = matrix_exp(&SkewMatrix::new_unchecked(combined))?;
    Ok(u.data().dot(vec))
}

/// ComRoPE: block `k` rotates by `rate_x[k]·x + rate_y[k]·y`.
pub fn comrope_apply(
    vec: &ArrayView1<f64>,
    coord: Coord2D,
    gens: &LearnableGeneratorSet,
) -> Result<Array1<f64>> {
    let LearnableGeneratorSet::Comrope { rate_x, rate_y } = gens else {
        return Err(Error::config("generator set is not the ComRoPE variant"));
    };
    if vec.len() != 2 * rate_x.len() {
        return Err(Error::shape(format!(
            "vector length {} must equal twice the block count {}",
            vec.len(),
            rate_x.len()
        )));
    }
    let coord = Coord2D::new(coord.x, coord.y)?;
    let angles: Vec<f64> = rate_x
        .iter()
        .zip(rate_y.iter())
        .map(|(rx, ry)| rx * coord.x + ry * coord.y)
        .collect();
    Ok(rotate_blocks(vec, &angles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn norm(v: &Array1<f64>) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn ape_with_zero_table_is_identity() {
        let emb = array![[1.0, 2.0], [3.0, 4.0]];
        let table = PositionTable::new(Array2::zeros((2, 2)));
        let out = encode_ape(&emb.view(), &table).unwrap();
        assert_eq!(out, emb);
    }

    #[test]
    fn ape_adds_row_for_single_token() {
        let emb = array![[1.0, -1.0, 0.5]];
        let table = PositionTable::new(array![[0.25, 0.25, 0.25]]);
        let out = encode_ape(&emb.view(), &table).unwrap();
        assert_eq!(out, array![[1.25, -0.75, 0.75]]);
    }

    #[test]
    fn ape_table_init_is_deterministic() {
        let a = PositionTable::gaussian(5, 8, 0.02, 99).unwrap();
        let b = PositionTable::gaussian(5, 8, 0.02, 99).unwrap();
        assert_eq!(a.table(), b.table());
    }

    #[test]
    fn rope_zero_coordinate_is_identity() {
        let bank = FrequencyBank::geometric(8, 10_000.0).unwrap();
        let v = Array1::from_shape_fn(8, |i| i as f64 - 3.0);
        let out = rope2d_apply(&v.view(), Coord2D::ORIGIN, &bank).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rope_quarter_rotation_in_two_dims() {
        let bank = FrequencyBank::new(vec![1.0, 1.0]).unwrap();
        let v = array![1.0, 0.0, 0.0, 0.0];
        let coord = Coord2D::new(std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        let out = rope2d_apply(&v.view(), coord, &bank).unwrap();
        assert!((out[0]).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn rope_odd_dimension_rejected() {
        assert!(FrequencyBank::geometric(6, 10_000.0).is_err());
        let bank = FrequencyBank::new(vec![1.0, 0.5]).unwrap();
        let v = array![1.0, 0.0, 0.0];
        assert!(rope2d_apply(&v.view(), Coord2D::ORIGIN, &bank).is_err());
    }

    #[test]
    fn rope_relative_position_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let bank = FrequencyBank::geometric(16, 10_000.0).unwrap();
        for _ in 0..20 {
            let v = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
            let w = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
            let a = Coord2D::new(rng.gen::<f64>() * 6.0, rng.gen::<f64>() * 6.0).unwrap();
            let b = Coord2D::new(rng.gen::<f64>() * 6.0, rng.gen::<f64>() * 6.0).unwrap();
            let rel = Coord2D::new(b.x - a.x, b.y - a.y).unwrap();
            let lhs = rope2d_apply(&v.view(), a, &bank)
                .unwrap()
                .dot(&rope2d_apply(&w.view(), b, &bank).unwrap());
            let rhs = v.dot(&rope2d_apply(&w.view(), rel, &bank).unwrap());
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn liere_zero_coordinate_is_identity() {
        let gens = LearnableGeneratorSet::liere_random(6, 0.1, 21).unwrap();
        let v = Array1::from_shape_fn(6, |i| (i as f64).sin());
        let out = liere_apply(&v.view(), Coord2D::ORIGIN, &gens).unwrap();
        assert!((norm(&(out - &v))).abs() < 1e-15);
    }

    #[test]
    fn liere_relative_property_along_single_axis() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let gens = LearnableGeneratorSet::liere_random(6, 0.2, 77).unwrap();
        let gens = match gens {
            LearnableGeneratorSet::Liere { gen_x, .. } => LearnableGeneratorSet::Liere {
                gen_x,
                gen_y: SkewMatrix::zeros(6),
            },
            other => other,
        };
        for _ in 0..10 {
            let v = Array1::from_shape_fn(6, |_| rng.gen::<f64>() - 0.5);
            let w = Array1::from_shape_fn(6, |_| rng.gen::<f64>() - 0.5);
            let a = Coord2D::new(rng.gen::<f64>() * 3.0, 0.0).unwrap();
            let b = Coord2D::new(rng.gen::<f64>() * 3.0, 0.0).unwrap();
            let rel = Coord2D::new(b.x - a.x, 0.0).unwrap();
            let lhs = liere_apply(&v.view(), a, &gens)
                .unwrap()
                .dot(&liere_apply(&w.view(), b, &gens).unwrap());
            let rhs = v.dot(&liere_apply(&w.view(), rel, &gens).unwrap());
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn liere_isometry_without_commuting_generators() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let gens = LearnableGeneratorSet::liere_random(8, 0.5, 13).unwrap();
        for _ in 0..10 {
            let v = Array1::from_shape_fn(8, |_| rng.gen::<f64>() - 0.5);
            let coord = Coord2D::new(rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0).unwrap();
            let out = liere_apply(&v.view(), coord, &gens).unwrap();
            assert!((norm(&out) - norm(&v)).abs() <= 1e-9 * norm(&v).max(1.0));
        }
    }

    #[test]
    fn comrope_zero_rates_and_zero_coords_are_identity() {
        let gens = LearnableGeneratorSet::comrope(vec![0.0; 4], vec![0.0; 4]).unwrap();
        let v = Array1::from_shape_fn(8, |i| i as f64);
        let out = comrope_apply(&v.view(), Coord2D::new(2.0, -3.0).unwrap(), &gens).unwrap();
        assert_eq!(out, v);

        let gens = LearnableGeneratorSet::comrope(vec![0.3; 4], vec![0.9; 4]).unwrap();
        let out = comrope_apply(&v.view(), Coord2D::ORIGIN, &gens).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn comrope_relative_position_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let rate_x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let rate_y: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let gens = LearnableGeneratorSet::comrope(rate_x, rate_y).unwrap();
        for _ in 0..20 {
            let v = Array1::from_shape_fn(12, |_| rng.gen::<f64>() - 0.5);
            let w = Array1::from_shape_fn(12, |_| rng.gen::<f64>() - 0.5);
            let a = Coord2D::new(rng.gen::<f64>() * 5.0, rng.gen::<f64>() * 5.0).unwrap();
            let b = Coord2D::new(rng.gen::<f64>() * 5.0, rng.gen::<f64>() * 5.0).unwrap();
            let rel = Coord2D::new(b.x - a.x, b.y - a.y).unwrap();
            let lhs = comrope_apply(&v.view(), a, &gens)
                .unwrap()
                .dot(&comrope_apply(&w.view(), b, &gens).unwrap());
            let rhs = v.dot(&comrope_apply(&w.view(), rel, &gens).unwrap());
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn rotary_families_are_isometries() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let bank = FrequencyBank::geometric(8, 10_000.0).unwrap();
        let com = LearnableGeneratorSet::comrope_from_bank(&bank);
        for _ in 0..10 {
            let v = Array1::from_shape_fn(8, |_| rng.gen::<f64>() - 0.5);
            let coord = Coord2D::new(rng.gen::<f64>() * 9.0, rng.gen::<f64>() * 9.0).unwrap();
            let r = rope2d_apply(&v.view(), coord, &bank).unwrap();
            let c = comrope_apply(&v.view(), coord, &com).unwrap();
            assert!((norm(&r) - norm(&v)).abs() <= 1e-9 * norm(&v).max(1.0));
            assert!((norm(&c) - norm(&v)).abs() <= 1e-9 * norm(&v).max(1.0));
            // ComRoPE initialized from the bank reproduces RoPE exactly.
            assert!((norm(&(r - &c))).abs() < 1e-12);
        }
    }
}
