//! Per-step operator caches and their application to token matrices.
//!
//! Chunk token matrices are `(samples · n_tokens) × model_dim`, row-major,
//! with head `h` occupying the column block `h·dh .. (h+1)·dh`. Dense
//! operators (panel operators, LieRE position operators) are applied with a
//! gather → GEMM → scatter scheme: all rows sharing one operator are packed
//! into an `(rows · heads) × dh` matrix and hit with a single matrix
//! multiply. Block rotations (RoPE, ComRoPE, the block-diagonal panel
//! offsets) are cheap scalar loops.
//!
//! Gradients with respect to whole dense operators accumulate into f64 side
//! slots ([`SlotMap`]); the exponential adjoint folds them onto the
//! underlying factors once per step, outside the batch loop.

use ndarray::{Array2, ArrayView2};

use crate::opro::PanelMap;

use super::real::Real;

/// One cached dense operator: the f64 skew generator it came from plus the
/// operator and its transpose in network precision.
#[derive(Debug, Clone)]
pub struct OpCache<F> {
    pub skew: Array2<f64>,
    pub mat: Array2<F>,
    pub mat_t: Array2<F>,
}

impl<F: Real> OpCache<F> {
    pub fn from_skew_u(skew: Array2<f64>, u: &Array2<f64>) -> Self {
        let mat = u.mapv(F::of);
        let mat_t = mat.t().to_owned();
        Self { skew, mat, mat_t }
    }
}

/// Layer-major grid of operators (layer × panel).
#[derive(Debug, Clone)]
pub struct OpGrid<F> {
    pub ops: Vec<OpCache<F>>,
    pub layers: usize,
    pub panels: usize,
}

impl<F> OpGrid<F> {
    pub fn at(&self, layer: usize, panel: usize) -> &OpCache<F> {
        &self.ops[layer * self.panels + panel]
    }
}

/// Positional rotation tables for one step.
#[derive(Debug, Clone)]
pub enum RotTables<F> {
    /// APE: no rotation at the attention level.
    None,
    /// RoPE / ComRoPE: per-(token, block) cosines and sines.
    Blocks { cos: Array2<F>, sin: Array2<F> },
    /// LieRE: one dense operator per token position.
    Dense { per_pos: Vec<OpCache<F>> },
}

/// Indexing of the f64 operator-gradient slots inside a `GradAccum`.
#[derive(Debug, Clone, Default)]
pub struct SlotMap {
    pub dims: Vec<usize>,
    pub opro_base: Option<usize>,
    pub asym_q_base: Option<usize>,
    pub asym_k_base: Option<usize>,
    pub liere_base: Option<usize>,
    pub panels: usize,
    pub positions: usize,
}

impl SlotMap {
    pub fn opro_slot(&self, layer: usize, panel: usize) -> Option<usize> {
        self.opro_base.map(|b| b + layer * self.panels + panel)
    }
    pub fn asym_q_slot(&self, layer: usize, panel: usize) -> Option<usize> {
        self.asym_q_base.map(|b| b + layer * self.panels + panel)
    }
    pub fn asym_k_slot(&self, layer: usize, panel: usize) -> Option<usize> {
        self.asym_k_base.map(|b| b + layer * self.panels + panel)
    }
    pub fn liere_slot(&self, position: usize) -> Option<usize> {
        self.liere_base.map(|b| b + position)
    }
}

/// Row indices of `tokens` replicated across the chunk's samples.
fn rows_of(tokens: &[usize], samples: usize, n_tokens: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(tokens.len() * samples);
    for c in 0..samples {
        for &t in tokens {
            rows.push(c * n_tokens + t);
        }
    }
    rows
}

fn gather<F: Real>(mat: &ArrayView2<F>, rows: &[usize], heads: usize, dh: usize) -> Array2<F> {
    let mut out = Array2::zeros((rows.len() * heads, dh));
    for (k, &r) in rows.iter().enumerate() {
        let src = mat.row(r);
        for h in 0..heads {
            for j in 0..dh {
                out[[k * heads + h, j]] = src[h * dh + j];
            }
        }
    }
    out
}

fn scatter<F: Real>(mat: &mut Array2<F>, packed: &Array2<F>, rows: &[usize], heads: usize, dh: usize) {
    for (k, &r) in rows.iter().enumerate() {
        let mut dst = mat.row_mut(r);
        for h in 0..heads {
            for j in 0..dh {
                dst[h * dh + j] = packed[[k * heads + h, j]];
            }
        }
    }
}

/// Applies a dense operator per token group: rows of group `g` are replaced
/// by `row · op(g)`. Pass `matᵀ` of the operator to apply it to column
/// vectors, or the operator itself to apply the transpose (backward).
pub fn dense_apply_grouped<'a, F: Real + 'a>(
    mat: &mut Array2<F>,
    groups: &[(Vec<usize>, usize)],
    op_of: impl Fn(usize) -> &'a Array2<F>,
    samples: usize,
    n_tokens: usize,
    heads: usize,
    dh: usize,
) {
    for (tokens, key) in groups {
        let rows = rows_of(tokens, samples, n_tokens);
        let packed = gather(&mat.view(), &rows, heads, dh);
        let rotated = packed.dot(op_of(*key));
        scatter(mat, &rotated, &rows, heads, dh);
    }
}

/// Accumulates `Σ g_out ⊗ input` (summed over the group's rows and heads)
/// into the f64 slot of each group: `slot[g] += g_packᵀ · in_pack`.
pub fn dense_upstream_grouped<F: Real>(
    g_out: &ArrayView2<F>,
    input: &ArrayView2<F>,
    groups: &[(Vec<usize>, usize)],
    slot_of: impl Fn(usize) -> Option<usize>,
    slots: &mut [Array2<f64>],
    samples: usize,
    n_tokens: usize,
    heads: usize,
    dh: usize,
) {
    for (tokens, key) in groups {
        let Some(slot) = slot_of(*key) else { continue };
        let rows = rows_of(tokens, samples, n_tokens);
        let g_pack = gather(g_out, &rows, heads, dh);
        let in_pack = gather(input, &rows, heads, dh);
        let contrib = g_pack.t().dot(&in_pack);
        let dst = &mut slots[slot];
        for i in 0..dh {
            for j in 0..dh {
                dst[[i, j]] += contrib[[i, j]].to64();
            }
        }
    }
}

/// Rotates every 2×2 block of every non-exempt row. `angle_of(token, block)`
/// returns the cosine/sine pair, or `None` to skip the token entirely.
/// `invert` applies the inverse rotation (backward through the same table).
pub fn block_rotate<F: Real>(
    mat: &mut Array2<F>,
    n_tokens: usize,
    heads: usize,
    dh: usize,
    invert: bool,
    angle_of: impl Fn(usize, usize) -> Option<(F, F)>,
) {
    let blocks = dh / 2;
    let rows = mat.nrows();
    for r in 0..rows {
        let token = r % n_tokens;
        let mut row = mat.row_mut(r);
        for k in 0..blocks {
            let Some((c, s)) = angle_of(token, k) else { continue };
            let s = if invert { -s } else { s };
            for h in 0..heads {
                let i0 = h * dh + 2 * k;
                let a = row[i0];
                let b = row[i0 + 1];
                row[i0] = c * a - s * b;
                row[i0 + 1] = s * a + c * b;
            }
        }
    }
}

/// Per-(token, block) angle gradients of a block rotation, computed from the
/// rotation's outputs: with `y = R(θ)x`, `∂y₁/∂θ = −y₂` and `∂y₂/∂θ = y₁`,
/// so `g_θ = y₁·g_{y₂} − y₂·g_{y₁}`, summed over heads and samples.
pub fn block_rotation_angle_grads<F: Real>(
    g_out: &ArrayView2<F>,
    out: &ArrayView2<F>,
    n_tokens: usize,
    heads: usize,
    dh: usize,
) -> Array2<f64> {
    let blocks = dh / 2;
    let mut grads = Array2::zeros((n_tokens, blocks));
    let rows = g_out.nrows();
    for r in 0..rows {
        let token = r % n_tokens;
        let g = g_out.row(r);
        let y = out.row(r);
        for k in 0..blocks {
            let mut acc = 0.0f64;
            for h in 0..heads {
                let i0 = h * dh + 2 * k;
                acc += y[i0].to64() * g[i0 + 1].to64() - y[i0 + 1].to64() * g[i0].to64();
            }
            grads[[token, k]] += acc;
        }
    }
    grads
}

/// Adds a per-panel bias to every head block of every non-exempt row.
pub fn panel_bias_add<F: Real>(
    mat: &mut Array2<F>,
    bias: &ArrayView2<F>,
    map: &PanelMap,
    n_tokens: usize,
    heads: usize,
    dh: usize,
    negate: bool,
) {
    let rows = mat.nrows();
    for r in 0..rows {
        let token = r % n_tokens;
        let Some(p) = map.panel_of(token) else { continue };
        let b = bias.row(p);
        let mut row = mat.row_mut(r);
        for h in 0..heads {
            for j in 0..dh {
                if negate {
                    row[h * dh + j] -= b[j];
                } else {
                    row[h * dh + j] += b[j];
                }
            }
        }
    }
}

/// Per-panel bias gradients: column sums of `g_out` over each panel's rows
/// and heads.
pub fn panel_bias_grads<F: Real>(
    g_out: &ArrayView2<F>,
    map: &PanelMap,
    panels: usize,
    n_tokens: usize,
    heads: usize,
    dh: usize,
) -> Array2<f64> {
    let mut grads = Array2::zeros((panels, dh));
    for r in 0..g_out.nrows() {
        let token = r % n_tokens;
        let Some(p) = map.panel_of(token) else { continue };
        let g = g_out.row(r);
        for h in 0..heads {
            for j in 0..dh {
                grads[[p, j]] += g[h * dh + j].to64();
            }
        }
    }
    grads
}

/// Token groups by panel id (exempt tokens dropped), keyed by panel.
pub fn panel_groups(map: &PanelMap) -> Vec<(Vec<usize>, usize)> {
    let mut groups: Vec<(Vec<usize>, usize)> = (0..map.panel_count()).map(|p| (Vec::new(), p)).collect();
    for (t, p) in map.assignment().iter().enumerate() {
        if let Some(p) = p {
            groups[*p].0.push(t);
        }
    }
    groups.retain(|(tokens, _)| !tokens.is_empty());
    groups
}

/// Every token in its own group, keyed by position index.
pub fn position_groups(n_tokens: usize) -> Vec<(Vec<usize>, usize)> {
    (0..n_tokens).map(|t| (vec![t], t)).collect()
}
