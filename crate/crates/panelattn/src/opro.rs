//! Panel-specific orthogonal modulation of position-aware queries and keys.
//!
//! Every token carries a panel identity; a bank holds one special-orthogonal
//! operator per (layer, panel), and [`modulate`] applies the operator of
//! each token's panel to its query and key:
//!
//! ```text
//! q̂_i = U_{p(i)} q̃_i        k̂_j = U_{p(j)} k̃_j
//! ```
//!
//! The score between two tokens then factors through the relative operator
//! `U_{p(i)}ᵀ U_{p(j)}`, which collapses to the identity for same-panel
//! pairs — intra-panel attention is untouched while inter-panel attention
//! acquires a learnable modulation. Because the operators are orthogonal the
//! transformation also preserves query/key norms.
//!
//! [`bd_modulate`] is the block-diagonal specialization: per-panel phase
//! offsets in the rotary 2×2 block basis, which commute with RoPE applied in
//! the same basis. [`apb_modulate`] and [`asym_modulate`] are deliberately
//! broken variants (additive biases and independent query/key operators)
//! kept for ablation: the first violates isometry, the second violates
//! same-panel invariance.

use ndarray::{Array2, ArrayView2};

use crate::ortho::{
    assemble_generator, init_zero_interference, matrix_exp, LowRankGenerator, OrthogonalOperator,
};
use crate::posenc::rotate_blocks;
use crate::{Error, Result};

/// Assignment of each token to a panel id (`None` marks exempt tokens such
/// as a class token; they pass through every modulation unchanged).
#[derive(Debug, Clone)]
pub struct PanelMap {
    assignment: Vec<Option<usize>>,
    panel_count: usize,
}

impl PanelMap {
    pub fn new(assignment: Vec<Option<usize>>, panel_count: usize) -> Result<Self> {
        if panel_count == 0 {
            return Err(Error::param("panel count must be positive"));
        }
        for (i, p) in assignment.iter().enumerate() {
            if let Some(p) = p {
                if *p >= panel_count {
                    return Err(Error::index(format!(
                        "token {i} assigned to panel {p}, but only {panel_count} panels exist"
                    )));
                }
            }
        }
        Ok(Self {
            assignment,
            panel_count,
        })
    }

    /// All tokens in one panel.
    pub fn uniform(len: usize, panel: usize, panel_count: usize) -> Result<Self> {
        Self::new(vec![Some(panel); len], panel_count)
    }

    /// Panel map for a square token grid split into `panels_per_side ×
    /// panels_per_side` equal cells. Each token takes the panel containing
    /// its patch center; `with_exempt_prefix` prepends one exempt slot for a
    /// class token.
    pub fn from_token_grid(
        grid_side: usize,
        panels_per_side: usize,
        with_exempt_prefix: bool,
    ) -> Result<Self> {
        if grid_side == 0 || panels_per_side == 0 {
            return Err(Error::param("grid and panel sides must be positive"));
        }
        let mut assignment = Vec::with_capacity(grid_side * grid_side + usize::from(with_exempt_prefix));
        if with_exempt_prefix {
            assignment.push(None);
        }
        for r in 0..grid_side {
            for c in 0..grid_side {
                let pr = (((r as f64 + 0.5) * panels_per_side as f64 / grid_side as f64) as usize)
                    .min(panels_per_side - 1);
                let pc = (((c as f64 + 0.5) * panels_per_side as f64 / grid_side as f64) as usize)
                    .min(panels_per_side - 1);
                assignment.push(Some(pr * panels_per_side + pc));
            }
        }
        Self::new(assignment, panels_per_side * panels_per_side)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn panel_count(&self) -> usize {
        self.panel_count
    }

    pub fn panel_of(&self, token: usize) -> Option<usize> {
        self.assignment[token]
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }
}

/// One layer's worth of generators and cached operators.
#[derive(Debug, Clone)]
struct OproLayer {
    gens: Vec<LowRankGenerator>,
    cache: Vec<OrthogonalOperator>,
}

/// Per-layer, per-panel low-rank generators with cached operators.
///
/// The cache is refreshed explicitly (once per optimizer step in training);
/// between refreshes the bank is read-only and safe to share across threads.
#[derive(Debug, Clone)]
pub struct OproBank {
    layers: Vec<OproLayer>,
    dim: usize,
    rank: usize,
}

impl OproBank {
    /// Zero-interference initialization for every (layer, panel) slot: all
    /// cached operators start as the exact identity.
    pub fn init(
        layer_count: usize,
        panel_count: usize,
        dim: usize,
        rank: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if layer_count == 0 || panel_count == 0 {
            return Err(Error::param("layer and panel counts must be positive"));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for layer in 0..layer_count {
            let mut gens = Vec::with_capacity(panel_count);
            for panel in 0..panel_count {
                let sub_seed = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((layer * panel_count + panel) as u64);
                gens.push(init_zero_interference(dim, rank, sigma, sub_seed)?);
            }
            layers.push(OproLayer {
                cache: gens.iter().map(|_| OrthogonalOperator::identity(dim)).collect(),
                gens,
            });
        }
        Ok(Self { layers, dim, rank })
    }

    /// Builds a bank from explicit generators and refreshes the cache.
    pub fn from_generators(generators: Vec<Vec<LowRankGenerator>>) -> Result<Self> {
        if generators.is_empty() || generators[0].is_empty() {
            return Err(Error::param("generator grid must be non-empty"));
        }
        let dim = generators[0][0].dim();
        let rank = generators[0][0].rank();
        let panel_count = generators[0].len();
        let mut layers = Vec::with_capacity(generators.len());
        for gens in generators {
            if gens.len() != panel_count {
                return Err(Error::shape("layers disagree on panel count".to_string()));
            }
            for g in &gens {
                if g.dim() != dim || g.rank() != rank {
                    return Err(Error::shape(format!(
                        "all generators must share dim {dim} and rank {rank}"
                    )));
                }
            }
            layers.push(OproLayer {
                cache: vec![OrthogonalOperator::identity(dim); gens.len()],
                gens,
            });
        }
        let mut bank = Self { layers, dim, rank };
        bank.refresh_cache()?;
        Ok(bank)
    }

    /// Recomputes every cached operator from its generator.
    pub fn refresh_cache(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            for (gen, slot) in layer.gens.iter().zip(layer.cache.iter_mut()) {
                *slot = matrix_exp(&assemble_generator(gen))?;
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn panel_count(&self) -> usize {
        self.layers[0].gens.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn generator(&self, layer: usize, panel: usize) -> Result<&LowRankGenerator> {
        self.check_slot(layer, panel)?;
        Ok(&self.layers[layer].gens[panel])
    }

    /// Replaces a generator. The cache is stale until [`refresh_cache`].
    ///
    /// [`refresh_cache`]: OproBank::refresh_cache
    pub fn set_generator(&mut self, layer: usize, panel: usize, gen: LowRankGenerator) -> Result<()> {
        self.check_slot(layer, panel)?;
        if gen.dim() != self.dim || gen.rank() != self.rank {
            return Err(Error::shape(format!(
                "generator {}x{} does not match bank {}x{}",
                gen.dim(),
                gen.rank(),
                self.dim,
                self.rank
            )));
        }
        self.layers[layer].gens[panel] = gen;
        Ok(())
    }

    pub fn operator(&self, layer: usize, panel: usize) -> Result<&OrthogonalOperator> {
        self.check_slot(layer, panel)?;
        Ok(&self.layers[layer].cache[panel])
    }

    fn check_slot(&self, layer: usize, panel: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::index(format!(
                "layer {layer} out of range ({} layers)",
                self.layers.len()
            )));
        }
        if panel >= self.layers[layer].gens.len() {
            return Err(Error::index(format!(
                "panel {panel} out of range ({} panels)",
                self.layers[layer].gens.len()
            )));
        }
        Ok(())
    }
}

fn check_token_matrix(
    name: &str,
    m: &ArrayView2<f64>,
    map: &PanelMap,
    dim: usize,
) -> Result<()> {
    if m.nrows() != map.len() {
        return Err(Error::shape(format!(
            "{name}: {} rows but the panel map covers {} tokens",
            m.nrows(),
            map.len()
        )));
    }
    if m.ncols() != dim {
        return Err(Error::shape(format!(
            "{name}: {} columns but operators act on dim {dim}",
            m.ncols()
        )));
    }
    Ok(())
}

fn apply_per_token(
    tokens: &ArrayView2<f64>,
    map: &PanelMap,
    op_of_panel: impl Fn(usize) -> Array2<f64>,
) -> Array2<f64> {
    // Operators are shared within a panel, so fetch each panel's matrix once.
    let mut ops: Vec<Option<Array2<f64>>> = vec![None; map.panel_count()];
    let mut out = tokens.to_owned();
    for (i, panel) in map.assignment().iter().enumerate() {
        let Some(p) = panel else { continue };
        let op = ops[*p].get_or_insert_with(|| op_of_panel(*p));
        let row = tokens.row(i);
        let rotated = op.dot(&row);
        out.row_mut(i).assign(&rotated);
    }
    out
}

/// Applies each token's panel operator to its query and key rows.
/// Exempt tokens pass through unchanged.
pub fn modulate(
    q_tilde: &ArrayView2<f64>,
    k_tilde: &ArrayView2<f64>,
    map: &PanelMap,
    bank: &OproBank,
    layer: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_token_matrix("queries", q_tilde, map, bank.dim())?;
    check_token_matrix("keys", k_tilde, map, bank.dim())?;
    if layer >= bank.layer_count() {
        return Err(Error::index(format!(
            "layer {layer} out of range ({} layers)",
            bank.layer_count()
        )));
    }
    if map.panel_count() > bank.panel_count() {
        return Err(Error::index(format!(
            "panel map uses {} panels but the bank holds {}",
            map.panel_count(),
            bank.panel_count()
        )));
    }
    let q_hat = apply_per_token(q_tilde, map, |p| {
        bank.layers[layer].cache[p].data().clone()
    });
    let k_hat = apply_per_token(k_tilde, map, |p| {
        bank.layers[layer].cache[p].data().clone()
    });
    Ok((q_hat, k_hat))
}

/// The relative operator `U_{p_i}ᵀ U_{p_j}`; the exact identity when the two
/// panels coincide.
pub fn relative_operator(
    bank: &OproBank,
    layer: usize,
    p_i: usize,
    p_j: usize,
) -> Result<OrthogonalOperator> {
    let u_i = bank.operator(layer, p_i)?;
    if p_i == p_j {
        return Ok(OrthogonalOperator::identity(bank.dim()));
    }
    let u_j = bank.operator(layer, p_j)?;
    OrthogonalOperator::new(u_i.data().t().dot(u_j.data()))
}

/// Per-layer, per-panel phase offsets for the block-diagonal specialization.
#[derive(Debug, Clone)]
pub struct BlockDiagOproBank {
    /// One `panel_count × (dim/2)` phase matrix per layer.
    layers: Vec<Array2<f64>>,
    dim: usize,
}

impl BlockDiagOproBank {
    pub fn new(layers: Vec<Array2<f64>>, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::config(format!(
                "block-diagonal operators need an even dim, got {dim}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::param("at least one layer required"));
        }
        for m in &layers {
            if m.ncols() != dim / 2 {
                return Err(Error::shape(format!(
                    "phase matrix has {} blocks, expected {}",
                    m.ncols(),
                    dim / 2
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("phase offsets must be finite"));
            }
        }
        Ok(Self { layers, dim })
    }

    /// All-zero phases: every operator is the identity.
    pub fn zeros(layer_count: usize, panel_count: usize, dim: usize) -> Result<Self> {
        Self::new(
            (0..layer_count)
                .map(|_| Array2::zeros((panel_count, dim / 2)))
                .collect(),
            dim,
        )
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn panel_count(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phases(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer]
    }
}

/// Block-diagonal modulation: each 2×2 block of each token rotates by its
/// panel's phase offset. In a RoPE backbone the effective block angle for a
/// token pair becomes `θ_k(x_j − x_i) + φ_{p(j),k} − φ_{p(i),k}`, so
/// same-panel offsets cancel.
pub fn bd_modulate(
    q_tilde: &ArrayView2<f64>,
    k_tilde: &ArrayView2<f64>,
    map: &PanelMap,
    bank: &BlockDiagOproBank,
    layer: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_token_matrix("queries", q_tilde, map, bank.dim())?;
    check_token_matrix("keys", k_tilde, map, bank.dim())?;
    if layer >= bank.layer_count() {
        return Err(Error::index(format!(
            "layer {layer} out of range ({} layers)",
            bank.layer_count()
        )));
    }
    if map.panel_count() > bank.panel_count() {
        return Err(Error::index(format!(
            "panel map uses {} panels but the bank holds {}",
            map.panel_count(),
            bank.panel_count()
        )));
    }
    let phases = bank.phases(layer);
    let rotate = |tokens: &ArrayView2<f64>| -> Array2<f64> {
        let mut out = tokens.to_owned();
        for (i, panel) in map.assignment().iter().enumerate() {
            let Some(p) = panel else { continue };
            let angles: Vec<f64> = phases.row(*p).to_vec();
            let rotated = rotate_blocks(&tokens.row(i), &angles);
            out.row_mut(i).assign(&rotated);
        }
        out
    };
    Ok((rotate(q_tilde), rotate(k_tilde)))
}

/// Ablation parameter banks (single layer's worth).
#[derive(Debug, Clone)]
pub enum AblationBank {
    /// Per-panel additive biases for queries and keys (`panel_count × dim`
    /// each). Breaks isometry and same-panel invariance.
    Apb {
        bias_q: Array2<f64>,
        bias_k: Array2<f64>,
    },
    /// Independent per-panel orthogonal operators for queries and keys.
    /// Keeps isometry, breaks same-panel invariance unless the two families
    /// coincide.
    Asym {
        query_ops: Vec<OrthogonalOperator>,
        key_ops: Vec<OrthogonalOperator>,
    },
}

impl AblationBank {
    pub fn apb(bias_q: Array2<f64>, bias_k: Array2<f64>) -> Result<Self> {
        if bias_q.dim() != bias_k.dim() {
            return Err(Error::shape(format!(
                "bias shapes differ: {:?} vs {:?}",
                bias_q.dim(),
                bias_k.dim()
            )));
        }
        Ok(Self::Apb { bias_q, bias_k })
    }

    pub fn asym(query_ops: Vec<OrthogonalOperator>, key_ops: Vec<OrthogonalOperator>) -> Result<Self> {
        if query_ops.len() != key_ops.len() || query_ops.is_empty() {
            return Err(Error::shape(
                "query and key operator lists must have equal, positive length".to_string(),
            ));
        }
        let dim = query_ops[0].dim();
        if query_ops.iter().chain(key_ops.iter()).any(|u| u.dim() != dim) {
            return Err(Error::shape("all operators must share one dim".to_string()));
        }
        Ok(Self::Asym { query_ops, key_ops })
    }
}

/// Additive panel-bias ablation: `q̂ = q̃ + b_p^Q`, `k̂ = k̃ + b_p^K`.
pub fn apb_modulate(
    q_tilde: &ArrayView2<f64>,
    k_tilde: &ArrayView2<f64>,
    map: &PanelMap,
    bank: &AblationBank,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let AblationBank::Apb { bias_q, bias_k } = bank else {
        return Err(Error::config("ablation bank is not the additive-bias variant"));
    };
    check_token_matrix("queries", q_tilde, map, bias_q.ncols())?;
    check_token_matrix("keys", k_tilde, map, bias_k.ncols())?;
    if map.panel_count() > bias_q.nrows() {
        return Err(Error::index(format!(
            "panel map uses {} panels but biases cover {}",
            map.panel_count(),
            bias_q.nrows()
        )));
    }
    let mut q_hat = q_tilde.to_owned();
    let mut k_hat = k_tilde.to_owned();
    for (i, panel) in map.assignment().iter().enumerate() {
        let Some(p) = panel else { continue };
        let mut q_row = q_hat.row_mut(i);
        q_row += &bias_q.row(*p);
        let mut k_row = k_hat.row_mut(i);
        k_row += &bias_k.row(*p);
    }
    Ok((q_hat, k_hat))
}

/// Asymmetric-operator ablation: `q̂ = U_p q̃`, `k̂ = V_p k̃`.
pub fn asym_modulate(
    q_tilde: &ArrayView2<f64>,
    k_tilde: &ArrayView2<f64>,
    map: &PanelMap,
    bank: &AblationBank,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let AblationBank::Asym { query_ops, key_ops } = bank else {
        return Err(Error::config("ablation bank is not the asymmetric variant"));
    };
    let dim = query_ops[0].dim();
    check_token_matrix("queries", q_tilde, map, dim)?;
    check_token_matrix("keys", k_tilde, map, dim)?;
    if map.panel_count() > query_ops.len() {
        return Err(Error::index(format!(
            "panel map uses {} panels but the bank holds {}",
            map.panel_count(),
            query_ops.len()
        )));
    }
    let q_hat = apply_per_token(q_tilde, map, |p| query_ops[p].data().clone());
    let k_hat = apply_per_token(k_tilde, map, |p| key_ops[p].data().clone());
    Ok((q_hat, k_hat))
}
