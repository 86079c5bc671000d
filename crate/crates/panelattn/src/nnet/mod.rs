//! A small vision transformer with pluggable positional encoding, panel
//! operator hooks in attention, LoRA adapters on the attention projections,
//! and exact hand-written gradients for every trainable parameter.
//!
//! The network runs in a caller-chosen precision ([`Real`]); operator
//! construction (matrix exponentials and their adjoints) always runs in
//! f64 and crosses the precision boundary only when cached operators are
//! applied to activations.
//!
//! Forward/backward processes fixed-size sample chunks; batches map over
//! chunks via [`Exec`] and reduce in chunk order, so results do not depend
//! on the worker count.

pub mod layers;
pub mod ops;
pub mod params;
mod real;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::opro::PanelMap;
use crate::ortho::{
    exp_backward, generator_backward, matrix_exp, LowRankGenerator, SkewMatrix,
};
use crate::posenc::FrequencyBank;
use crate::{Error, Result};

use layers::{
    bias_grad, cross_entropy_chunk, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_grad_input, linear_grad_weight, softmax_backward_rows, softmax_rows, LnCache,
};
use ops::{
    block_rotate, block_rotation_angle_grads, dense_apply_grouped, dense_upstream_grouped,
    panel_bias_add, panel_bias_grads, panel_groups, position_groups, OpCache, OpGrid, RotTables,
    SlotMap,
};
use params::{GradAccum, Group, ParamId, ParamStore, TrainableLayout};
pub use real::Real;

/// Samples per work chunk. Fixed so that reductions are independent of the
/// worker count.
pub const CHUNK_SAMPLES: usize = 8;

/// Rotary frequency base shared by RoPE and the ComRoPE initialization.
pub const ROPE_BASE: f64 = 10_000.0;

/// Backbone dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub mlp_ratio: usize,
    pub class_count: usize,
    pub use_class_token: bool,
}

impl VitConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn token_count(&self) -> usize {
        self.patch_count() + usize::from(self.use_class_token)
    }

    pub fn validate(&self, encoder: EncoderKind) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::config(format!(
                "model dim {} must be divisible by head count {}",
                self.model_dim, self.head_count
            )));
        }
        if self.layer_count == 0 || self.mlp_ratio == 0 || self.class_count == 0 {
            return Err(Error::config(
                "layer count, mlp ratio, class count must be positive",
            ));
        }
        match encoder {
            EncoderKind::Rope | EncoderKind::Comrope => {
                if self.head_dim() % 4 != 0 {
                    return Err(Error::config(format!(
                        "2D rotary encoders need head dim divisible by 4, got {}",
                        self.head_dim()
                    )));
                }
            }
            EncoderKind::Liere => {
                if self.head_dim() % 2 != 0 {
                    return Err(Error::config(format!(
                        "LieRE needs an even head dim, got {}",
                        self.head_dim()
                    )));
                }
            }
            EncoderKind::Ape => {}
        }
        Ok(())
    }
}

/// Positional-encoding regime of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Ape,
    Rope,
    Liere,
    Comrope,
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Ape => "ape",
            EncoderKind::Rope => "rope",
            EncoderKind::Liere => "liere",
            EncoderKind::Comrope => "comrope",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ape" => Ok(EncoderKind::Ape),
            "rope" => Ok(EncoderKind::Rope),
            "liere" => Ok(EncoderKind::Liere),
            "comrope" => Ok(EncoderKind::Comrope),
            other => Err(Error::param(format!("unknown encoder kind: {other}"))),
        }
    }
}

/// Adapter/training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Full,
    LinearProbe,
    Lora,
    LoraOpro,
    LoraOproBd,
    LoraApb,
    LoraAsym,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::LinearProbe => "linear-probe",
            Regime::Lora => "lora",
            Regime::LoraOpro => "lora+opro",
            Regime::LoraOproBd => "lora+opro-bd",
            Regime::LoraApb => "lora+apb",
            Regime::LoraAsym => "lora+asym",
        }
    }

    pub fn uses_lora(&self) -> bool {
        matches!(
            self,
            Regime::Lora | Regime::LoraOpro | Regime::LoraOproBd | Regime::LoraApb | Regime::LoraAsym
        )
    }

    /// Parameter groups that receive gradients under this regime.
    pub fn trainable_groups(&self) -> Vec<Group> {
        match self {
            Regime::Full => Group::all().to_vec(),
            Regime::LinearProbe => vec![Group::Head],
            Regime::Lora => vec![Group::Lora, Group::Head],
            Regime::LoraOpro => vec![Group::Lora, Group::Opro, Group::Head],
            Regime::LoraOproBd => vec![Group::Lora, Group::OproBd, Group::Head],
            Regime::LoraApb => vec![Group::Lora, Group::Apb, Group::Head],
            Regime::LoraAsym => vec![Group::Lora, Group::Asym, Group::Head],
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Regime::Full),
            "none" | "linear-probe" => Ok(Regime::LinearProbe),
            "lora" => Ok(Regime::Lora),
            "lora+opro" => Ok(Regime::LoraOpro),
            "lora+opro-bd" => Ok(Regime::LoraOproBd),
            "lora+apb" => Ok(Regime::LoraApb),
            "lora+asym" => Ok(Regime::LoraAsym),
            other => Err(Error::param(format!("unknown adapter regime: {other}"))),
        }
    }
}

/// Adapter hyperparameters; `panel_count` fixes the operator bank width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub opro_rank: usize,
    pub sigma: f64,
    pub panel_count: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            lora_alpha: 16.0,
            opro_rank: 8,
            sigma: 0.02,
            panel_count: 1,
        }
    }
}

/// Initialization scale of the LieRE generator factors.
pub const LIERE_INIT_SCALE: f64 = 1e-3;
/// Weight initialization standard deviation.
const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct LoraHandles {
    down: ParamId,
    up: ParamId,
}

#[derive(Debug, Clone)]
struct LayerHandles {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    lora: Option<[LoraHandles; 4]>,
    opro: Option<Vec<(ParamId, ParamId)>>,
    opro_bd: Option<ParamId>,
    apb: Option<(ParamId, ParamId)>,
    asym: Option<Vec<(ParamId, ParamId, ParamId, ParamId)>>,
}

#[derive(Debug, Clone)]
struct Handles {
    patch_w: ParamId,
    patch_b: ParamId,
    class_token: Option<ParamId>,
    ape: Option<ParamId>,
    liere: Option<(ParamId, ParamId)>,
    comrope: Option<(ParamId, ParamId)>,
    layers: Vec<LayerHandles>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// Per-step operator caches; read-only during forward/backward.
pub struct StepOperators<F: Real> {
    pub rot: RotTables<F>,
    pub opro: Option<OpGrid<F>>,
    pub asym_q: Option<OpGrid<F>>,
    pub asym_k: Option<OpGrid<F>>,
    pub slots: SlotMap,
}

/// Loss, accuracy, and gradients of one batch.
pub struct LossOutput<F: Real> {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: GradAccum<F>,
}

/// The transformer.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub cfg: VitConfig,
    pub encoder: EncoderKind,
    pub regime: Regime,
    pub adapter: AdapterConfig,
    pub store: ParamStore<F>,
    handles: Handles,
    coords: Vec<(f64, f64)>,
    rope_thetas: Vec<f64>,
    layout: TrainableLayout,
}

fn gaussian2<F: Real>(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_fn((rows, cols), |_| F::of(normal.sample(rng)))
}

impl<F: Real> Model<F> {
    /// Builds a backbone (no adapters) with deterministic initialization.
    pub fn new(cfg: VitConfig, encoder: EncoderKind, seed: u64) -> Result<Self> {
        cfg.validate(encoder)?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut store: ParamStore<F> = ParamStore::new();
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let patch_in = cfg.patch_size * cfg.patch_size;
        let tokens = cfg.token_count();

        let patch_w = store.add2("embed.patch_w", Group::Backbone, gaussian2(&mut rng, patch_in, d, WEIGHT_INIT_STD));
        let patch_b = store.add1("embed.patch_b", Group::Backbone, Array1::zeros(d));
        let class_token = cfg.use_class_token.then(|| {
            store.add1(
                "embed.class_token",
                Group::Backbone,
                gaussian2::<F>(&mut rng, 1, d, WEIGHT_INIT_STD).row(0).to_owned(),
            )
        });

        let rope_thetas = if matches!(encoder, EncoderKind::Rope | EncoderKind::Comrope) {
            FrequencyBank::geometric(dh, ROPE_BASE)?.thetas().to_vec()
        } else {
            Vec::new()
        };

        let ape = (encoder == EncoderKind::Ape).then(|| {
            store.add2(
                "encoder.ape_table",
                Group::Encoder,
                gaussian2(&mut rng, tokens, d, WEIGHT_INIT_STD),
            )
        });
        let liere = (encoder == EncoderKind::Liere).then(|| {
            let wx = store.add2("encoder.liere_wx", Group::Encoder, gaussian2(&mut rng, dh, dh, LIERE_INIT_SCALE));
            let wy = store.add2("encoder.liere_wy", Group::Encoder, gaussian2(&mut rng, dh, dh, LIERE_INIT_SCALE));
            (wx, wy)
        });
        let comrope = (encoder == EncoderKind::Comrope).then(|| {
            let blocks = dh / 2;
            let mut rate_x = Array1::zeros(blocks);
            let mut rate_y = Array1::zeros(blocks);
            for k in 0..blocks {
                if k < blocks / 2 {
                    rate_x[k] = F::of(rope_thetas[k]);
                } else {
                    rate_y[k] = F::of(rope_thetas[k]);
                }
            }
            let rx = store.add1("encoder.comrope_rate_x", Group::Encoder, rate_x);
            let ry = store.add1("encoder.comrope_rate_y", Group::Encoder, rate_y);
            (rx, ry)
        });

        let mut layer_handles = Vec::with_capacity(cfg.layer_count);
        for l in 0..cfg.layer_count {
            let p = |name: &str| format!("layer{l}.{name}");
            layer_handles.push(LayerHandles {
                ln1_g: store.add1(p("ln1_gain"), Group::Backbone, Array1::from_elem(d, F::one())),
                ln1_b: store.add1(p("ln1_bias"), Group::Backbone, Array1::zeros(d)),
                wq: store.add2(p("wq"), Group::Backbone, gaussian2(&mut rng, d, d, WEIGHT_INIT_STD)),
                bq: store.add1(p("bq"), Group::Backbone, Array1::zeros(d)),
                wk: store.add2(p("wk"), Group::Backbone, gaussian2(&mut rng, d, d, WEIGHT_INIT_STD)),
                bk: store.add1(p("bk"), Group::Backbone, Array1::zeros(d)),
                wv: store.add2(p("wv"), Group::Backbone, gaussian2(&mut rng, d, d, WEIGHT_INIT_STD)),
                bv: store.add1(p("bv"), Group::Backbone, Array1::zeros(d)),
                wo: store.add2(p("wo"), Group::Backbone, gaussian2(&mut rng, d, d, WEIGHT_INIT_STD)),
                bo: store.add1(p("bo"), Group::Backbone, Array1::zeros(d)),
                ln2_g: store.add1(p("ln2_gain"), Group::Backbone, Array1::from_elem(d, F::one())),
                ln2_b: store.add1(p("ln2_bias"), Group::Backbone, Array1::zeros(d)),
                w1: store.add2(p("mlp_w1"), Group::Backbone, gaussian2(&mut rng, d, cfg.mlp_ratio * d, WEIGHT_INIT_STD)),
                b1: store.add1(p("mlp_b1"), Group::Backbone, Array1::zeros(cfg.mlp_ratio * d)),
                w2: store.add2(p("mlp_w2"), Group::Backbone, gaussian2(&mut rng, cfg.mlp_ratio * d, d, WEIGHT_INIT_STD)),
                b2: store.add1(p("mlp_b2"), Group::Backbone, Array1::zeros(d)),
                lora: None,
                opro: None,
                opro_bd: None,
                apb: None,
                asym: None,
            });
        }

        let lnf_g = store.add1("final_ln_gain", Group::Backbone, Array1::from_elem(d, F::one()));
        let lnf_b = store.add1("final_ln_bias", Group::Backbone, Array1::zeros(d));
        let head_w1 = store.add2("head.w1", Group::Head, gaussian2(&mut rng, d, d, WEIGHT_INIT_STD));
        let head_b1 = store.add1("head.b1", Group::Head, Array1::zeros(d));
        let head_w2 = store.add2("head.w2", Group::Head, gaussian2(&mut rng, d, cfg.class_count, WEIGHT_INIT_STD));
        let head_b2 = store.add1("head.b2", Group::Head, Array1::zeros(cfg.class_count));

        let mut coords = Vec::with_capacity(tokens);
        if cfg.use_class_token {
            coords.push((0.0, 0.0));
        }
        let g = cfg.grid_side();
        for r in 0..g {
            for c in 0..g {
                coords.push((c as f64, r as f64));
            }
        }

        let mut model = Self {
            cfg,
            encoder,
            regime: Regime::Full,
            adapter: AdapterConfig::default(),
            store,
            handles: Handles {
                patch_w,
                patch_b,
                class_token,
                ape,
                liere,
                comrope,
                layers: layer_handles,
                lnf_g,
                lnf_b,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
            coords,
            rope_thetas,
            layout: TrainableLayout { slots: Vec::new(), total: 0 },
        };
        model.set_trainable(Regime::Full)?;
        Ok(model)
    }

    /// Creates the parameter structures a regime needs (LoRA and the
    /// selected panel-operator variant). Zero-interference initialization
    /// throughout: every adapter is an exact no-op at step 0.
    pub fn attach_adapters(&mut self, regime: Regime, adapter: AdapterConfig, seed: u64) -> Result<()> {
        use rand::SeedableRng;
        if matches!(regime, Regime::Full) {
            self.regime = regime;
            return self.set_trainable(regime);
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let d = self.cfg.model_dim;
        let dh = self.cfg.head_dim();
        let panels = adapter.panel_count;
        if panels == 0 {
            return Err(Error::param("panel count must be positive"));
        }
        if adapter.opro_rank > dh {
            return Err(Error::param(format!(
                "operator rank {} exceeds head dim {dh}",
                adapter.opro_rank
            )));
        }
        if matches!(regime, Regime::LoraOproBd) && dh % 2 != 0 {
            return Err(Error::config(format!(
                "block-diagonal operators need an even head dim, got {dh}"
            )));
        }
        let layer_count = self.cfg.layer_count;
        for l in 0..layer_count {
            let p = |name: &str| format!("layer{l}.{name}");
            if regime.uses_lora() && self.handles.layers[l].lora.is_none() {
                let mut mk = |proj: &str| LoraHandles {
                    down: self.store.add2(
                        p(&format!("lora_{proj}_down")),
                        Group::Lora,
                        gaussian2(&mut rng, d, adapter.lora_rank, WEIGHT_INIT_STD),
                    ),
                    up: self.store.add2(
                        p(&format!("lora_{proj}_up")),
                        Group::Lora,
                        Array2::zeros((adapter.lora_rank, d)),
                    ),
                };
                self.handles.layers[l].lora = Some([mk("q"), mk("k"), mk("v"), mk("o")]);
            }
            match regime {
                Regime::LoraOpro => {
                    let mut slots = Vec::with_capacity(panels);
                    for panel in 0..panels {
                        let sub = seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add((l * panels + panel) as u64);
                        let gen = crate::ortho::init_zero_interference(dh, adapter.opro_rank, adapter.sigma, sub)?;
                        let left = self.store.add2(
                            p(&format!("opro_p{panel}_left")),
                            Group::Opro,
                            gen.left().mapv(F::of),
                        );
                        let right = self.store.add2(
                            p(&format!("opro_p{panel}_right")),
                            Group::Opro,
                            gen.right().mapv(F::of),
                        );
                        slots.push((left, right));
                    }
                    self.handles.layers[l].opro = Some(slots);
                }
                Regime::LoraOproBd => {
                    self.handles.layers[l].opro_bd = Some(self.store.add2(
                        p("opro_bd_phases"),
                        Group::OproBd,
                        Array2::zeros((panels, dh / 2)),
                    ));
                }
                Regime::LoraApb => {
                    let bq = self
                        .store
                        .add2(p("apb_bias_q"), Group::Apb, Array2::zeros((panels, dh)));
                    let bk = self
                        .store
                        .add2(p("apb_bias_k"), Group::Apb, Array2::zeros((panels, dh)));
                    self.handles.layers[l].apb = Some((bq, bk));
                }
                Regime::LoraAsym => {
                    let mut slots = Vec::with_capacity(panels);
                    for panel in 0..panels {
                        let base = seed
                            .wrapping_mul(0x517c_c1b7_2722_0a95)
                            .wrapping_add((l * panels + panel) as u64);
                        let gen_q =
                            crate::ortho::init_zero_interference(dh, adapter.opro_rank, adapter.sigma, base)?;
                        let gen_k = crate::ortho::init_zero_interference(
                            dh,
                            adapter.opro_rank,
                            adapter.sigma,
                            base.wrapping_add(0x5bf0_3635),
                        )?;
                        let ql = self.store.add2(
                            p(&format!("asym_p{panel}_q_left")),
                            Group::Asym,
                            gen_q.left().mapv(F::of),
                        );
                        let qr = self.store.add2(
                            p(&format!("asym_p{panel}_q_right")),
                            Group::Asym,
                            gen_q.right().mapv(F::of),
                        );
                        let kl = self.store.add2(
                            p(&format!("asym_p{panel}_k_left")),
                            Group::Asym,
                            gen_k.left().mapv(F::of),
                        );
                        let kr = self.store.add2(
                            p(&format!("asym_p{panel}_k_right")),
                            Group::Asym,
                            gen_k.right().mapv(F::of),
                        );
                        slots.push((ql, qr, kl, kr));
                    }
                    self.handles.layers[l].asym = Some(slots);
                }
                _ => {}
            }
        }
        self.adapter = adapter;
        self.regime = regime;
        self.set_trainable(regime)
    }

    /// Marks exactly the regime's parameter set trainable.
    pub fn set_trainable(&mut self, regime: Regime) -> Result<()> {
        let needs = |have: bool, what: &str| -> Result<()> {
            if have {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "regime {} requires {what} adapters, but none are attached",
                    regime.name()
                )))
            }
        };
        let l0 = &self.handles.layers[0];
        match regime {
            Regime::Full | Regime::LinearProbe => {}
            Regime::Lora => needs(l0.lora.is_some(), "LoRA")?,
            Regime::LoraOpro => {
                needs(l0.lora.is_some(), "LoRA")?;
                needs(l0.opro.is_some(), "panel-operator")?;
            }
            Regime::LoraOproBd => {
                needs(l0.lora.is_some(), "LoRA")?;
                needs(l0.opro_bd.is_some(), "block-diagonal")?;
            }
            Regime::LoraApb => {
                needs(l0.lora.is_some(), "LoRA")?;
                needs(l0.apb.is_some(), "additive-bias")?;
            }
            Regime::LoraAsym => {
                needs(l0.lora.is_some(), "LoRA")?;
                needs(l0.asym.is_some(), "asymmetric-operator")?;
            }
        }
        self.store.set_trainable_groups(&regime.trainable_groups());
        self.layout = self.store.trainable_layout();
        Ok(())
    }

    pub fn layout(&self) -> &TrainableLayout {
        &self.layout
    }

    /// Writes a flat trainable vector back into the store.
    pub fn load_trainable(&mut self, flat: &[F]) -> Result<()> {
        self.store.load_trainable(&self.layout, flat)
    }

    /// Copies the trainable parameters into a flat vector.
    pub fn dump_trainable(&self) -> Vec<F> {
        self.store.dump_trainable(&self.layout)
    }

    pub fn token_count(&self) -> usize {
        self.cfg.token_count()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Gradient of one named parameter from a batch's flat gradients, while
    /// that parameter is trainable.
    pub fn grad_of(&self, grads: &GradAccum<F>, name: &str) -> Option<Vec<f64>> {
        let id = self.store.find(name)?;
        let off = self.layout.offset(id)?;
        let len = self.store.entry(id).value.len();
        Some(grads.flat[off..off + len].iter().map(|v| v.to64()).collect())
    }

    fn skew_of_factors(&self, left: ParamId, right: ParamId) -> (LowRankGenerator, SkewMatrix) {
        let l = self.store.get2_f64(left);
        let r = self.store.get2_f64(right);
        let gen = LowRankGenerator::new(l, r).expect("factor shapes fixed at construction");
        let skew = crate::ortho::assemble_generator(&gen);
        (gen, skew)
    }

    /// Rebuilds every operator cache from the current parameters. Called
    /// once per optimizer step; forward passes share the result read-only.
    pub fn refresh_operators(&self) -> Result<StepOperators<F>> {
        let dh = self.cfg.head_dim();
        let tokens = self.cfg.token_count();
        let blocks = dh / 2;

        let rot = match self.encoder {
            EncoderKind::Ape => RotTables::None,
            EncoderKind::Rope => {
                let mut cos = Array2::zeros((tokens, blocks));
                let mut sin = Array2::zeros((tokens, blocks));
                for (t, &(x, y)) in self.coords.iter().enumerate() {
                    for k in 0..blocks {
                        let pos = if k < blocks / 2 { x } else { y };
                        let angle = self.rope_thetas[k] * pos;
                        cos[[t, k]] = F::of(angle.cos());
                        sin[[t, k]] = F::of(angle.sin());
                    }
                }
                RotTables::Blocks { cos, sin }
            }
            EncoderKind::Comrope => {
                let (rx, ry) = self.handles.comrope.expect("comrope handles exist");
                let rate_x = self.store.get1(rx);
                let rate_y = self.store.get1(ry);
                let mut cos = Array2::zeros((tokens, blocks));
                let mut sin = Array2::zeros((tokens, blocks));
                for (t, &(x, y)) in self.coords.iter().enumerate() {
                    for k in 0..blocks {
                        let angle = rate_x[k].to64() * x + rate_y[k].to64() * y;
                        cos[[t, k]] = F::of(angle.cos());
                        sin[[t, k]] = F::of(angle.sin());
                    }
                }
                RotTables::Blocks { cos, sin }
            }
            EncoderKind::Liere => {
                let (wx, wy) = self.handles.liere.expect("liere handles exist");
                let wx = self.store.get2_f64(wx);
                let wy = self.store.get2_f64(wy);
                let ax = &wx - &wx.t();
                let ay = &wy - &wy.t();
                let mut per_pos = Vec::with_capacity(tokens);
                for &(x, y) in &self.coords {
                    let skew = ax.mapv(|v| v * x) + ay.mapv(|v| v * y);
                    let u = matrix_exp(&SkewMatrix::new_unchecked(skew.clone()))?;
                    per_pos.push(OpCache::from_skew_u(skew, u.data()));
                }
                RotTables::Dense { per_pos }
            }
        };

        let build_grid = |factors: &dyn Fn(usize, usize) -> (ParamId, ParamId)| -> Result<OpGrid<F>> {
            let layers = self.cfg.layer_count;
            let panels = self.adapter.panel_count;
            let mut ops = Vec::with_capacity(layers * panels);
            for l in 0..layers {
                for p in 0..panels {
                    let (left, right) = factors(l, p);
                    let (_, skew) = self.skew_of_factors(left, right);
                    let u = matrix_exp(&skew)?;
                    ops.push(OpCache::from_skew_u(skew.into_inner(), u.data()));
                }
            }
            Ok(OpGrid { ops, layers, panels })
        };

        let opro = if self.handles.layers[0].opro.is_some() {
            Some(build_grid(&|l, p| {
                let slots = self.handles.layers[l].opro.as_ref().expect("opro attached");
                slots[p]
            })?)
        } else {
            None
        };
        let asym_q = if self.handles.layers[0].asym.is_some() {
            Some(build_grid(&|l, p| {
                let s = self.handles.layers[l].asym.as_ref().expect("asym attached")[p];
                (s.0, s.1)
            })?)
        } else {
            None
        };
        let asym_k = if self.handles.layers[0].asym.is_some() {
            Some(build_grid(&|l, p| {
                let s = self.handles.layers[l].asym.as_ref().expect("asym attached")[p];
                (s.2, s.3)
            })?)
        } else {
            None
        };

        // Operator-gradient slots, allocated only for trainable groups.
        let mut slots = SlotMap {
            panels: self.adapter.panel_count,
            positions: tokens,
            ..Default::default()
        };
        let lp = self.cfg.layer_count * self.adapter.panel_count;
        if opro.is_some() && self.group_trainable(Group::Opro) {
            slots.opro_base = Some(slots.dims.len());
            slots.dims.extend(std::iter::repeat_n(dh, lp));
        }
        if asym_q.is_some() && self.group_trainable(Group::Asym) {
            slots.asym_q_base = Some(slots.dims.len());
            slots.dims.extend(std::iter::repeat_n(dh, lp));
            slots.asym_k_base = Some(slots.dims.len());
            slots.dims.extend(std::iter::repeat_n(dh, lp));
        }
        if matches!(rot, RotTables::Dense { .. }) && self.group_trainable(Group::Encoder) {
            slots.liere_base = Some(slots.dims.len());
            slots.dims.extend(std::iter::repeat_n(dh, tokens));
        }

        Ok(StepOperators {
            rot,
            opro,
            asym_q,
            asym_k,
            slots,
        })
    }

    fn group_trainable(&self, group: Group) -> bool {
        self.store
            .entries()
            .iter()
            .any(|e| e.group == group && e.trainable)
    }

    fn check_batch(&self, images: &ArrayView3<u8>, map: &PanelMap) -> Result<()> {
        let (_, h, w) = images.dim();
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::shape(format!(
                "images are {h}x{w}, model expects {0}x{0}",
                self.cfg.image_size
            )));
        }
        if map.len() != self.cfg.token_count() {
            return Err(Error::shape(format!(
                "panel map covers {} tokens, model has {}",
                map.len(),
                self.cfg.token_count()
            )));
        }
        if self.handles.layers[0].opro.is_some()
            || self.handles.layers[0].asym.is_some()
            || self.handles.layers[0].opro_bd.is_some()
            || self.handles.layers[0].apb.is_some()
        {
            if map.panel_count() > self.adapter.panel_count {
                return Err(Error::index(format!(
                    "panel map uses {} panels but adapters were sized for {}",
                    map.panel_count(),
                    self.adapter.panel_count
                )));
            }
        }
        Ok(())
    }

    /// Patchifies a chunk of images and applies the embedding (+ class
    /// token, + APE table). Returns (patch matrix, token matrix).
    fn embed_chunk(&self, images: &ArrayView3<u8>, start: usize, count: usize) -> (Array2<F>, Array2<F>) {
        let p = self.cfg.patch_size;
        let g = self.cfg.grid_side();
        let np = self.cfg.patch_count();
        let nt = self.cfg.token_count();
        let d = self.cfg.model_dim;
        let mut patches = Array2::zeros((count * np, p * p));
        for c in 0..count {
            let img = images.index_axis(Axis(0), start + c);
            for pr in 0..g {
                for pc in 0..g {
                    let row = c * np + pr * g + pc;
                    for y in 0..p {
                        for x in 0..p {
                            let v = img[[pr * p + y, pc * p + x]] as f64;
                            patches[[row, y * p + x]] = F::of((v / 255.0 - 0.5) / 0.5);
                        }
                    }
                }
            }
        }
        let patch_w = self.store.get2(self.handles.patch_w);
        let patch_b = self.store.get1(self.handles.patch_b);
        let embedded = linear(&patches.view(), &patch_w, Some(&patch_b));

        let mut tokens = Array2::zeros((count * nt, d));
        let offset = usize::from(self.cfg.use_class_token);
        for c in 0..count {
            if let Some(ct) = self.handles.class_token {
                tokens.row_mut(c * nt).assign(&self.store.get1(ct));
            }
            tokens
                .slice_mut(s![c * nt + offset..(c + 1) * nt, ..])
                .assign(&embedded.slice(s![c * np..(c + 1) * np, ..]));
        }
        if let Some(ape) = self.handles.ape {
            let table = self.store.get2(ape);
            for c in 0..count {
                let mut block = tokens.slice_mut(s![c * nt..(c + 1) * nt, ..]);
                block += &table;
            }
        }
        (patches, tokens)
    }

    /// Logits for a batch of images.
    pub fn forward(
        &self,
        ops: &StepOperators<F>,
        images: &ArrayView3<u8>,
        map: &PanelMap,
        exec: Exec,
    ) -> Result<Array2<F>> {
        self.check_batch(images, map)?;
        let batch = images.dim().0;
        let pgroups = panel_groups(map);
        let chunks = exec.map_ranges(batch, CHUNK_SAMPLES, |range| {
            let count = range.len();
            let (_, tokens) = self.embed_chunk(images, range.start, count);
            let caches = self.forward_chunk(ops, tokens, map, &pgroups, count);
            caches.logits
        });
        let mut logits = Array2::zeros((batch, self.cfg.class_count));
        let mut row = 0usize;
        for chunk in chunks {
            for r in chunk.rows() {
                logits.row_mut(row).assign(&r);
                row += 1;
            }
        }
        Ok(logits)
    }

    /// Mean loss, accuracy, and exact gradients for all trainable
    /// parameters.
    pub fn loss_and_grads(
        &self,
        ops: &StepOperators<F>,
        images: &ArrayView3<u8>,
        labels: &[u8],
        map: &PanelMap,
        exec: Exec,
    ) -> Result<LossOutput<F>> {
        self.check_batch(images, map)?;
        let batch = images.dim().0;
        if labels.len() != batch {
            return Err(Error::shape(format!(
                "{} labels for {batch} images",
                labels.len()
            )));
        }
        if labels.iter().any(|l| *l as usize >= self.cfg.class_count) {
            return Err(Error::param("label out of class range".to_string()));
        }
        let pgroups = panel_groups(map);
        let posgroups = position_groups(self.cfg.token_count());

        let partials = exec.map_ranges(batch, CHUNK_SAMPLES, |range| {
            let count = range.len();
            let (patches, tokens) = self.embed_chunk(images, range.start, count);
            let caches = self.forward_chunk(ops, tokens, map, &pgroups, count);
            self.backward_chunk(
                ops,
                caches,
                patches,
                &labels[range.start..range.end],
                batch,
                map,
                &pgroups,
                &posgroups,
                count,
            )
        });

        let mut total_loss = 0.0f64;
        let mut total_correct = 0usize;
        let mut grads = GradAccum::zeros(&self.layout, &ops.slots.dims);
        for (loss_sum, correct, partial) in partials {
            total_loss += loss_sum;
            total_correct += correct;
            grads.add_assign(&partial);
        }
        let loss = total_loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite training loss ({loss}); inputs or parameters diverged"
            )));
        }
        self.finalize_operator_grads(ops, &mut grads)?;
        Ok(LossOutput {
            loss,
            accuracy: total_correct as f64 / batch as f64,
            grads,
        })
    }

    /// Folds the f64 operator-gradient slots through the exponential adjoint
    /// onto the factor parameters.
    fn finalize_operator_grads(&self, ops: &StepOperators<F>, grads: &mut GradAccum<F>) -> Result<()> {
        let panels = self.adapter.panel_count;
        if let (Some(grid), Some(_)) = (&ops.opro, ops.slots.opro_base) {
            for l in 0..self.cfg.layer_count {
                let slots = self.handles.layers[l].opro.as_ref().expect("opro attached");
                for p in 0..panels {
                    let slot = ops.slots.opro_slot(l, p).expect("slot allocated");
                    let upstream = &grads.op_slots[slot];
                    let cache = grid.at(l, p);
                    let skew = SkewMatrix::new_unchecked(cache.skew.clone());
                    let g_tilde = exp_backward(&skew, &upstream.view())?;
                    let (gen, _) = self.skew_of_factors(slots[p].0, slots[p].1);
                    let bundle = generator_backward(&gen, &g_tilde.view())?;
                    grads.acc2_f64(&self.layout, slots[p].0, &bundle.grad_left);
                    grads.acc2_f64(&self.layout, slots[p].1, &bundle.grad_right);
                }
            }
        }
        if let (Some(grid_q), Some(grid_k), Some(_)) = (&ops.asym_q, &ops.asym_k, ops.slots.asym_q_base) {
            for l in 0..self.cfg.layer_count {
                let slots = self.handles.layers[l].asym.as_ref().expect("asym attached");
                for p in 0..panels {
                    let (ql, qr, kl, kr) = slots[p];
                    let slot_q = ops.slots.asym_q_slot(l, p).expect("slot allocated");
                    let cache = grid_q.at(l, p);
                    let g_tilde = exp_backward(
                        &SkewMatrix::new_unchecked(cache.skew.clone()),
                        &grads.op_slots[slot_q].view(),
                    )?;
                    let (gen, _) = self.skew_of_factors(ql, qr);
                    let bundle = generator_backward(&gen, &g_tilde.view())?;
                    grads.acc2_f64(&self.layout, ql, &bundle.grad_left);
                    grads.acc2_f64(&self.layout, qr, &bundle.grad_right);

                    let slot_k = ops.slots.asym_k_slot(l, p).expect("slot allocated");
                    let cache = grid_k.at(l, p);
                    let g_tilde = exp_backward(
                        &SkewMatrix::new_unchecked(cache.skew.clone()),
                        &grads.op_slots[slot_k].view(),
                    )?;
                    let (gen, _) = self.skew_of_factors(kl, kr);
                    let bundle = generator_backward(&gen, &g_tilde.view())?;
                    grads.acc2_f64(&self.layout, kl, &bundle.grad_left);
                    grads.acc2_f64(&self.layout, kr, &bundle.grad_right);
                }
            }
        }
        if let (RotTables::Dense { per_pos }, Some(_)) = (&ops.rot, ops.slots.liere_base) {
            let dh = self.cfg.head_dim();
            let mut g_ax = Array2::<f64>::zeros((dh, dh));
            let mut g_ay = Array2::<f64>::zeros((dh, dh));
            for (t, &(x, y)) in self.coords.iter().enumerate() {
                let slot = ops.slots.liere_slot(t).expect("slot allocated");
                let upstream = &grads.op_slots[slot];
                if upstream.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let skew = SkewMatrix::new_unchecked(per_pos[t].skew.clone());
                let g_s = exp_backward(&skew, &upstream.view())?;
                g_ax.scaled_add(x, &g_s);
                g_ay.scaled_add(y, &g_s);
            }
            let (wx, wy) = self.handles.liere.expect("liere handles exist");
            let g_wx = &g_ax - &g_ax.t();
            let g_wy = &g_ay - &g_ay.t();
            grads.acc2_f64(&self.layout, wx, &g_wx);
            grads.acc2_f64(&self.layout, wy, &g_wy);
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one chunk's forward pass.
struct LayerCache<F> {
    ln1: LnCache<F>,
    ln1_out: Array2<F>,
    q_pre: Array2<F>,
    k_pre: Array2<F>,
    q_rot: Array2<F>,
    k_rot: Array2<F>,
    q_hat: Array2<F>,
    k_hat: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    merged: Array2<F>,
    lora_mid: [Option<Array2<F>>; 4],
    ln2: LnCache<F>,
    ln2_out: Array2<F>,
    h_pre: Array2<F>,
    h_act: Array2<F>,
}

struct ChunkCaches<F> {
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    pooled: Array2<F>,
    head_pre: Array2<F>,
    head_act: Array2<F>,
    logits: Array2<F>,
}

impl<F: Real> Model<F> {
    fn lora_apply(
        &self,
        x: &ArrayView2<F>,
        w: ParamId,
        b: ParamId,
        lora: Option<&LoraHandles>,
    ) -> (Array2<F>, Option<Array2<F>>) {
        let w = self.store.get2(w);
        let b = self.store.get1(b);
        let mut y = linear(x, &w, Some(&b));
        let mut mid_out = None;
        if let Some(lh) = lora {
            let down = self.store.get2(lh.down);
            let up = self.store.get2(lh.up);
            let scale = F::of(self.adapter.lora_alpha / self.adapter.lora_rank as f64);
            let mid = x.dot(&down);
            y = y + mid.dot(&up).mapv(|v| v * scale);
            mid_out = Some(mid);
        }
        (y, mid_out)
    }

    /// Backward of [`lora_apply`]: accumulates weight/bias/LoRA grads and
    /// returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn lora_backward(
        &self,
        grads: &mut GradAccum<F>,
        g_y: &ArrayView2<F>,
        x: &ArrayView2<F>,
        mid: Option<&Array2<F>>,
        w: ParamId,
        b: ParamId,
        lora: Option<&LoraHandles>,
    ) -> Array2<F> {
        let w_view = self.store.get2(w);
        if self.layout.is_trainable(w) {
            let gw = linear_grad_weight(x, g_y);
            grads.acc2(&self.layout, w, &gw.view());
            grads.acc1(&self.layout, b, &bias_grad(g_y).view());
        }
        let mut g_x = linear_grad_input(g_y, &w_view);
        if let (Some(lh), Some(mid)) = (lora, mid) {
            let scale = F::of(self.adapter.lora_alpha / self.adapter.lora_rank as f64);
            let up = self.store.get2(lh.up);
            let down = self.store.get2(lh.down);
            let g_mid = g_y.dot(&up.t()).mapv(|v| v * scale);
            if self.layout.is_trainable(lh.up) {
                let g_up = mid.t().dot(g_y).mapv(|v| v * scale);
                grads.acc2(&self.layout, lh.up, &g_up.view());
                let g_down = x.t().dot(&g_mid);
                grads.acc2(&self.layout, lh.down, &g_down.view());
            }
            g_x = g_x + g_mid.dot(&down.t());
        }
        g_x
    }

    fn rot_forward(&self, ops: &StepOperators<F>, mat: &mut Array2<F>, pgroups_pos: &[(Vec<usize>, usize)]) {
        let nt = self.cfg.token_count();
        let heads = self.cfg.head_count;
        let dh = self.cfg.head_dim();
        match &ops.rot {
            RotTables::None => {}
            RotTables::Blocks { cos, sin } => {
                block_rotate(mat, nt, heads, dh, false, |t, k| Some((cos[[t, k]], sin[[t, k]])));
            }
            RotTables::Dense { per_pos } => {
                let samples = mat.nrows() / nt;
                dense_apply_grouped(
                    mat,
                    pgroups_pos,
                    |t| &per_pos[t].mat_t,
                    samples,
                    nt,
                    heads,
                    dh,
                );
            }
        }
    }

    fn rot_backward_input(&self, ops: &StepOperators<F>, g: &mut Array2<F>, pgroups_pos: &[(Vec<usize>, usize)]) {
        let nt = self.cfg.token_count();
        let heads = self.cfg.head_count;
        let dh = self.cfg.head_dim();
        match &ops.rot {
            RotTables::None => {}
            RotTables::Blocks { cos, sin } => {
                block_rotate(g, nt, heads, dh, true, |t, k| Some((cos[[t, k]], sin[[t, k]])));
            }
            RotTables::Dense { per_pos } => {
                let samples = g.nrows() / nt;
                dense_apply_grouped(g, pgroups_pos, |t| &per_pos[t].mat, samples, nt, heads, dh);
            }
        }
    }

    /// Panel modulation of q/k in place; `layer` selects the operator row.
    fn modulate_forward(
        &self,
        ops: &StepOperators<F>,
        layer: usize,
        q: &mut Array2<F>,
        k: &mut Array2<F>,
        map: &PanelMap,
        pgroups: &[(Vec<usize>, usize)],
    ) {
        let nt = self.cfg.token_count();
        let heads = self.cfg.head_count;
        let dh = self.cfg.head_dim();
        let samples = q.nrows() / nt;
        if let Some(grid) = &ops.opro {
            dense_apply_grouped(q, pgroups, |p| &grid.at(layer, p).mat_t, samples, nt, heads, dh);
            dense_apply_grouped(k, pgroups, |p| &grid.at(layer, p).mat_t, samples, nt, heads, dh);
        }
        if let (Some(gq), Some(gk)) = (&ops.asym_q, &ops.asym_k) {
            dense_apply_grouped(q, pgroups, |p| &gq.at(layer, p).mat_t, samples, nt, heads, dh);
            dense_apply_grouped(k, pgroups, |p| &gk.at(layer, p).mat_t, samples, nt, heads, dh);
        }
        if let Some(bd) = self.handles.layers[layer].opro_bd {
            let phases = self.store.get2(bd);
            let rotate = |m: &mut Array2<F>| {
                block_rotate(m, nt, heads, dh, false, |t, k| {
                    map.panel_of(t).map(|p| {
                        let a = phases[[p, k]].to64();
                        (F::of(a.cos()), F::of(a.sin()))
                    })
                });
            };
            rotate(q);
            rotate(k);
        }
        if let Some((bq, bk)) = self.handles.layers[layer].apb {
            let bias_q = self.store.get2(bq);
            let bias_k = self.store.get2(bk);
            panel_bias_add(q, &bias_q, map, nt, heads, dh, false);
            panel_bias_add(k, &bias_k, map, nt, heads, dh, false);
        }
    }

    fn forward_chunk(
        &self,
        ops: &StepOperators<F>,
        tokens0: Array2<F>,
        map: &PanelMap,
        pgroups: &[(Vec<usize>, usize)],
        count: usize,
    ) -> ChunkCaches<F> {
        let nt = self.cfg.token_count();
        let heads = self.cfg.head_count;
        let dh = self.cfg.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let posgroups = position_groups(nt);

        let mut x = tokens0;
        let mut layer_caches = Vec::with_capacity(self.cfg.layer_count);
        for (l, lh) in self.handles.layers.iter().enumerate() {
            let (ln1_out, ln1) = layer_norm(
                &x.view(),
                &self.store.get1(lh.ln1_g),
                &self.store.get1(lh.ln1_b),
            );
            let lora = lh.lora.as_ref();
            let (q_pre, mid_q) = self.lora_apply(&ln1_out.view(), lh.wq, lh.bq, lora.map(|a| &a[0]));
            let (k_pre, mid_k) = self.lora_apply(&ln1_out.view(), lh.wk, lh.bk, lora.map(|a| &a[1]));
            let (v, mid_v) = self.lora_apply(&ln1_out.view(), lh.wv, lh.bv, lora.map(|a| &a[2]));

            let mut q_rot = q_pre.clone();
            let mut k_rot = k_pre.clone();
            self.rot_forward(ops, &mut q_rot, &posgroups);
            self.rot_forward(ops, &mut k_rot, &posgroups);

            let mut q_hat = q_rot.clone();
            let mut k_hat = k_rot.clone();
            self.modulate_forward(ops, l, &mut q_hat, &mut k_hat, map, pgroups);

            let mut merged = Array2::zeros((count * nt, self.cfg.model_dim));
            let mut probs = Vec::with_capacity(count * heads);
            for c in 0..count {
                for h in 0..heads {
                    let rows = s![c * nt..(c + 1) * nt, h * dh..(h + 1) * dh];
                    let q_v = q_hat.slice(rows);
                    let k_v = k_hat.slice(rows);
                    let v_v = v.slice(rows);
                    let mut scores = q_v.dot(&k_v.t());
                    scores.mapv_inplace(|s| s * scale);
                    softmax_rows(&mut scores);
                    let out = scores.dot(&v_v);
                    merged.slice_mut(rows).assign(&out);
                    probs.push(scores);
                }
            }

            let (attn_out, mid_o) = self.lora_apply(&merged.view(), lh.wo, lh.bo, lora.map(|a| &a[3]));
            let x_mid = &x + &attn_out;

            let (ln2_out, ln2) = layer_norm(
                &x_mid.view(),
                &self.store.get1(lh.ln2_g),
                &self.store.get1(lh.ln2_b),
            );
            let h_pre = linear(
                &ln2_out.view(),
                &self.store.get2(lh.w1),
                Some(&self.store.get1(lh.b1)),
            );
            let h_act = gelu(&h_pre.view());
            let mlp_out = linear(
                &h_act.view(),
                &self.store.get2(lh.w2),
                Some(&self.store.get1(lh.b2)),
            );
            x = &x_mid + &mlp_out;

            layer_caches.push(LayerCache {
                ln1,
                ln1_out,
                q_pre,
                k_pre,
                q_rot,
                k_rot,
                q_hat,
                k_hat,
                v,
                probs,
                merged,
                lora_mid: [mid_q, mid_k, mid_v, mid_o],
                ln2,
                ln2_out,
                h_pre,
                h_act,
            });
        }

        let (lnf_out, lnf) = layer_norm(
            &x.view(),
            &self.store.get1(self.handles.lnf_g),
            &self.store.get1(self.handles.lnf_b),
        );
        let np = self.cfg.patch_count();
        let offset = usize::from(self.cfg.use_class_token);
        let mut pooled = Array2::zeros((count, self.cfg.model_dim));
        for c in 0..count {
            if self.cfg.use_class_token {
                pooled.row_mut(c).assign(&lnf_out.row(c * nt));
            } else {
                let block = lnf_out.slice(s![c * nt + offset..(c + 1) * nt, ..]);
                let mean = block.sum_axis(Axis(0)).mapv(|v| v / F::of(np as f64));
                pooled.row_mut(c).assign(&mean);
            }
        }
        let head_pre = linear(
            &pooled.view(),
            &self.store.get2(self.handles.head_w1),
            Some(&self.store.get1(self.handles.head_b1)),
        );
        let head_act = gelu(&head_pre.view());
        let logits = linear(
            &head_act.view(),
            &self.store.get2(self.handles.head_w2),
            Some(&self.store.get1(self.handles.head_b2)),
        );

        ChunkCaches {
            layers: layer_caches,
            lnf,
            pooled,
            head_pre,
            head_act,
            logits,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_chunk(
        &self,
        ops: &StepOperators<F>,
        caches: ChunkCaches<F>,
        patches: Array2<F>,
        labels: &[u8],
        batch_total: usize,
        map: &PanelMap,
        pgroups: &[(Vec<usize>, usize)],
        posgroups: &[(Vec<usize>, usize)],
        count: usize,
    ) -> (f64, usize, GradAccum<F>) {
        let nt = self.cfg.token_count();
        let heads = self.cfg.head_count;
        let dh = self.cfg.head_dim();
        let d = self.cfg.model_dim;
        let np = self.cfg.patch_count();
        let offset = usize::from(self.cfg.use_class_token);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut grads = GradAccum::zeros(&self.layout, &ops.slots.dims);

        let (loss_sum, g_logits, correct) =
            cross_entropy_chunk(&caches.logits.view(), labels, batch_total);

        // Head.
        let g_head_act = self.plain_linear_backward(
            &mut grads,
            &g_logits.view(),
            &caches.head_act.view(),
            self.handles.head_w2,
            self.handles.head_b2,
        );
        let g_head_pre = gelu_backward(&g_head_act.view(), &caches.head_pre.view());
        let g_pooled = self.plain_linear_backward(
            &mut grads,
            &g_head_pre.view(),
            &caches.pooled.view(),
            self.handles.head_w1,
            self.handles.head_b1,
        );

        // Pooling.
        let mut g_lnf_out = Array2::zeros((count * nt, d));
        for c in 0..count {
            if self.cfg.use_class_token {
                g_lnf_out.row_mut(c * nt).assign(&g_pooled.row(c));
            } else {
                let g = g_pooled.row(c).mapv(|v| v / F::of(np as f64));
                for t in offset..nt {
                    g_lnf_out.row_mut(c * nt + t).assign(&g);
                }
            }
        }

        let (mut g_x, g_g, g_b) = layer_norm_backward(
            &g_lnf_out.view(),
            &caches.lnf,
            &self.store.get1(self.handles.lnf_g),
        );
        grads.acc1(&self.layout, self.handles.lnf_g, &g_g.view());
        grads.acc1(&self.layout, self.handles.lnf_b, &g_b.view());

        for (l, lh) in self.handles.layers.iter().enumerate().rev() {
            let cache = &caches.layers[l];
            // MLP branch.
            let g_h_act = self.plain_linear_backward(
                &mut grads,
                &g_x.view(),
                &cache.h_act.view(),
                lh.w2,
                lh.b2,
            );
            let g_h_pre = gelu_backward(&g_h_act.view(), &cache.h_pre.view());
            let g_ln2_out = self.plain_linear_backward(
                &mut grads,
                &g_h_pre.view(),
                &cache.ln2_out.view(),
                lh.w1,
                lh.b1,
            );
            let (g_from_ln2, g_g, g_b) =
                layer_norm_backward(&g_ln2_out.view(), &cache.ln2, &self.store.get1(lh.ln2_g));
            grads.acc1(&self.layout, lh.ln2_g, &g_g.view());
            grads.acc1(&self.layout, lh.ln2_b, &g_b.view());
            let g_x_mid = &g_x + &g_from_ln2;

            // Attention output projection.
            let lora = lh.lora.as_ref();
            let g_merged = self.lora_backward(
                &mut grads,
                &g_x_mid.view(),
                &cache.merged.view(),
                cache.lora_mid[3].as_ref(),
                lh.wo,
                lh.bo,
                lora.map(|a| &a[3]),
            );

            // Attention core.
            let mut g_q_hat = Array2::zeros((count * nt, d));
            let mut g_k_hat = Array2::zeros((count * nt, d));
            let mut g_v = Array2::zeros((count * nt, d));
            for c in 0..count {
                for h in 0..heads {
                    let rows = s![c * nt..(c + 1) * nt, h * dh..(h + 1) * dh];
                    let p = &cache.probs[c * heads + h];
                    let g_o = g_merged.slice(rows);
                    let v_v = cache.v.slice(rows);
                    let g_p = g_o.dot(&v_v.t());
                    let mut g_v_v = g_v.slice_mut(rows);
                    g_v_v += &p.t().dot(&g_o);
                    let mut g_s = softmax_backward_rows(&g_p.view(), &p.view());
                    g_s.mapv_inplace(|v| v * scale);
                    let q_v = cache.q_hat.slice(rows);
                    let k_v = cache.k_hat.slice(rows);
                    g_q_hat.slice_mut(rows).assign(&g_s.dot(&k_v));
                    g_k_hat.slice_mut(rows).assign(&g_s.t().dot(&q_v));
                }
            }

            // Modulation backward: operator upstreams, then input grads.
            let samples = count;
            if let (Some(_), Some(_)) = (&ops.opro, ops.slots.opro_base) {
                dense_upstream_grouped(
                    &g_q_hat.view(),
                    &cache.q_rot.view(),
                    pgroups,
                    |p| ops.slots.opro_slot(l, p),
                    &mut grads.op_slots,
                    samples,
                    nt,
                    heads,
                    dh,
                );
                dense_upstream_grouped(
                    &g_k_hat.view(),
                    &cache.k_rot.view(),
                    pgroups,
                    |p| ops.slots.opro_slot(l, p),
                    &mut grads.op_slots,
                    samples,
                    nt,
                    heads,
                    dh,
                );
            }
            if ops.slots.asym_q_base.is_some() {
                dense_upstream_grouped(
                    &g_q_hat.view(),
                    &cache.q_rot.view(),
                    pgroups,
                    |p| ops.slots.asym_q_slot(l, p),
                    &mut grads.op_slots,
                    samples,
                    nt,
                    heads,
                    dh,
                );
                dense_upstream_grouped(
                    &g_k_hat.view(),
                    &cache.k_rot.view(),
                    pgroups,
                    |p| ops.slots.asym_k_slot(l, p),
                    &mut grads.op_slots,
                    samples,
                    nt,
                    heads,
                    dh,
                );
            }
            if let Some(bd) = lh.opro_bd {
                if self.layout.is_trainable(bd) {
                    // Per-(panel, block) phase grads from the rotation
                    // outputs, folded by each token's panel.
                    let fold = |g_out: &Array2<F>, out: &Array2<F>, grads: &mut GradAccum<F>| {
                        let per_token = block_rotation_angle_grads(&g_out.view(), &out.view(), nt, heads, dh);
                        let mut per_panel = Array2::<f64>::zeros((self.adapter.panel_count, dh / 2));
                        for t in 0..nt {
                            if let Some(p) = map.panel_of(t) {
                                for k in 0..dh / 2 {
                                    per_panel[[p, k]] += per_token[[t, k]];
                                }
                            }
                        }
                        grads.acc2_f64(&self.layout, bd, &per_panel);
                    };
                    fold(&g_q_hat, &cache.q_hat, &mut grads);
                    fold(&g_k_hat, &cache.k_hat, &mut grads);
                }
            }
            if let Some((bq, bk)) = lh.apb {
                if self.layout.is_trainable(bq) {
                    let gq = panel_bias_grads(&g_q_hat.view(), map, self.adapter.panel_count, nt, heads, dh);
                    let gk = panel_bias_grads(&g_k_hat.view(), map, self.adapter.panel_count, nt, heads, dh);
                    grads.acc2_f64(&self.layout, bq, &gq);
                    grads.acc2_f64(&self.layout, bk, &gk);
                }
            }
            // Input gradients through the modulation (reverse order of
            // forward composition; biases add nothing, rotations invert).
            let mut g_q_rot = g_q_hat;
            let mut g_k_rot = g_k_hat;
            if let Some(bd) = lh.opro_bd {
                let phases = self.store.get2(bd);
                let unrotate = |m: &mut Array2<F>| {
                    block_rotate(m, nt, heads, dh, true, |t, k| {
                        map.panel_of(t).map(|p| {
                            let a = phases[[p, k]].to64();
                            (F::of(a.cos()), F::of(a.sin()))
                        })
                    });
                };
                unrotate(&mut g_q_rot);
                unrotate(&mut g_k_rot);
            }
            if let (Some(gq), Some(gk)) = (&ops.asym_q, &ops.asym_k) {
                dense_apply_grouped(&mut g_q_rot, pgroups, |p| &gq.at(l, p).mat, samples, nt, heads, dh);
                dense_apply_grouped(&mut g_k_rot, pgroups, |p| &gk.at(l, p).mat, samples, nt, heads, dh);
            }
            if let Some(grid) = &ops.opro {
                dense_apply_grouped(&mut g_q_rot, pgroups, |p| &grid.at(l, p).mat, samples, nt, heads, dh);
                dense_apply_grouped(&mut g_k_rot, pgroups, |p| &grid.at(l, p).mat, samples, nt, heads, dh);
            }

            // Rotation backward: encoder parameter grads, then input grads.
            match &ops.rot {
                RotTables::None => {}
                RotTables::Blocks { .. } => {
                    if let Some((rx, ry)) = self.handles.comrope {
                        if self.layout.is_trainable(rx) {
                            let angle_q = block_rotation_angle_grads(
                                &g_q_rot.view(),
                                &cache.q_rot.view(),
                                nt,
                                heads,
                                dh,
                            );
                            let angle_k = block_rotation_angle_grads(
                                &g_k_rot.view(),
                                &cache.k_rot.view(),
                                nt,
                                heads,
                                dh,
                            );
                            let blocks = dh / 2;
                            let mut g_rx = Array1::<F>::zeros(blocks);
                            let mut g_ry = Array1::<F>::zeros(blocks);
                            for t in 0..nt {
                                let (x, y) = self.coords[t];
                                for k in 0..blocks {
                                    let g = angle_q[[t, k]] + angle_k[[t, k]];
                                    g_rx[k] += F::of(g * x);
                                    g_ry[k] += F::of(g * y);
                                }
                            }
                            grads.acc1(&self.layout, rx, &g_rx.view());
                            grads.acc1(&self.layout, ry, &g_ry.view());
                        }
                    }
                }
                RotTables::Dense { .. } => {
                    if ops.slots.liere_base.is_some() {
                        dense_upstream_grouped(
                            &g_q_rot.view(),
                            &cache.q_pre.view(),
                            posgroups,
                            |t| ops.slots.liere_slot(t),
                            &mut grads.op_slots,
                            samples,
                            nt,
                            heads,
                            dh,
                        );
                        dense_upstream_grouped(
                            &g_k_rot.view(),
                            &cache.k_pre.view(),
                            posgroups,
                            |t| ops.slots.liere_slot(t),
                            &mut grads.op_slots,
                            samples,
                            nt,
                            heads,
                            dh,
                        );
                    }
                }
            }
            let mut g_q_pre = g_q_rot;
            let mut g_k_pre = g_k_rot;
            self.rot_backward_input(ops, &mut g_q_pre, posgroups);
            self.rot_backward_input(ops, &mut g_k_pre, posgroups);

            // Projections.
            let g_ln1_a = self.lora_backward(
                &mut grads,
                &g_q_pre.view(),
                &cache.ln1_out.view(),
                cache.lora_mid[0].as_ref(),
                lh.wq,
                lh.bq,
                lora.map(|a| &a[0]),
            );
            let g_ln1_b = self.lora_backward(
                &mut grads,
                &g_k_pre.view(),
                &cache.ln1_out.view(),
                cache.lora_mid[1].as_ref(),
                lh.wk,
                lh.bk,
                lora.map(|a| &a[1]),
            );
            let g_ln1_c = self.lora_backward(
                &mut grads,
                &g_v.view(),
                &cache.ln1_out.view(),
                cache.lora_mid[2].as_ref(),
                lh.wv,
                lh.bv,
                lora.map(|a| &a[2]),
            );
            let g_ln1_out = g_ln1_a + g_ln1_b + g_ln1_c;
            let (g_from_ln1, g_g, g_b) =
                layer_norm_backward(&g_ln1_out.view(), &cache.ln1, &self.store.get1(lh.ln1_g));
            grads.acc1(&self.layout, lh.ln1_g, &g_g.view());
            grads.acc1(&self.layout, lh.ln1_b, &g_b.view());

            g_x = &g_x_mid + &g_from_ln1;
        }

        // Embedding backward.
        let g_tokens0 = g_x;
        if let Some(ape) = self.handles.ape {
            if self.layout.is_trainable(ape) {
                let mut g_table = Array2::<F>::zeros((nt, d));
                for c in 0..count {
                    let block = g_tokens0.slice(s![c * nt..(c + 1) * nt, ..]);
                    g_table += &block;
                }
                grads.acc2(&self.layout, ape, &g_table.view());
            }
        }
        if let Some(ct) = self.handles.class_token {
            if self.layout.is_trainable(ct) {
                let mut g_class = Array1::<F>::zeros(d);
                for c in 0..count {
                    g_class += &g_tokens0.row(c * nt);
                }
                grads.acc1(&self.layout, ct, &g_class.view());
            }
        }
        if self.layout.is_trainable(self.handles.patch_w) {
            let mut g_patch_rows = Array2::<F>::zeros((count * np, d));
            for c in 0..count {
                g_patch_rows
                    .slice_mut(s![c * np..(c + 1) * np, ..])
                    .assign(&g_tokens0.slice(s![c * nt + offset..(c + 1) * nt, ..]));
            }
            let gw = linear_grad_weight(&patches.view(), &g_patch_rows.view());
            grads.acc2(&self.layout, self.handles.patch_w, &gw.view());
            grads.acc1(
                &self.layout,
                self.handles.patch_b,
                &bias_grad(&g_patch_rows.view()).view(),
            );
        }
        (loss_sum, correct, grads)
    }

    /// Linear backward for layers without LoRA.
    fn plain_linear_backward(
        &self,
        grads: &mut GradAccum<F>,
        g_y: &ArrayView2<F>,
        x: &ArrayView2<F>,
        w: ParamId,
        b: ParamId,
    ) -> Array2<F> {
        if self.layout.is_trainable(w) {
            let gw = linear_grad_weight(x, g_y);
            grads.acc2(&self.layout, w, &gw.view());
            grads.acc1(&self.layout, b, &bias_grad(g_y).view());
        }
        linear_grad_input(g_y, &self.store.get2(w))
    }
}

/// Converts a u8 image stack to the model's normalized token scale; test
/// and tooling helper.
pub fn images_from_f64(batch: &Array3<f64>) -> Array3<u8> {
    batch.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}
