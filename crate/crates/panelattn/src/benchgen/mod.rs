//! Deterministic two-stage compositional-reasoning benchmark.
//!
//! Stage 1 renders single panels holding two arrows (plus letter
//! distractors); the label is the sum of the two arrow orientations modulo
//! 360°, quantized into 8 classes. Stage 2 renders n×n grids where every
//! row follows one hidden transformation rule — a rotation by `k·45°` per
//! step or a vertical mirror — with demonstration rows shown in full and a
//! blank query cell in the last row; the label is the angle class of the
//! panel that correctly completes the query.
//!
//! Generation is pure in `(seed, index)`, so datasets are reproducible
//! byte-for-byte and sample generation parallelizes trivially.

mod dataset;
mod glyphs;
mod render;
mod spec;

pub use dataset::{
    gen_stage1, gen_stage2, load_dataset, load_manifest, DatasetManifest, LoadedDataset,
    ManifestHeader, SampleRecord,
};
pub use glyphs::{glyph_count, glyph_strokes};
pub use render::{render_episode, render_panel, render_stage1};
pub use spec::{
    apply_rule, gen_stage1_specs, gen_stage2_episodes, make_episode, make_stage1_panel,
    stage1_label, ArrowSpec, GlyphSpec, PanelSpec, RowRule, Stage2Episode, CLASS_COUNT,
};
