//! Fixed letterform distractors as hard-coded polylines, so rendering needs
//! no font machinery and is bit-exact across platforms.
//!
//! Each glyph lives in a `[-1, 1]²` box (y up) and is drawn as a list of
//! polylines.

pub type Stroke = &'static [(f64, f64)];

const A: &[Stroke] = &[
    &[(-0.8, -1.0), (0.0, 1.0), (0.8, -1.0)],
    &[(-0.45, -0.2), (0.45, -0.2)],
];
const E: &[Stroke] = &[
    &[(0.7, 1.0), (-0.7, 1.0), (-0.7, -1.0), (0.7, -1.0)],
    &[(-0.7, 0.0), (0.4, 0.0)],
];
const F: &[Stroke] = &[
    &[(0.7, 1.0), (-0.7, 1.0), (-0.7, -1.0)],
    &[(-0.7, 0.0), (0.4, 0.0)],
];
const H: &[Stroke] = &[
    &[(-0.7, 1.0), (-0.7, -1.0)],
    &[(0.7, 1.0), (0.7, -1.0)],
    &[(-0.7, 0.0), (0.7, 0.0)],
];
const K: &[Stroke] = &[
    &[(-0.7, 1.0), (-0.7, -1.0)],
    &[(0.7, 1.0), (-0.7, 0.0)],
    &[(-0.7, 0.0), (0.7, -1.0)],
];
const L: &[Stroke] = &[&[(-0.7, 1.0), (-0.7, -1.0), (0.7, -1.0)]];
const T: &[Stroke] = &[&[(-0.8, 1.0), (0.8, 1.0)], &[(0.0, 1.0), (0.0, -1.0)]];
const Z: &[Stroke] = &[&[(-0.7, 1.0), (0.7, 1.0), (-0.7, -1.0), (0.7, -1.0)]];

const GLYPHS: [&[Stroke]; 8] = [A, E, F, H, K, L, T, Z];

/// Number of distinct distractor glyphs.
pub fn glyph_count() -> usize {
    GLYPHS.len()
}

/// Polylines of glyph `id` in the `[-1, 1]²` box.
pub fn glyph_strokes(id: usize) -> &'static [Stroke] {
    GLYPHS[id % GLYPHS.len()]
}
