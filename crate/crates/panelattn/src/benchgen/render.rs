//! Deterministic anti-aliased rasterizer for panels and grid canvases.
//!
//! Strokes are rendered from exact point-to-segment distances: a pixel's
//! darkness is the clamped overlap between the stroke's half-width and the
//! distance from the pixel center to the segment. Dark ink on a light
//! background, 8-bit grayscale.

use ndarray::Array2;

use super::glyphs;
use super::spec::{PanelSpec, Stage2Episode, NOMINAL_ARROW_LEN};
use crate::{Error, Result};

const BACKGROUND: u8 = 255;
/// Arrow stroke half-width as a fraction of the panel side.
const ARROW_STROKE: f64 = 0.022;
/// Letter stroke half-width as a fraction of the panel side.
const GLYPH_STROKE: f64 = 0.016;
/// Arrowhead stroke length as a fraction of the arrow length.
const HEAD_FRACTION: f64 = 0.4;
/// Arrowhead half-angle in degrees.
const HEAD_ANGLE_DEG: f64 = 30.0;

/// Draws an anti-aliased segment (pixel coordinates, y down) into `canvas`.
fn draw_segment(canvas: &mut Array2<u8>, p0: (f64, f64), p1: (f64, f64), half_width: f64) {
    let (h, w) = canvas.dim();
    let min_x = (p0.0.min(p1.0) - half_width - 1.0).floor().max(0.0) as usize;
    let max_x = (p0.0.max(p1.0) + half_width + 1.0).ceil().min(w as f64 - 1.0) as usize;
    let min_y = (p0.1.min(p1.1) - half_width - 1.0).floor().max(0.0) as usize;
    let max_y = (p0.1.max(p1.1) + half_width + 1.0).ceil().min(h as f64 - 1.0) as usize;
    let dx = p1.0 - p0.0;
    let dy = p1.1 - p0.1;
    let len_sq = dx * dx + dy * dy;
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            let t = if len_sq > 0.0 {
                (((cx - p0.0) * dx + (cy - p0.1) * dy) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let qx = p0.0 + t * dx;
            let qy = p0.1 + t * dy;
            let d = ((cx - qx).powi(2) + (cy - qy).powi(2)).sqrt();
            let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let ink = (BACKGROUND as f64 * (1.0 - coverage)).round() as u8;
                let cell = &mut canvas[[py, px]];
                *cell = (*cell).min(ink);
            }
        }
    }
}

/// Renders a panel's content into `canvas` with the panel's top-left corner
/// at `origin` (pixels) and side length `side` (pixels). Unit coordinates
/// are y-up; pixel rows grow downward.
fn render_into(canvas: &mut Array2<u8>, origin: (f64, f64), side: f64, spec: &PanelSpec) {
    let to_px = |p: (f64, f64)| -> (f64, f64) { (origin.0 + p.0 * side, origin.1 + (1.0 - p.1) * side) };

    for arrow in &spec.arrows {
        let len = arrow.scale * NOMINAL_ARROW_LEN;
        let theta = (arrow.orientation as f64).to_radians();
        let (s, c) = theta.sin_cos();
        let dir = (c, s);
        let half = len / 2.0;
        let tail = (arrow.center.0 - half * dir.0, arrow.center.1 - half * dir.1);
        let tip = (arrow.center.0 + half * dir.0, arrow.center.1 + half * dir.1);
        let hw = ARROW_STROKE * side;
        draw_segment(canvas, to_px(tail), to_px(tip), hw);
        let head_len = HEAD_FRACTION * len;
        for sign in [-1.0, 1.0] {
            let phi = theta + sign * HEAD_ANGLE_DEG.to_radians();
            let (hs, hc) = phi.sin_cos();
            let end = (tip.0 - head_len * hc, tip.1 - head_len * hs);
            draw_segment(canvas, to_px(tip), to_px(end), hw);
        }
    }

    for glyph in &spec.distractors {
        let hw = GLYPH_STROKE * side * (glyph.scale / 0.07).clamp(0.6, 1.4);
        for stroke in glyphs::glyph_strokes(glyph.glyph) {
            for pair in stroke.windows(2) {
                let a = (
                    glyph.center.0 + pair[0].0 * glyph.scale,
                    glyph.center.1 + pair[0].1 * glyph.scale,
                );
                let b = (
                    glyph.center.0 + pair[1].0 * glyph.scale,
                    glyph.center.1 + pair[1].1 * glyph.scale,
                );
                draw_segment(canvas, to_px(a), to_px(b), hw);
            }
        }
    }
}

/// Renders one panel as a standalone `size × size` raster.
pub fn render_panel(spec: &PanelSpec, size: usize) -> Result<Array2<u8>> {
    if size == 0 {
        return Err(Error::param("render size must be positive"));
    }
    spec.validate()?;
    let mut canvas = Array2::from_elem((size, size), BACKGROUND);
    render_into(&mut canvas, (0.0, 0.0), size as f64, spec);
    Ok(canvas)
}

/// Renders a stage-1 sample: the panel occupies the full canvas.
pub fn render_stage1(spec: &PanelSpec, size: usize) -> Result<Array2<u8>> {
    render_panel(spec, size)
}

/// Renders a stage-2 episode: the canvas is split into `grid × grid` equal
/// cells (fractional cell sides are fine); the query cell stays blank.
pub fn render_episode(episode: &Stage2Episode, size: usize) -> Result<Array2<u8>> {
    if size == 0 {
        return Err(Error::param("render size must be positive"));
    }
    let n = episode.grid;
    let mut canvas = Array2::from_elem((size, size), BACKGROUND);
    let cell = size as f64 / n as f64;
    for (r, row) in episode.panels.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            if let Some(spec) = panel {
                spec.validate()?;
                render_into(&mut canvas, (c as f64 * cell, r as f64 * cell), cell, spec);
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::spec::{apply_rule, gen_stage1_specs, gen_stage2_episodes, RowRule};

    #[test]
    fn empty_spec_renders_blank() {
        // A panel with no content is not constructible (two arrows are
        // mandatory), so blankness is checked through the query cell of an
        // episode render.
        let ep = gen_stage2_episodes(1, 3, 2).unwrap().remove(0);
        let img = render_episode(&ep, 64).unwrap();
        let cell = 32usize;
        let (qr, qc) = ep.query_cell;
        let mut blank = true;
        for y in 0..cell {
            for x in 0..cell {
                // Stay one pixel inside the cell to avoid AA bleed from
                // neighbors.
                let py = qr * cell + y;
                let px = qc * cell + x;
                if y > 0 && x > 0 && img[[py, px]] != BACKGROUND {
                    blank = false;
                }
            }
        }
        assert!(blank, "query cell must stay background");
    }

    #[test]
    fn rendering_is_deterministic() {
        let (spec, _) = gen_stage1_specs(1, 5).remove(0);
        let a = render_stage1(&spec, 96).unwrap();
        let b = render_stage1(&spec, 96).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_contains_ink() {
        let (spec, _) = gen_stage1_specs(1, 8).remove(0);
        let img = render_stage1(&spec, 112).unwrap();
        let dark = img.iter().filter(|v| **v < 128).count();
        assert!(dark > 50, "expected visible strokes, got {dark} dark pixels");
    }

    #[test]
    fn quarter_turn_equivariance() {
        // Rotating the spec by 90° then rendering matches rendering then
        // rotating the raster, up to anti-aliasing noise.
        let size = 96usize;
        for idx in 0..5 {
            let (mut spec, _) = gen_stage1_specs(idx + 1, 21).remove(idx);
            spec.distractors.clear();
            let rotated = apply_rule(&spec, RowRule::Rotation(2), 1);
            let direct = render_stage1(&rotated, size).unwrap();
            let base = render_stage1(&spec, size).unwrap();
            // 90 deg CCW in y-up content: pixel (r, c) of the rotated image
            // takes from base pixel (c, size-1-r).
            let mut turned = Array2::from_elem((size, size), BACKGROUND);
            for r in 0..size {
                for c in 0..size {
                    turned[[r, c]] = base[[c, size - 1 - r]];
                }
            }
            let mean_diff: f64 = direct
                .iter()
                .zip(turned.iter())
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / (size * size) as f64;
            assert!(
                mean_diff <= 2.0,
                "mean abs pixel diff {mean_diff} exceeds AA tolerance"
            );
        }
    }

    #[test]
    fn zero_size_rejected() {
        let (spec, _) = gen_stage1_specs(1, 2).remove(0);
        assert!(render_stage1(&spec, 0).is_err());
    }
}
