//! Panel content specifications, transformation rules, labels, and episode
//! construction.
//!
//! Geometry lives in unit panel coordinates `[0,1]²` with y pointing up;
//! the rasterizer maps to pixels. Arrows are constrained to a disc around
//! the panel center whose radius survives every rule in the group (rotation
//! about the center and reflection about the vertical midline), so a valid
//! base panel stays valid across a whole row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::glyphs;
use crate::{Error, Result};

/// Number of orientation/label classes.
pub const CLASS_COUNT: usize = 8;

/// Arrow length at `scale = 1`, as a fraction of the panel side.
pub(crate) const NOMINAL_ARROW_LEN: f64 = 0.35;
/// Padding added to an arrow's circumradius (stroke width + AA margin).
const ARROW_PAD: f64 = 0.03;
/// Clearance kept from the inscribed-disc boundary.
const EDGE_MARGIN: f64 = 0.01;
/// Minimum gap between the two arrows' discs.
const ARROW_GAP: f64 = 0.02;
/// Arrow scale range (fraction of the nominal length).
const SCALE_RANGE: (f64, f64) = (0.6, 1.0);
/// Distractor letter count range (inclusive).
const LETTER_COUNT: (usize, usize) = (3, 6);
/// Distractor half-extent range, in panel units.
const LETTER_SCALE: (f64, f64) = (0.05, 0.09);
/// Placement attempts before restarting a panel from a fresh draw.
const MAX_ATTEMPTS: usize = 100;

/// One arrow: center in unit panel coordinates (y up), orientation in
/// degrees (multiple of 45), and a length multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrowSpec {
    pub center: (f64, f64),
    pub orientation: u16,
    pub scale: f64,
}

impl ArrowSpec {
    /// Circumradius of the drawn arrow including stroke padding.
    pub fn radius(&self) -> f64 {
        self.scale * NOMINAL_ARROW_LEN / 2.0 + ARROW_PAD
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientation % 45 != 0 || self.orientation >= 360 {
            return Err(Error::param(format!(
                "orientation {} is not a multiple of 45 in [0, 360)",
                self.orientation
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::param(format!("scale must be positive, got {}", self.scale)));
        }
        let r = self.radius();
        let (x, y) = self.center;
        if x - r < 0.0 || x + r > 1.0 || y - r < 0.0 || y + r > 1.0 {
            return Err(Error::param(format!(
                "arrow at ({x:.3},{y:.3}) with radius {r:.3} leaves the panel"
            )));
        }
        Ok(())
    }
}

/// One distractor letter placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub glyph: usize,
    pub center: (f64, f64),
    pub scale: f64,
}

/// Content of one panel: exactly two arrows plus distractor letters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub arrows: [ArrowSpec; 2],
    pub distractors: Vec<GlyphSpec>,
}

impl PanelSpec {
    pub fn validate(&self) -> Result<()> {
        for a in &self.arrows {
            a.validate()?;
        }
        let d = dist(self.arrows[0].center, self.arrows[1].center);
        if d < self.arrows[0].radius() + self.arrows[1].radius() {
            return Err(Error::invariant(format!(
                "arrow discs overlap: centers {d:.3} apart"
            )));
        }
        Ok(())
    }

    /// Angle class of the two arrow orientations.
    pub fn label(&self) -> u8 {
        stage1_label(self.arrows[0].orientation, self.arrows[1].orientation)
            .expect("panel orientations are validated multiples of 45")
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// `((a1 + a2) mod 360) / 45` for orientations that are multiples of 45.
pub fn stage1_label(a1: u16, a2: u16) -> Result<u8> {
    for a in [a1, a2] {
        if a % 45 != 0 || a >= 360 {
            return Err(Error::param(format!(
                "orientation {a} is not a multiple of 45 in [0, 360)"
            )));
        }
    }
    Ok((((a1 as u32 + a2 as u32) % 360) / 45) as u8)
}

/// Hidden row rule of a grid episode.
///
/// `Rotation(k)` advances panel content by `k·45°` per step (orientations
/// advance, positions rotate about the panel center). The mirror rules
/// reflect content about the panel's vertical midline; `MirrorA` reflects
/// each panel relative to the previous one, `MirrorB` reflects the row's
/// first panel on odd steps. Since reflection is an involution the two
/// mirror rules generate the same alternating panel sequence; they are kept
/// as distinct rule identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowRule {
    Rotation(u8),
    MirrorA,
    MirrorB,
}

impl RowRule {
    /// Admissible rules for a grid size: rotations only for `n = 2`
    /// (8 rules), the full set of 10 otherwise.
    pub fn admissible(grid: usize) -> Vec<RowRule> {
        let mut rules: Vec<RowRule> = (0..8).map(RowRule::Rotation).collect();
        if grid >= 3 {
            rules.push(RowRule::MirrorA);
            rules.push(RowRule::MirrorB);
        }
        rules
    }

    pub fn name(&self) -> String {
        match self {
            RowRule::Rotation(k) => format!("rot{k}"),
            RowRule::MirrorA => "mirror_a".to_string(),
            RowRule::MirrorB => "mirror_b".to_string(),
        }
    }

    pub fn from_name(name: &str) -> Result<RowRule> {
        match name {
            "mirror_a" => Ok(RowRule::MirrorA),
            "mirror_b" => Ok(RowRule::MirrorB),
            _ => {
                if let Some(k) = name.strip_prefix("rot") {
                    let k: u8 = k
                        .parse()
                        .map_err(|_| Error::format(format!("bad rule name {name}")))?;
                    if k < 8 {
                        return Ok(RowRule::Rotation(k));
                    }
                }
                Err(Error::format(format!("bad rule name {name}")))
            }
        }
    }
}

fn rotate_point(p: (f64, f64), eighths: u8) -> (f64, f64) {
    let phi = eighths as f64 * std::f64::consts::FRAC_PI_4;
    let (s, c) = phi.sin_cos();
    let dx = p.0 - 0.5;
    let dy = p.1 - 0.5;
    (0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy)
}

fn rotate_panel(panel: &PanelSpec, eighths: u8) -> PanelSpec {
    let arrows = panel.arrows.map(|a| ArrowSpec {
        center: rotate_point(a.center, eighths),
        orientation: (a.orientation + 45 * eighths as u16) % 360,
        scale: a.scale,
    });
    PanelSpec {
        arrows,
        distractors: panel.distractors.clone(),
    }
}

fn mirror_panel(panel: &PanelSpec) -> PanelSpec {
    let arrows = panel.arrows.map(|a| ArrowSpec {
        center: (1.0 - a.center.0, a.center.1),
        orientation: ((540 - a.orientation) % 360),
        scale: a.scale,
    });
    PanelSpec {
        arrows,
        distractors: panel.distractors.clone(),
    }
}

/// Produces the panel at `step_index` of a row from its reference panel:
/// the previous panel for `Rotation` and `MirrorA`, the row's first panel
/// for `MirrorB`. Distractors pass through; the generator re-draws them per
/// panel.
pub fn apply_rule(panel: &PanelSpec, rule: RowRule, step_index: usize) -> PanelSpec {
    match rule {
        RowRule::Rotation(k) => rotate_panel(panel, k % 8),
        RowRule::MirrorA => mirror_panel(panel),
        RowRule::MirrorB => {
            if step_index % 2 == 0 {
                panel.clone()
            } else {
                mirror_panel(panel)
            }
        }
    }
}

/// One grid-reasoning episode. Demonstration rows are complete; the query
/// cell (last row, last column) is blank, and `answer` is the panel that
/// correctly completes it. The label is the angle class of `answer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Episode {
    pub grid: usize,
    pub rule: RowRule,
    pub panels: Vec<Vec<Option<PanelSpec>>>,
    pub query_cell: (usize, usize),
    pub label: u8,
    pub answer: PanelSpec,
}

fn sample_orientation(rng: &mut ChaCha12Rng) -> u16 {
    45 * rng.gen_range(0..8u16)
}

fn sample_scale(rng: &mut ChaCha12Rng) -> f64 {
    rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1)
}

/// Uniform point with `dist(p, center) ≤ r_max`.
fn sample_center(rng: &mut ChaCha12Rng, r_max: f64) -> (f64, f64) {
    loop {
        let x = 0.5 + (rng.gen::<f64>() * 2.0 - 1.0) * r_max;
        let y = 0.5 + (rng.gen::<f64>() * 2.0 - 1.0) * r_max;
        if dist((x, y), (0.5, 0.5)) <= r_max {
            return (x, y);
        }
    }
}

fn try_sample_arrows(rng: &mut ChaCha12Rng) -> Option<[ArrowSpec; 2]> {
    let scale_a = sample_scale(rng);
    let scale_b = sample_scale(rng);
    let r_a = scale_a * NOMINAL_ARROW_LEN / 2.0 + ARROW_PAD;
    let r_b = scale_b * NOMINAL_ARROW_LEN / 2.0 + ARROW_PAD;
    let first = ArrowSpec {
        center: sample_center(rng, 0.5 - r_a - EDGE_MARGIN),
        orientation: sample_orientation(rng),
        scale: scale_a,
    };
    for _ in 0..MAX_ATTEMPTS {
        let second = ArrowSpec {
            center: sample_center(rng, 0.5 - r_b - EDGE_MARGIN),
            orientation: sample_orientation(rng),
            scale: scale_b,
        };
        if dist(first.center, second.center) >= r_a + r_b + ARROW_GAP {
            return Some([first, second]);
        }
    }
    None
}

fn sample_distractors(rng: &mut ChaCha12Rng, arrows: &[ArrowSpec; 2]) -> Vec<GlyphSpec> {
    let count = rng.gen_range(LETTER_COUNT.0..=LETTER_COUNT.1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let scale = rng.gen_range(LETTER_SCALE.0..LETTER_SCALE.1);
        let r_g = scale * 1.45;
        // Letters keep a wider edge margin than arrows so their stroke
        // anti-aliasing never crosses a panel boundary.
        let edge = r_g + 0.04;
        for attempt in 0..=MAX_ATTEMPTS {
            let x = rng.gen_range(edge..1.0 - edge);
            let y = rng.gen_range(edge..1.0 - edge);
            let clear = arrows
                .iter()
                .all(|a| dist((x, y), a.center) >= a.radius() + r_g + 0.01);
            if clear {
                out.push(GlyphSpec {
                    glyph: rng.gen_range(0..glyphs::glyph_count()),
                    center: (x, y),
                    scale,
                });
                break;
            }
            // A letter that cannot be placed is dropped; arrows keep
            // priority and the count is advisory for distractors.
            if attempt == MAX_ATTEMPTS {
                break;
            }
        }
    }
    out
}

/// Samples a valid panel: two non-overlapping arrows inside the rotation-
/// and mirror-safe disc, plus letter distractors.
pub fn make_stage1_panel(rng: &mut ChaCha12Rng) -> PanelSpec {
    loop {
        if let Some(arrows) = try_sample_arrows(rng) {
            let distractors = sample_distractors(rng, &arrows);
            let panel = PanelSpec { arrows, distractors };
            debug_assert!(panel.validate().is_ok());
            return panel;
        }
        // Placement failed after the attempt budget; restart the panel from
        // the stream's next draws (the sample is retried, never dropped).
    }
}

fn with_fresh_distractors(rng: &mut ChaCha12Rng, panel: &PanelSpec) -> PanelSpec {
    PanelSpec {
        arrows: panel.arrows,
        distractors: sample_distractors(rng, &panel.arrows),
    }
}

/// Builds one grid episode with a single hidden rule shared by all rows.
pub fn make_episode(rng: &mut ChaCha12Rng, grid: usize) -> Result<Stage2Episode> {
    if !(2..=4).contains(&grid) {
        return Err(Error::param(format!("grid size must be 2, 3, or 4, got {grid}")));
    }
    let admissible = RowRule::admissible(grid);
    let rule = admissible[rng.gen_range(0..admissible.len())];

    let mut panels: Vec<Vec<Option<PanelSpec>>> = Vec::with_capacity(grid);
    let mut answer: Option<PanelSpec> = None;
    for row in 0..grid {
        let first = make_stage1_panel(rng);
        let mut row_panels: Vec<PanelSpec> = vec![first.clone()];
        for col in 1..grid {
            let reference = match rule {
                RowRule::MirrorB => &first,
                _ => &row_panels[col - 1],
            };
            let next = apply_rule(reference, rule, col);
            row_panels.push(with_fresh_distractors(rng, &next));
        }
        if row == grid - 1 {
            let completion = row_panels.pop().expect("row has panels");
            answer = Some(completion);
            let mut cells: Vec<Option<PanelSpec>> = row_panels.into_iter().map(Some).collect();
            cells.push(None);
            panels.push(cells);
        } else {
            panels.push(row_panels.into_iter().map(Some).collect());
        }
    }
    let answer = answer.expect("grid has at least two rows");
    let label = answer.label();
    Ok(Stage2Episode {
        grid,
        rule,
        panels,
        query_cell: (grid - 1, grid - 1),
        label,
        answer,
    })
}

/// Per-sample RNG stream: all draws for sample `index` come from stream
/// `index` of the seed, independent of every other sample.
pub(crate) fn sample_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stage-1 panel specs with labels, pure in `(seed, index)`.
pub fn gen_stage1_specs(count: usize, seed: u64) -> Vec<(PanelSpec, u8)> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let panel = make_stage1_panel(&mut rng);
            let label = panel.label();
            (panel, label)
        })
        .collect()
}

/// Stage-2 episodes, pure in `(seed, index)`.
pub fn gen_stage2_episodes(count: usize, seed: u64, grid: usize) -> Result<Vec<Stage2Episode>> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            make_episode(&mut rng, grid)
        })
        .collect()
}
