//! Generated labels against the independent brute-force oracle.

mod common;

use common::oracle::{recover_label, stage1_oracle};
use panelattn::benchgen::{gen_stage1_specs, gen_stage2_episodes, stage1_label};

#[test]
fn stage1_labels_match_exhaustive_oracle() {
    for i in 0..8u16 {
        for j in 0..8u16 {
            let a1 = 45 * i;
            let a2 = 45 * j;
            assert_eq!(stage1_label(a1, a2).unwrap(), stage1_oracle(a1, a2));
        }
    }
}

#[test]
fn generated_stage1_specs_match_oracle() {
    for (panel, label) in gen_stage1_specs(500, 2024) {
        assert_eq!(
            label,
            stage1_oracle(panel.arrows[0].orientation, panel.arrows[1].orientation)
        );
    }
}

#[test]
fn stage2_labels_match_rule_recovery_oracle() {
    for grid in 2..=4usize {
        let episodes = gen_stage2_episodes(300, 77, grid).unwrap();
        let mut mismatches = 0usize;
        for ep in &episodes {
            match recover_label(ep) {
                Some(label) if label == ep.label => {}
                other => {
                    mismatches += 1;
                    eprintln!(
                        "grid {grid} rule {} label {} oracle {:?}",
                        ep.rule.name(),
                        ep.label,
                        other
                    );
                }
            }
        }
        assert_eq!(mismatches, 0, "label mismatches at grid {grid}");
    }
}

#[test]
fn mirror_episodes_are_recoverable() {
    let episodes = gen_stage2_episodes(200, 13, 3).unwrap();
    let mirrors: Vec<_> = episodes
        .iter()
        .filter(|e| {
            matches!(
                e.rule,
                panelattn::benchgen::RowRule::MirrorA | panelattn::benchgen::RowRule::MirrorB
            )
        })
        .collect();
    assert!(!mirrors.is_empty());
    for ep in mirrors {
        assert_eq!(recover_label(ep), Some(ep.label));
    }
}
