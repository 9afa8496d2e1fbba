#![allow(dead_code)]

use cirm_core::model::ForwardTrace;

/// Relevance weights sum to one over valid slots and vanish on padding;
/// every recorded gate lies strictly inside (0, 1).
pub fn assert_traces_normalized(traces: &[ForwardTrace]) {
    for tr in traces {
        if let Some(rel) = &tr.relevance {
            let valid: f64 = rel.w.iter().zip(&tr.image_mask).filter(|(_, &m)| m == 1).map(|(w, _)| w).sum();
            assert!((valid - 1.0).abs() <= 1e-10, "{}: weights sum to {valid}", tr.id);
            for (w, &m) in rel.w.iter().zip(&tr.image_mask) {
                if m == 0 {
                    assert_eq!(*w, 0.0, "{}: padded slot has weight {w}", tr.id);
                }
            }
        }
        for g in tr.gates() {
            assert!(g.strictly_inside_unit_interval(), "{}: gate {g:?}", tr.id);
        }
    }
}
