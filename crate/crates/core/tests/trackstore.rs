use mo3tr_core::trackstore::TrackSet;
use proptest::prelude::*;

proptest! {
    /// Entries from the same absolute frame share a column in every row.
    #[test]
    fn right_align_is_column_consistent(
        histories in prop::collection::vec(prop::collection::btree_set(0u32..40, 1..12), 1..6),
        width in 1usize..16,
        ahead in 1u32..4,
    ) {
        let mut ts = TrackSet::new(width);
        let mut latest = 0;
        for (i, frames) in histories.iter().enumerate() {
            for &f in frames {
                ts.append(i as u64 + 1, f, vec![f as f64, i as f64], 1.0).unwrap();
                latest = latest.max(f);
            }
        }
        let current = latest + ahead;
        let view = ts.right_align(current);
        for row in &view.rows {
            let track = ts.get(row.identity).unwrap();
            prop_assert!(track.history.len() <= width);
            for (j, cell) in row.cells.iter().enumerate() {
                let frame = view.frame_of(j);
                let stored = track.history.iter().find(|(f, _)| *f as i64 == frame);
                match (cell, stored) {
                    (Some(e), Some((_, s))) => {
                        prop_assert_eq!(e, s);
                        prop_assert_eq!(e[0] as i64, frame);
                    }
                    (None, None) => {}
                    _ => prop_assert!(false, "column {} mismatched for frame {}", j, frame),
                }
            }
        }
    }

    #[test]
    fn history_never_exceeds_width(frames in prop::collection::btree_set(0u32..100, 1..60), width in 1usize..32) {
        let mut ts = TrackSet::new(width);
        for &f in &frames {
            ts.append(1, f, vec![0.0], 0.9).unwrap();
            prop_assert!(ts.get(1).unwrap().history.len() <= width);
        }
    }

    #[test]
    fn low_probability_append_is_a_no_op(p in 0.0f64..=0.5, frame in 10u32..20) {
        let mut ts = TrackSet::new(8);
        ts.append(1, 5, vec![1.0, 2.0], 0.9).unwrap();
        let before = ts.clone();
        ts.append(1, frame, vec![3.0, 4.0], p).unwrap();
        ts.append(2, frame, vec![3.0, 4.0], p).unwrap();
        prop_assert_eq!(ts, before);
    }
}
