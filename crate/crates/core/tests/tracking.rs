use mo3tr_core::assignment::BBox;
use mo3tr_core::model::{filter_initiations, Detection, FilterMode};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = Vec<BBox>> {
    prop::collection::vec((0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.3, 0.05f64..0.3), 0..7)
        .prop_map(|v| v.into_iter().map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h)).collect())
}

fn detection(b: BBox) -> Detection {
    let [x1, y1, x2, y2] = b.corners();
    Detection {
        x1,
        y1,
        x2,
        y2,
        confidence: 1.0,
    }
}

proptest! {
    #[test]
    fn filtering_is_idempotent_and_one_to_one(cands in boxes(), dets in boxes(), iou in any::<bool>()) {
        let dets: Vec<Detection> = dets.into_iter().map(detection).collect();
        let mode = if iou { FilterMode::Iou } else { FilterMode::CenterDistance };
        let t = mode.default_threshold();
        let kept = filter_initiations(&cands, &dets, mode, t);
        prop_assert!(kept.len() <= dets.len());
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let sub: Vec<BBox> = kept.iter().map(|&i| cands[i]).collect();
        let again = filter_initiations(&sub, &dets, mode, t);
        prop_assert_eq!(again, (0..sub.len()).collect::<Vec<_>>());
    }

    #[test]
    fn a_candidate_on_a_detection_is_licensed(c in boxes()) {
        let dets: Vec<Detection> = c.iter().copied().map(detection).collect();
        for mode in [FilterMode::Iou, FilterMode::CenterDistance] {
            let kept = filter_initiations(&c, &dets, mode, mode.default_threshold());
            prop_assert_eq!(kept.len(), c.len());
        }
    }
}
