use std::collections::BTreeMap;

use ovis_core::eval::{
    error_analysis, iou, map_and_precision, match_detections, precision_at_k, BBox, Detection, EvalConfig,
    GroundTruthSet, GtRegion, LOW_IOU,
};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u8..8, 0u8..8, 1u8..6, 1u8..6).prop_map(|(x, y, w, h)| BBox::new(x as f32, y as f32, w as f32, h as f32))
}

/// Images 0..4 may hold ground truth; image 4 and up are distractors.
fn fixture() -> impl Strategy<Value = (Vec<Detection>, Vec<GtRegion>, usize)> {
    (
        prop::collection::vec((0u32..6, bbox()), 0..12),
        prop::collection::vec((0u32..4, bbox()), 0..6),
        1usize..10,
    )
        .prop_map(|(hits, gt, k)| {
            let hits = hits
                .into_iter()
                .map(|(image_id, bbox)| Detection { image_id, bbox })
                .collect();
            let mut regions: Vec<GtRegion> = Vec::new();
            for (image_id, bbox) in gt {
                let r = GtRegion { image_id, bbox };
                if !regions.contains(&r) {
                    regions.push(r);
                }
            }
            (hits, regions, k)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decomposition_identity((hits, gt, k) in fixture(), t in prop::sample::select(vec![0.3, 0.5, 0.7])) {
        let b = error_analysis(&hits, &gt, t, k, LOW_IOU);
        prop_assert!((b.ap + b.e_ord + b.e_iou + b.e_bg - 1.0).abs() <= 1e-9);
        prop_assert!(b.e_ord >= 0.0);
        prop_assert!(b.e_iou >= -1e-12);
        prop_assert!((0.0..=1.0).contains(&b.ap));
    }

    #[test]
    fn ap_monotone_in_threshold((hits, gt, k) in fixture()) {
        let mut gts = GroundTruthSet::new();
        gts.add_query("q");
        for r in &gt {
            gts.add("q", *r).unwrap();
        }
        let results = BTreeMap::from([("q".to_string(), hits)]);
        let report = map_and_precision(&results, &gts, &EvalConfig::new(k)).unwrap();
        let m: Vec<f64> = report.per_threshold.iter().map(|t| t.map).collect();
        prop_assert!(m[0] >= m[1] && m[1] >= m[2], "{m:?}");
        prop_assert!((report.map_all - m.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn precision_ignores_order_within_top_k((hits, gt, k) in fixture(), t in prop::sample::select(vec![0.3, 0.5, 0.7])) {
        let top: Vec<Detection> = hits.iter().take(k).cloned().collect();
        // greedy matching is only order-free when no hit can claim two GT regions
        let contested = top.iter().any(|h| {
            gt.iter()
                .filter(|g| g.image_id == h.image_id && iou(&h.bbox, &g.bbox).unwrap() >= t)
                .count()
                > 1
        });
        if contested {
            return Ok(());
        }
        let flags: Vec<bool> = match_detections(&top, &gt, t).iter().map(|o| o.is_tp()).collect();
        let mut rev = top.clone();
        rev.reverse();
        let rflags: Vec<bool> = match_detections(&rev, &gt, t).iter().map(|o| o.is_tp()).collect();
        prop_assert_eq!(precision_at_k(&flags, k), precision_at_k(&rflags, k));
    }
}

#[test]
fn perfect_results_score_one() {
    let mut gt = GroundTruthSet::new();
    let b = BBox::new(1.0, 2.0, 3.0, 4.0);
    gt.add("cactus", GtRegion { image_id: 5, bbox: b }).unwrap();
    let results = BTreeMap::from([("cactus".to_string(), vec![Detection { image_id: 5, bbox: b }])]);
    let r = map_and_precision(&results, &gt, &EvalConfig::new(50)).unwrap();
    assert_eq!(r.map_all, 1.0);
    assert_eq!(r.prec_all, 1.0);
}

#[test]
fn contested_regions_make_greedy_matching_order_dependent() {
    let gt = [
        GtRegion {
            image_id: 0,
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0),
        },
        GtRegion {
            image_id: 0,
            bbox: BBox::new(2.0, 0.0, 2.0, 2.0),
        },
    ];
    // `between` clears 0.3 against both regions and prefers the first;
    // `exact` only overlaps the first
    let between = Detection {
        image_id: 0,
        bbox: BBox::new(0.95, 0.0, 2.0, 2.0),
    };
    let exact = Detection {
        image_id: 0,
        bbox: BBox::new(0.0, 0.0, 2.0, 2.0),
    };
    let count = |hits: &[Detection]| match_detections(hits, &gt, 0.3).iter().filter(|o| o.is_tp()).count();
    assert_eq!(count(&[exact, between]), 2);
    assert_eq!(count(&[between, exact]), 1);
}
