use std::collections::HashSet;

use densecl::eval::{miou, region_similarity_j, rmse};
use proptest::prelude::*;

/// IoU of two index sets.
fn set_iou(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    inter as f64 / union as f64
}

fn positions(v: &[u16], label: u16) -> HashSet<usize> {
    v.iter().enumerate().filter(|&(_, &x)| x == label).map(|(i, _)| i).collect()
}

fn labels(n_classes: u16) -> impl Strategy<Value = (Vec<u16>, Vec<u16>)> {
    (1usize..200).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..n_classes, n),
            prop::collection::vec(0..n_classes, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn miou_matches_set_counting(
        n_classes in 2u16..7,
        seed_pair in labels(6),
    ) {
        let (pred, gt): (Vec<u16>, Vec<u16>) = (
            seed_pair.0.iter().map(|&x| x % n_classes).collect(),
            seed_pair.1.iter().map(|&x| x % n_classes).collect(),
        );
        let report = miou(&pred, &gt, n_classes as usize).unwrap();
        let mut ious = Vec::new();
        for c in 0..n_classes {
            let (p, g) = (positions(&pred, c), positions(&gt, c));
            if p.is_empty() && g.is_empty() {
                prop_assert_eq!(report.per_class[c as usize], None);
            } else {
                let iou = set_iou(&p, &g);
                prop_assert_eq!(report.per_class[c as usize], Some(iou));
                ious.push(iou);
            }
        }
        let expected = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert_eq!(report.value, expected);
        prop_assert_eq!(report.n_samples, pred.len());
    }

    #[test]
    fn rmse_matches_formula(pairs in prop::collection::vec((-50.0f32..50.0, -50.0f32..50.0), 1..300)) {
        let pred: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<f32> = pairs.iter().map(|p| p.1).collect();
        let mut sq = 0.0f64;
        for i in 0..pred.len() {
            let e = pred[i] as f64 - gt[i] as f64;
            sq += e * e;
        }
        let expected = (sq / pred.len() as f64).sqrt();
        prop_assert_eq!(rmse(&pred, &gt).unwrap().value, expected);
    }

    #[test]
    fn region_similarity_matches_set_counting(
        frames in 1usize..6,
        n in 1usize..80,
        raw in prop::collection::vec((0u16..4, 0u16..4), 6 * 80),
    ) {
        let pred: Vec<Vec<u16>> = (0..frames).map(|t| raw[t * n..(t + 1) * n].iter().map(|p| p.0).collect()).collect();
        let mut gt: Vec<Vec<u16>> = (0..frames).map(|t| raw[t * n..(t + 1) * n].iter().map(|p| p.1).collect()).collect();
        // Guarantee one foreground pixel so the metric is defined.
        gt[0][0] = 1;
        let report = region_similarity_j(&pred, &gt).unwrap();
        let mut scores = Vec::new();
        for inst in 1..4u16 {
            for t in 0..frames {
                let g = positions(&gt[t], inst);
                if !g.is_empty() {
                    scores.push(set_iou(&positions(&pred[t], inst), &g));
                }
            }
        }
        let expected = scores.iter().sum::<f64>() / scores.len() as f64;
        prop_assert_eq!(report.value, expected);
        prop_assert_eq!(report.n_samples, scores.len());
    }
}

#[test]
fn miou_on_a_hand_worked_case() {
    let gt = [0, 0, 1, 1, 2, 2];
    let pred = [0, 1, 1, 1, 2, 0];
    let r = miou(&pred, &gt, 4).unwrap();
    // class 0: {0,1} vs {0,5} -> 1/3; class 1: {2,3} vs {1,2,3} -> 2/3; class 2: {4,5} vs {4} -> 1/2
    assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(2.0 / 3.0), Some(0.5), None]);
    assert!((r.value - 0.5).abs() < 1e-15);
}
