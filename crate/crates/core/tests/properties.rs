//! Property tests for the spec-level invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use visafe_core::blocks::{ghost_conv_forward, GhostConvConfig};
use visafe_core::detector::{iou, nms, BoundingBox};
use visafe_core::graph::cost::count_params;
use visafe_core::graph::GraphBuilder;
use visafe_core::pruner::{apply_plan, build_plan_scoped, channel_importance, PruneScope};
use visafe_core::tsn::consensus;
use visafe_core::Tensor;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..80.0, 0.0f64..80.0, 1.0f64..40.0, 1.0f64..40.0, 0.0f64..=1.0).prop_map(
        |(x, y, w, h, s)| BoundingBox::new(x, y, x + w, y + h, s).unwrap(),
    )
}

/// O(n^2) reference suppression: a box survives unless a kept higher-scoring
/// box overlaps it beyond the threshold.
fn brute_force_nms(boxes: &[BoundingBox], thr: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= thr) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i]).collect()
}

proptest! {
    #[test]
    fn nms_matches_brute_force(boxes in proptest::collection::vec(arb_box(), 0..24), thr in 0.05f64..0.9) {
        let fast = nms(&boxes, thr);
        let slow = brute_force_nms(&boxes, thr);
        prop_assert_eq!(&fast, &slow);
        // subset of input, no kept pair above the threshold
        for b in &fast {
            prop_assert!(boxes.contains(b));
        }
        for i in 0..fast.len() {
            for j in i + 1..fast.len() {
                prop_assert!(iou(&fast[i], &fast[j]) <= thr);
            }
        }
    }

    #[test]
    fn importance_argsort_invariant_under_global_rescale(
        slices in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4..12), 2..8),
        alpha in 0.01f64..50.0,
    ) {
        let scores: Vec<f64> = slices.iter().map(|s| channel_importance(s).unwrap()).collect();
        let scaled: Vec<f64> = slices
            .iter()
            .map(|s| {
                let v: Vec<f64> = s.iter().map(|x| x * alpha).collect();
                channel_importance(&v).unwrap()
            })
            .collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
            idx
        };
        // distinct norms keep their order under a positive rescale
        let distinct = scores.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
        if distinct {
            prop_assert_eq!(order(&scores), order(&scaled));
        }
    }

    #[test]
    fn consensus_reduction_order_stable(
        features in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 6), 1..9),
        shift in 0usize..8,
    ) {
        let base = consensus(&features).unwrap();
        let mut rotated = features.clone();
        let n = rotated.len().max(1);
        rotated.rotate_left(shift % n);
        let other = consensus(&rotated).unwrap();
        for (a, b) in base.iter().zip(other.iter()) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn ghost_shape_contract_randomized(
        in_c in 1usize..12,
        half_out in 1usize..10,
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
        stride in 1usize..3,
        h in 4usize..14,
        w in 4usize..14,
    ) {
        let cfg = GhostConvConfig { in_channels: in_c, out_channels: half_out * 2, kernel: k, stride, ratio: 2, cheap_kernel: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([1, in_c, h, w], 1.0, &mut rng);
        let y = ghost_conv_forward(&x, &cfg, &mut rng).unwrap();
        prop_assert_eq!(
            y.shape(),
            [1, half_out * 2, (h - 1) / stride + 1, (w - 1) / stride + 1]
        );
        prop_assert!(y.is_all_finite());
    }

    #[test]
    fn pruning_params_monotone_in_ratio(r1 in 0.0f64..0.95, r2 in 0.0f64..0.95) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 3);
        let c1 = b.conv_bn_silu("c1", &img, 16, 3, 1);
        let c2 = b.conv_bn_silu("c2", &c1, 16, 3, 1);
        let a = b.add("res", &[&c1, &c2]);
        let c3 = b.conv_bn_silu("c3", &a, 12, 3, 1);
        b.conv("out", &c3, 2, 1, 1, 1, true);
        let g = b.finish();
        let p_lo = apply_plan(&g, &build_plan_scoped(&g, lo, PruneScope::All).unwrap()).unwrap();
        let p_hi = apply_plan(&g, &build_plan_scoped(&g, hi, PruneScope::All).unwrap()).unwrap();
        prop_assert!(count_params(&p_lo) >= count_params(&p_hi));
    }
}
