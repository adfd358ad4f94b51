//! Property tests over the pure math surfaces.

use cyclevos::loss::{ce_loss_bootstrapped, iou_loss, smooth_loss, LossConfig};
use cyclevos::mask::{contour_f, jaccard, soft_aggregate, Mask};
use ndarray::Array2;
use proptest::prelude::*;

fn prob_grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(0.0f64..=1.0, h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn binary_grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(proptest::bool::ANY, h * w).prop_map(move |v| {
        Array2::from_shape_vec((h, w), v.into_iter().map(|b| b as u8 as f64).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_loss_stays_in_unit_interval(pred in prob_grid(6, 6), gt in binary_grid(6, 6)) {
        let pred = Mask::probability(pred, 1).unwrap();
        let gt = Mask::probability(gt, 1).unwrap();
        let v = iou_loss(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "iou loss {v}");
    }

    #[test]
    fn ce_loss_is_nonnegative(pred in prob_grid(6, 6), gt in binary_grid(6, 6), frac in 0.05f64..=1.0) {
        let pred = Mask::probability(pred, 1).unwrap();
        let gt = Mask::probability(gt, 1).unwrap();
        let v = ce_loss_bootstrapped(&pred, &gt, frac).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn smooth_loss_nonnegative_and_negation_invariant(pred in prob_grid(6, 6)) {
        let a = smooth_loss(&Mask::unconstrained(pred.clone(), 1)).unwrap();
        let b = smooth_loss(&Mask::unconstrained(pred.mapv(|v| -v), 1)).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn combined_loss_respects_component_bounds(
        pred in prob_grid(5, 5),
        gt in binary_grid(5, 5),
        gamma in 0.0f64..=2.0,
    ) {
        let cfg = LossConfig { gamma, ..Default::default() };
        let pred = Mask::probability(pred, 1).unwrap();
        let gt = Mask::probability(gt, 1).unwrap();
        let total = cyclevos::loss::combined_loss(&pred, &gt, &cfg).unwrap();
        let iou = iou_loss(&pred, &gt).unwrap();
        prop_assert!(total >= iou - 1e-12, "total {total} below iou {iou}");
    }

    #[test]
    fn soft_aggregate_output_sums_to_one(
        a in prob_grid(5, 5),
        b in prob_grid(5, 5),
        c in prob_grid(5, 5),
        n in 1usize..=3,
    ) {
        let grids = [a, b, c];
        let masks: Vec<Mask> = grids
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, g)| Mask::probability(g.clone(), i as u32 + 1).unwrap())
            .collect();
        let agg = soft_aggregate(&masks).unwrap();
        for (idx, &bg) in agg.background.values.indexed_iter() {
            let s: f64 = bg + agg.per_object.iter().map(|m| m.values[idx]).sum::<f64>();
            prop_assert!((s - 1.0).abs() < 1e-6, "pixel {idx:?} sums to {s}");
        }
    }

    #[test]
    fn metrics_symmetric_and_reflexive(a in binary_grid(7, 9), b in binary_grid(7, 9)) {
        let ma = Mask::probability(a, 1).unwrap();
        let mb = Mask::probability(b, 1).unwrap();
        let j1 = jaccard(&ma, &mb).unwrap();
        let j2 = jaccard(&mb, &ma).unwrap();
        prop_assert!((j1 - j2).abs() < 1e-9);
        prop_assert!((jaccard(&ma, &ma).unwrap() - 1.0).abs() < 1e-12);

        let f1 = contour_f(&ma, &mb, 2).unwrap();
        let f2 = contour_f(&mb, &ma, 2).unwrap();
        prop_assert!((f1 - f2).abs() < 1e-9);
        prop_assert!((contour_f(&ma, &ma, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_fraction_is_monotone(pred in prob_grid(6, 6), gt in binary_grid(6, 6)) {
        // clamp pred away from the exact extremes so the ordering is stable
        let pred = Mask::probability(pred.mapv(|v| v.clamp(0.01, 0.99)), 1).unwrap();
        let gt = Mask::probability(gt, 1).unwrap();
        let mut prev = f64::INFINITY;
        for frac in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let v = ce_loss_bootstrapped(&pred, &gt, frac).unwrap();
            prop_assert!(v <= prev + 1e-9);
            prev = v;
        }
    }
}
