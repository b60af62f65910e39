use proptest::prelude::*;

use d3fnet::metrics::{confusion, scores, ConfusionCounts};
use d3fnet::rf::{coverage_map, coverage_metrics, rf_size};
use d3fnet::tensor::{conv2d, Conv2dSpec};
use d3fnet::train::{synth_tile, MAX_ROAD_FRACTION, MIN_ROAD_FRACTION};
use d3fnet::Tensor;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (1u64..5000, 0u64..5000, 0u64..5000, 0u64..50_000).prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
}

/// Counts of reachable offsets by direct path enumeration.
fn brute_force(rates: &[usize]) -> Vec<u64> {
    let reach: usize = rates.iter().sum();
    let side = 2 * reach + 1;
    let mut frontier = vec![(0isize, 0isize)];
    for &r in rates {
        let r = r as isize;
        frontier = frontier
            .iter()
            .flat_map(|&(y, x)| (-1..=1).flat_map(move |a| (-1..=1).map(move |b| (y + a * r, x + b * r))))
            .collect();
    }
    let mut out = vec![0u64; side * side];
    for (y, x) in frontier {
        out[(y + reach as isize) as usize * side + (x + reach as isize) as usize] += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_follows_from_iou(c in counts()) {
        let s = scores(&c);
        prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        prop_assert!(s.iou <= s.f1 + 1e-15);
    }

    #[test]
    fn scores_ignore_scale(c in counts(), k in 2u64..50) {
        let scaled = ConfusionCounts { tp: c.tp * k, fp: c.fp * k, fn_: c.fn_ * k, tn: c.tn * k };
        let (a, b) = (scores(&c), scores(&scaled));
        prop_assert!((a.iou - b.iou).abs() < 1e-12);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
    }

    #[test]
    fn confusion_partitions_pixels(pred in prop::collection::vec(0.0f64..1.0, 1..200), seed in any::<u64>()) {
        let gt: Vec<f64> = pred.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
        let c = confusion(&pred, &gt, 0.5).unwrap();
        prop_assert_eq!(c.total(), pred.len() as u64);
        prop_assert_eq!(c.tp + c.fn_, gt.iter().filter(|&&g| g == 1.0).count() as u64);
    }

    #[test]
    fn coverage_matches_enumeration(rates in prop::collection::vec(1usize..6, 1..5)) {
        let m = coverage_map(&rates).unwrap();
        prop_assert_eq!(m.side(), rf_size(&rates));
        let expected = brute_force(&rates);
        prop_assert_eq!(m.counts(), expected.as_slice());
        prop_assert_eq!(m.total(), 9u64.pow(rates.len() as u32));
    }

    #[test]
    fn coverage_metrics_in_range(rates in prop::collection::vec(1usize..6, 1..5)) {
        let s = coverage_metrics(&coverage_map(&rates).unwrap());
        prop_assert!((0.0..=1.0).contains(&s.uniformity));
        prop_assert!(s.coverage_fraction > 0.0 && s.coverage_fraction <= 1.0);
        prop_assert_eq!(s.holes == 0, s.coverage_fraction == 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
        let t = Tensor::from_vec(&[3, 4], v.clone()).unwrap();
        let s = t.softmax_lastdim();
        let shifted = Tensor::from_vec(&[3, 4], v.iter().map(|x| x + shift).collect()).unwrap().softmax_lastdim();
        for r in 0..3 {
            let row = &s.data()[r * 4..r * 4 + 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 6),
        y in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 6),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
        a in -2.0f64..2.0,
        dilation in 1usize..3,
    ) {
        let spec = Conv2dSpec::same(3, dilation);
        let tx = Tensor::from_vec(&[1, 2, 6, 6], x).unwrap();
        let ty = Tensor::from_vec(&[1, 2, 6, 6], y).unwrap();
        let tw = Tensor::from_vec(&[3, 2, 3, 3], w).unwrap();
        let lhs = conv2d(&tx.scale(a).add(&ty).unwrap(), &tw, None, spec).unwrap();
        let rhs = conv2d(&tx, &tw, None, spec).unwrap().scale(a).add(&conv2d(&ty, &tw, None, spec).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_masks_stay_in_band() {
    for seed in 0..100 {
        let t = synth_tile(seed, 0, 64).unwrap();
        let f = t.road_fraction();
        assert!((MIN_ROAD_FRACTION..=MAX_ROAD_FRACTION).contains(&f), "seed {seed}: {f}");
        assert!(t.mask.contains(&255));
        assert!(t.mask.iter().all(|&m| m == 0 || m == 255));
    }
}

#[test]
fn synthetic_dataset_is_reproducible_on_disk() {
    let spec = d3fnet::train::SynthSpec { seed: 9, count: 2, size: 64 };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    d3fnet::train::write_synth_dataset(&spec, a.path()).unwrap();
    d3fnet::train::write_synth_dataset(&spec, b.path()).unwrap();
    for name in ["synth0000_sat.png", "synth0000_mask.png", "synth0001_sat.png", "synth0001_mask.png"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let loaded = d3fnet::train::load_dataset(a.path()).unwrap();
    let direct: Vec<_> = d3fnet::train::synth_dataset(&spec).unwrap().iter().map(|t| t.to_sample()).collect();
    assert_eq!(loaded, direct);
}
