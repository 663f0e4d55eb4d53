mod common;

use ndarray::Array2;
use proptest::prelude::*;

use focusad::error::Error;
use focusad::metrics::{aupro, auroc, average_precision};

use common::{aupro_dense, auroc_pairs, unit_grid};

fn ranked() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..25).prop_map(|k| f64::from(k) / 25.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

fn map_and_mask(side: usize) -> impl Strategy<Value = (Array2<f64>, Array2<bool>)> {
    (
        prop::collection::vec((0u32..=40).prop_map(|k| f64::from(k) / 40.0), side * side),
        prop::collection::vec(prop::bool::weighted(0.2), side * side),
    )
        .prop_map(move |(s, mut m)| {
            m[0] = true;
            (
                Array2::from_shape_vec((side, side), s).unwrap(),
                Array2::from_shape_vec((side, side), m).unwrap(),
            )
        })
}

proptest! {
    #[test]
    fn auroc_equals_pair_counting((s, l) in ranked()) {
        prop_assert!((auroc(&s, &l).unwrap() - auroc_pairs(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((s, l) in ranked(), k in 0.1f64..5.0, c in -3.0f64..3.0) {
        let warped: Vec<f64> = s.iter().map(|v| (k * v).exp() + c).collect();
        prop_assert!((auroc(&warped, &l).unwrap() - auroc(&s, &l).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&warped, &l).unwrap() - average_precision(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ap_is_a_probability((s, l) in ranked()) {
        let ap = average_precision(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(ap, average_precision(&s, &l).unwrap());
    }

    #[test]
    fn aupro_matches_dense_oracle((map, mask) in (4usize..=16).prop_flat_map(map_and_mask), limit in 0.05f64..=1.0) {
        let got = aupro(std::slice::from_ref(&map), std::slice::from_ref(&mask), limit).unwrap();
        let want = aupro_dense(&[map.clone()], &[mask.clone()], limit, &unit_grid(400));
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        let warped = map.mapv(|v| v.powi(3) + 2.0 * v);
        prop_assert!((aupro(&[warped], &[mask], limit).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn constant_map_gives_diagonal_overlap() {
    let mask = Array2::from_shape_fn((16, 16), |(i, j)| (3..7).contains(&i) && (2..9).contains(&j));
    let map = Array2::from_elem((16, 16), 0.3);
    let got = aupro(&[map.clone()], &[mask.clone()], 0.3).unwrap();
    assert!((got - 0.15).abs() < 1e-12);
    assert!((got - aupro_dense(&[map], &[mask], 0.3, &unit_grid(1000))).abs() < 1e-3);
}

#[test]
fn separate_regions_weigh_equally() {
    // one large region found, one small region missed: overlap caps at 0.5
    // until the threshold drops below the background
    let mut mask = Array2::from_elem((10, 10), false);
    let mut map = Array2::from_elem((10, 10), 0.1);
    for i in 0..5 {
        for j in 0..5 {
            mask[[i, j]] = true;
            map[[i, j]] = 0.9;
        }
    }
    mask[[8, 8]] = true;
    map[[8, 8]] = 0.0;
    let got = aupro(&[map], &[mask], 0.3).unwrap();
    assert!((got - 0.5).abs() < 1e-12, "{got}");
}

#[test]
fn degenerate_inputs_are_undefined() {
    assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
    let blank = Array2::from_elem((4, 4), false);
    assert!(matches!(aupro(&[Array2::zeros((4, 4))], &[blank], 0.3), Err(Error::UndefinedMetric(_))));
}
