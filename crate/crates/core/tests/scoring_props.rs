use ndarray::{Array1, Array2};
use proptest::prelude::*;

use focusad::scoring::{
    anomaly_probabilities, render_map, render_score_map, token_similarities, ScoreConfig, ScoreTensors, StreamScores,
};
use focusad::spatial::StreamKey;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn probs(streams: &[Array2<f64>], tn: &Array1<f64>, ta: &Array1<f64>) -> Array1<f64> {
    let scored = streams
        .iter()
        .enumerate()
        .map(|(i, z)| (StreamKey { block: i + 1, r: 1 }, token_similarities(z.view(), tn.view(), ta.view(), 0.07)))
        .collect();
    anomaly_probabilities(&ScoreTensors::from_streams(scored).unwrap())
}

proptest! {
    #[test]
    fn probabilities_ignore_token_rescaling(
        streams in prop::collection::vec(matrix(6, 4, -1.0, 1.0), 1..4),
        anchors in matrix(2, 4, 0.1, 1.0),
        scales in prop::collection::vec(0.01f64..50.0, 6),
    ) {
        let tn = unit(anchors.row(0).to_owned());
        let ta = unit(anchors.row(1).to_owned());
        let base = probs(&streams, &tn, &ta);
        let rescaled: Vec<Array2<f64>> = streams
            .iter()
            .map(|z| {
                let mut z = z.clone();
                for (mut row, s) in z.rows_mut().into_iter().zip(&scales) {
                    row *= *s;
                }
                z
            })
            .collect();
        let after = probs(&rescaled, &tn, &ta);
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn shared_shifts_cancel_and_abnormal_scores_are_monotone(
        normal in prop::collection::vec(-5.0f64..5.0, 5),
        abnormal in prop::collection::vec(-5.0f64..5.0, 5),
        shift in -10.0f64..10.0,
        bump in 0.01f64..2.0,
        token in 0usize..5,
    ) {
        let make = |n: &[f64], a: &[f64]| {
            ScoreTensors::from_streams(vec![(
                StreamKey { block: 1, r: 1 },
                StreamScores { normal: Array1::from(n.to_vec()), abnormal: Array1::from(a.to_vec()) },
            )])
            .unwrap()
        };
        let base = anomaly_probabilities(&make(&normal, &abnormal));
        let n2: Vec<f64> = normal.iter().map(|v| v + shift).collect();
        let a2: Vec<f64> = abnormal.iter().map(|v| v + shift).collect();
        let shifted = anomaly_probabilities(&make(&n2, &a2));
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut a3 = abnormal.clone();
        a3[token] += bump;
        let raised = anomaly_probabilities(&make(&normal, &a3));
        prop_assert!(raised[token] > base[token]);
    }

    #[test]
    fn rendering_keeps_bounds(grid in matrix(8, 8, 0.0, 1.0), sigma in 0.0f64..6.0) {
        let cfg = ScoreConfig { smooth_sigma: sigma, ..ScoreConfig::default() };
        let map = render_score_map(grid.view(), &cfg, 32);
        prop_assert_eq!(map.dim(), (32, 32));
        let (lo, hi) = grid.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(map.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn rendering_keeps_constants(c in -3.0f64..3.0, sigma in 0.0f64..6.0, side in 1usize..10, size in 1usize..40) {
        let map = render_map(Array2::from_elem((side, side), c).view(), sigma, size);
        prop_assert!(map.iter().all(|&v| (v - c).abs() < 1e-12));
    }
}
