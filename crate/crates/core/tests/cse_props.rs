use covshift::cse::{
    hotelling_t2, read_events_jsonl, select_lambda, write_events_jsonl, EwmaDetector, ShiftEvent,
    Stage,
};
use covshift::features::FeatureVector;
use proptest::prelude::*;

fn warnings(series: &[f64], limit: f64) -> usize {
    let mut det = EwmaDetector::new(0.0, 1.0, 0.3, limit, 0.1).unwrap();
    series
        .iter()
        .filter(|&&x| det.step(x).unwrap().warning)
        .count()
}

fn sample(d: usize) -> impl Strategy<Value = Vec<FeatureVector>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), 8..16)
        .prop_map(|rows| rows.into_iter().map(FeatureVector::new).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_limit_never_adds_warnings(series in proptest::collection::vec(-5.0f64..5.0, 5..80), l in 0.5f64..4.0, dl in 0.0f64..2.0) {
        prop_assert!(warnings(&series, l + dl) <= warnings(&series, l));
    }

    #[test]
    fn error_variance_stays_nonnegative(series in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
        let mut det = EwmaDetector::new(0.0, 1.0, 0.7, 3.0, 0.2).unwrap();
        for x in series {
            let s = det.step(x).unwrap();
            prop_assert!(det.sigma2_err >= 0.0);
            prop_assert!(s.ucl >= s.lcl);
        }
    }

    #[test]
    fn zero_lambda_freezes_the_statistic(series in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
        let mut det = EwmaDetector::new(1.25, 1.0, 0.0, 3.0, 0.1).unwrap();
        for x in series {
            det.step(x).unwrap();
            prop_assert_eq!(det.z, 1.25);
        }
    }

    #[test]
    fn selected_lambda_lies_on_grid(series in proptest::collection::vec(-5.0f64..5.0, 3..50)) {
        let sel = select_lambda(&series, 0.05).unwrap();
        prop_assert!((0.0..=1.0).contains(&sel.lambda));
        prop_assert!(((sel.lambda / 0.05) - (sel.lambda / 0.05).round()).abs() < 1e-9);
    }

    #[test]
    fn hotelling_is_symmetric(a in sample(3), b in sample(3)) {
        let (x, y) = (hotelling_t2(&a, &b, 0.05).unwrap(), hotelling_t2(&b, &a, 0.05).unwrap());
        prop_assert!((x.t2 - y.t2).abs() <= 1e-9 * (1.0 + x.t2));
        prop_assert!((x.p_value - y.p_value).abs() <= 1e-12);
    }

    #[test]
    fn hotelling_is_affine_invariant(a in sample(2), b in sample(2), m in proptest::collection::vec(0.5f64..2.0, 4), shift in proptest::collection::vec(-4.0f64..4.0, 2)) {
        // Diagonally dominant, hence invertible.
        let map = |v: &FeatureVector| {
            let x = v.as_slice();
            FeatureVector::new(vec![
                2.5 * m[0] * x[0] + m[1] * x[1] + shift[0],
                m[2] * x[0] + 2.5 * m[3] * x[1] + shift[1],
            ])
        };
        let ta: Vec<FeatureVector> = a.iter().map(map).collect();
        let tb: Vec<FeatureVector> = b.iter().map(map).collect();
        let (x, y) = (hotelling_t2(&a, &b, 0.05).unwrap(), hotelling_t2(&ta, &tb, 0.05).unwrap());
        prop_assert!((x.t2 - y.t2).abs() <= 1e-8 * (1.0 + x.t2));
    }
}

#[test]
fn event_log_round_trips() {
    let events = vec![
        ShiftEvent {
            trial_index: 104,
            stage: Stage::Warning,
            statistic: 3.2,
            p_value: Some(0.2),
        },
        ShiftEvent {
            trial_index: 105,
            stage: Stage::Validated,
            statistic: 41.0,
            p_value: Some(1e-6),
        },
    ];
    let mut buf = Vec::new();
    write_events_jsonl(&events, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.lines().next().unwrap().contains("\"index\":104"));
    assert_eq!(read_events_jsonl(buf.as_slice()).unwrap(), events);
}
