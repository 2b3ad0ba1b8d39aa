use fundus_guide::objectives::{air, auroc, operating_point, roc_curve, EvalSample, MetricsReport};
use proptest::prelude::*;

fn sample(score: f64, label: bool, activation: Vec<f64>, mask: Option<Vec<f64>>) -> EvalSample {
    EvalSample {
        score,
        label,
        activation,
        cue_mask: mask,
    }
}

#[test]
fn report_on_a_hand_worked_set() {
    let inside = vec![1.0, 0.0, 0.0, 0.0];
    let samples = vec![
        sample(0.9, true, vec![0.6, 0.2, 0.1, 0.1], Some(inside.clone())),
        sample(0.3, true, vec![0.1, 0.3, 0.3, 0.3], Some(inside)),
        sample(0.8, false, vec![0.5; 4], None),
        sample(0.1, false, vec![0.5; 4], None),
    ];
    let r = MetricsReport::compute(&samples);
    assert_eq!(r.auroc, Some(0.75));
    // the best harmonic mean is shared by two cuts; higher sensitivity wins
    assert_eq!(r.sensitivity, Some(1.0));
    assert_eq!(r.specificity, Some(0.5));
    assert!((r.threshold.unwrap() - 0.2).abs() < 1e-15);
    assert_eq!((r.counts.tp, r.counts.fn_, r.counts.fp, r.counts.tn), (2, 0, 1, 1));
    let air_tp = r.air_tp.unwrap();
    assert!((air_tp - (0.6 + 0.1) / 2.0).abs() < 1e-15, "{air_tp}");
    assert_eq!(r.air_fn, None);
}

#[test]
fn single_class_leaves_ranking_metrics_undefined() {
    let s = vec![sample(0.4, true, vec![1.0], Some(vec![1.0])); 3];
    let r = MetricsReport::compute(&s);
    assert_eq!(r.auroc, None);
    assert_eq!(r.threshold, None);
    assert_eq!(r.air_fn, Some(1.0));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
}

#[test]
fn air_of_zero_activation_is_undefined() {
    assert_eq!(air(&[0.0, 0.0], &[1.0, 0.0]), None);
    assert_eq!(air(&[1.0, 3.0], &[1.0, 0.0]), Some(0.25));
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..12, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64 / 11.0, l)).unzip())
}

proptest! {
    #[test]
    fn auroc_is_invariant_to_monotone_rescaling((s, l) in scored()) {
        let a = auroc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, auroc(&t, &l).unwrap());
        let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((a + auroc(&flipped, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_trapezoid_area_equals_auroc((s, l) in scored()) {
        let pts = roc_curve(&s, &l).unwrap();
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        prop_assert!((area - auroc(&s, &l).unwrap()).abs() < 1e-12);
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn operating_point_threshold_reproduces_its_rates((s, l) in scored()) {
        let op = operating_point(&s, &l).unwrap();
        let pos = l.iter().filter(|&&x| x).count() as f64;
        let tp = s.iter().zip(&l).filter(|(v, y)| **y && **v >= op.threshold).count() as f64;
        prop_assert_eq!(op.sensitivity, tp / pos);
    }
}
