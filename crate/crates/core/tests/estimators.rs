use std::sync::Arc;

use cvlift::cv::CollectiveVariable;
use cvlift::effective::{BkOptions, EffectiveModel};
use cvlift::estimators::{
    estimate_pb_guided, estimate_pb_mc, weighted_expectation, EstimateReport, SegmentScanner, TransitionQuery,
    DEFAULT_EPSILON,
};
use cvlift::experiments::{run_experiment, ExperimentConfig, ExperimentId};
use cvlift::model::SystemSpec;
use proptest::prelude::*;

#[test]
fn unguided_importance_form_agrees_with_plain_monte_carlo() {
    let spec = SystemSpec::standard_double_well();
    let cv = CollectiveVariable::coordinate(0, 2);
    let query = |seed| TransitionQuery {
        x0: vec![0.0, 0.0],
        z_star: 0.5,
        horizon: 2.0,
        dt: 1e-2,
        n_paths: 5000,
        seed,
    };
    let model = EffectiveModel::from_coefficients(0.1, -0.2, vec![0.1; 51], vec![]).unwrap();
    let table = Arc::new(model.solve_bk(0.5, 2.0, 200, BkOptions::default()).unwrap());
    let mc = estimate_pb_mc(&spec, &cv, &query(1)).unwrap();
    let guided = estimate_pb_guided(&spec, &cv, table, 0.0, &query(2), DEFAULT_EPSILON).unwrap();
    let (a, b) = (mc.endpoint.ci, guided.importance.ci);
    assert!(a[0] <= b[1] && b[0] <= a[1], "{a:?} vs {b:?}");
    assert_eq!(guided.ess, 5000.0);
    assert!(mc.hit_by_t.estimate >= mc.endpoint.estimate);
}

#[test]
fn guided_transition_rejects_a_mismatched_table() {
    let spec = SystemSpec::standard_double_well();
    let cv = CollectiveVariable::coordinate(0, 2);
    let model = EffectiveModel::from_coefficients(0.1, -0.2, vec![0.1; 51], vec![]).unwrap();
    let table = Arc::new(model.solve_bk(0.5, 2.0, 20, BkOptions::default()).unwrap());
    let q = TransitionQuery {
        x0: vec![0.0, 0.0],
        z_star: 0.6,
        horizon: 2.0,
        dt: 1e-2,
        n_paths: 4,
        seed: 0,
    };
    assert!(estimate_pb_guided(&spec, &cv, table, 1.0, &q, DEFAULT_EPSILON).is_err());
}

#[test]
fn constant_function_has_unit_mean_and_no_spread() {
    let spec = SystemSpec::standard_double_well();
    let e = cvlift::bridge::run_guided_bridge(
        &spec,
        None,
        &[vec![0.0, 0.0]],
        &cvlift::bridge::BridgeSettings::new(0.0, 0.1, 1e-2, 50, 0),
        None,
    )
    .unwrap();
    let r = weighted_expectation(&e, |_| 1.0).unwrap();
    assert!((r.estimate - 1.0).abs() < 1e-12 && r.std_error < 1e-12);
}

/// Guided committor estimation should need at least five times fewer fine
/// steps than plain sampling for the same interval width.
#[test]
fn guided_committor_saves_fine_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&ExperimentConfig::new(ExperimentId::Committor), dir.path()).unwrap();
    let ratio = out.values["cost_ratio_matched_width"];
    assert!(ratio >= 5.0, "cost ratio {ratio}");
}

proptest! {
    #[test]
    fn wilson_intervals_are_nested_and_bounded(n in 1usize..500, frac in 0.0f64..=1.0, lo in 0.5f64..0.9) {
        let k = ((n as f64) * frac).round() as usize;
        let r = EstimateReport::proportion("p", k, n, 0);
        let narrow = r.interval_at(lo);
        let wide = r.interval_at(0.99);
        prop_assert!(r.std_error >= 0.0);
        prop_assert!(narrow[0] >= -1e-12 && narrow[1] <= 1.0 + 1e-12);
        prop_assert!(wide[0] <= narrow[0] + 1e-12 && wide[1] >= narrow[1] - 1e-12);
        prop_assert!(r.ci[0] <= r.estimate + 1e-12 && r.estimate <= r.ci[1] + 1e-12);
    }

    #[test]
    fn segments_alternate_and_have_positive_duration(zs in proptest::collection::vec(0.0f64..1.0, 2..400)) {
        let mut s = SegmentScanner::new(0.1, 0.9).unwrap();
        for (k, z) in zs.iter().enumerate() {
            s.push(k as f64, *z);
        }
        let segs = s.segments;
        for w in segs.windows(2) {
            prop_assert!(w[1].start >= w[0].end);
        }
        for g in &segs {
            prop_assert!(g.duration() > 0.0);
            prop_assert!(zs[g.end as usize] >= 0.9);
            prop_assert!(zs[g.start as usize] <= 0.1);
            let inside = ((g.start as usize + 1)..(g.end as usize)).all(|k| zs[k] > 0.1 && zs[k] < 0.9);
            prop_assert!(inside);
        }
    }
}
