use cvlift::bridge::{resample_endpoint, run_guided_bridge, BridgeSettings, GuidedPath};
use cvlift::cv::CollectiveVariable;
use cvlift::estimators::weighted_expectation;
use cvlift::experiments::{run_experiment, ExperimentConfig, ExperimentId};
use cvlift::guidance::{ControlLaw, GainSchedule, ReferencePath};
use cvlift::model::SystemSpec;

fn tracking_x(gain: f64, target: f64) -> ControlLaw {
    let r = ReferencePath::scalar(vec![0.0, 1.0], vec![target, target]).unwrap();
    ControlLaw::tracking(CollectiveVariable::coordinate(0, 2), r, GainSchedule::Constant { value: gain }, 0.0).unwrap()
}

#[test]
fn reweighted_double_well_matches_plain_monte_carlo() {
    let spec = SystemSpec::standard_double_well();
    let law = tracking_x(1.0, 0.5);
    let start = [vec![-1.0, -1.0]];
    let guided = run_guided_bridge(&spec, Some(&law), &start, &BridgeSettings::new(0.0, 1.0, 1e-2, 20_000, 3), None).unwrap();
    let plain = run_guided_bridge(&spec, None, &start, &BridgeSettings::new(0.0, 1.0, 1e-2, 20_000, 4), None).unwrap();
    assert!(plain.paths.iter().all(|p| p.log_weight == 0.0));

    let fs: [fn(&GuidedPath) -> f64; 2] = [|p| p.end[0], |p| p.end[0] * p.end[1]];
    for f in fs {
        let g = weighted_expectation(&guided, f).unwrap();
        let m = weighted_expectation(&plain, f).unwrap();
        let tol = 3.0 * g.std_error.hypot(m.std_error);
        assert!((g.estimate - m.estimate).abs() < tol, "{} vs {} (tol {tol})", g.estimate, m.estimate);
    }
    assert!(guided.ess > 0.05 * guided.len() as f64 && guided.ess < guided.len() as f64, "ess {}", guided.ess);
}

#[test]
fn single_path_resamples_to_its_endpoint() {
    let spec = SystemSpec::standard_double_well();
    let e = run_guided_bridge(&spec, None, &[vec![0.2, 0.1]], &BridgeSettings::new(0.0, 0.5, 1e-2, 1, 9), None).unwrap();
    for seed in 0..5 {
        let (j, x) = resample_endpoint(&e, seed).unwrap();
        assert_eq!(j, 0);
        assert_eq!(x, e.paths[0].end);
    }
}

#[test]
fn ensembles_do_not_depend_on_the_thread_count() {
    let spec = SystemSpec::standard_double_well();
    let law = tracking_x(5.0, 1.0);
    let s = BridgeSettings::new(0.0, 1.0, 1e-3, 16, 11).storing(50);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_guided_bridge(&spec, Some(&law), &[vec![-1.0, -1.0]], &s, None).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

/// Linear reference from the low well to the high well over ten time units
/// with gain 100: most paths should finish inside `{χ > 0.8}`.
#[test]
fn linear_reference_bridge_reaches_the_high_well() {
    let cfg = ExperimentConfig::new(ExperimentId::BridgeLinear);
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    for f in ["ensemble_paths.csv", "ensemble_endpoints.csv", "results.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let arrival = out.values["arrival_fraction"];
    assert!(arrival >= 0.9, "arrival fraction {arrival}");
}
