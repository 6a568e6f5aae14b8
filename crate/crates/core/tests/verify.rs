use arel::exec::Exec;
use arel::verify::*;

#[test]
fn theorem_family_agrees_everywhere() {
    let r = check_theorem_family(100, 7, Exec::best()).unwrap();
    assert_eq!(r.confirmed, 100, "{r:?}");
}

#[test]
fn width_trend_is_decreasing_and_stable() {
    let r = check_width_variance_trend(&[64, 256, 1024], 200, 3, Exec::best()).unwrap();
    assert_eq!(r.verdict, TrendVerdict::Pass, "{r:?}");
    let slope = r.slope.unwrap();
    let se = r.slope_std_error.unwrap();
    let twice = check_width_variance_trend(&[64, 256, 1024], 400, 3, Exec::best()).unwrap();
    assert!((twice.slope.unwrap() - slope).abs() <= 3.0 * se, "{slope} ± {se} vs {:?}", twice.slope);
}

#[test]
fn report_serializes_every_verdict() {
    let cfg = VerifyConfig { theorem_instances: 10, bound_ensembles: 50, width_inits: 30, monte_carlo_samples: 20_000, ..Default::default() };
    let report = run_all(&cfg, Exec::best()).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    for key in ["return_equivalence", "uniform_infeasibility", "loss_bound", "width_variance", "sampling", "passed"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}
