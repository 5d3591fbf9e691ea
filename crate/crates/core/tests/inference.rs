use proptest::prelude::*;
use screening_iv::inference::{hr_curve, regular_grid, run_sim_study, select_timepoint, HrCurve, HrPoint};
use screening_iv::simulate::{reference_model, simulate_trial, ScenarioConfig};
use screening_iv::Estimand;

fn trial(n: usize, theta: f64, seed: u64) -> screening_iv::TrialDataset {
    simulate_trial(&ScenarioConfig::new(n, reference_model(theta), 7.0, None, seed).unwrap()).unwrap()
}

#[test]
fn null_curve_fluctuates_around_zero() {
    let grid = regular_grid(2.0, 7.0, 1.0).unwrap();
    let mut covered = 0;
    for seed in 0..5 {
        let data = trial(20_000, 1.0, 310 + seed);
        let curve = hr_curve(&data, &grid, 20, seed).unwrap();
        covered += curve.points.iter().filter(|p| p.ci_lower.unwrap() <= 0.0 && 0.0 <= p.ci_upper.unwrap()).count();
        let sel = select_timepoint(&curve).unwrap();
        assert!(sel.ivw.abs() < 3.0 * sel.min_variance.se, "{sel:?}");
    }
    // Points on one curve are strongly correlated, hence the loose bound.
    assert!(covered >= 24, "{covered} of 30 intervals cover 0");
}

#[test]
fn curve_tracks_truth_at_interior_times() {
    let data = trial(100_000, 0.47f64.exp(), 32);
    let curve = hr_curve(&data, &[3.0, 5.0, 7.0], 20, 6).unwrap();
    for p in &curve.points {
        let (est, se) = (p.log_theta.unwrap(), p.se.unwrap());
        assert!((est - 0.47).abs() <= 3.0 * se, "t={}: {est} (se {se})", p.t);
        assert!(p.ci_lower.unwrap() <= est && est <= p.ci_upper.unwrap());
    }
}

#[test]
fn study_rows_partition_intervals() {
    let cfg = ScenarioConfig::new(600, reference_model(0.47f64.exp()), 7.0, None, 33).unwrap();
    let res = run_sim_study(&cfg, &Estimand::ALL, 8, 10, 7.0).unwrap();
    for row in &res.rows {
        assert!((row.coverage + row.above + row.below - 1.0).abs() < 1e-12, "{}", row.estimator);
        assert!((row.mce - row.mcsd / (row.n_replicates as f64).sqrt()).abs() < 1e-15);
        assert_eq!(row.n_replicates + row.n_failed, 8);
    }
}

#[test]
fn too_few_study_replicates_is_an_error() {
    let cfg = ScenarioConfig::new(100, reference_model(1.0), 7.0, None, 1).unwrap();
    assert!(run_sim_study(&cfg, &[Estimand::LogThetaEe], 1, 10, 7.0).is_err());
}

fn arb_curve() -> impl Strategy<Value = HrCurve<f64>> {
    prop::collection::vec((-2.0..2.0f64, 0.01..1.0f64, any::<bool>()), 1..30).prop_map(|pts| HrCurve {
        points: pts
            .into_iter()
            .enumerate()
            .map(|(i, (e, s, missing))| HrPoint {
                t: 1.0 + i as f64 * 0.05,
                log_theta: (!missing || i == 0).then_some(e),
                se: (!missing || i == 0).then_some(s),
                ci_lower: None,
                ci_upper: None,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn selection_is_consistent(curve in arb_curve()) {
        let sel = select_timepoint(&curve).unwrap();
        let present: Vec<(f64, f64, f64)> =
            curve.points.iter().filter_map(|p| Some((p.t, p.log_theta?, p.se?))).collect();
        let lo = present.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = present.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= sel.ivw && sel.ivw <= hi + 1e-12);
        let first_min = present.iter().find(|p| p.2 == present.iter().map(|q| q.2).fold(f64::INFINITY, f64::min)).unwrap();
        prop_assert_eq!(sel.min_variance.t, first_min.0);
    }

    #[test]
    fn grids_are_increasing_and_end_at_stop(start in 0.0..5.0f64, len in 0.0..5.0f64, step in 0.01..1.0f64) {
        let g = regular_grid(start, start + len, step).unwrap();
        prop_assert_eq!(g[0], start);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*g.last().unwrap() <= start + len + 1e-9 * step.max(1.0));
        prop_assert!(start + len - g.last().unwrap() < step * (1.0 + 1e-9));
    }
}
