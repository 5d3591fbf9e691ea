use rayon::prelude::*;
use screening_iv::data::{Arm, EventType, TrialDataset};
use screening_iv::estimators::cumulative_incidence;
use screening_iv::rng;
use screening_iv::simulate::{reference_model, simulate_path, simulate_trial, Referral, ScenarioConfig};
use screening_iv::truth::true_subgroup_quantities;

fn trial(n: usize, theta: f64, seed: u64) -> TrialDataset<f64> {
    simulate_trial(&ScenarioConfig::new(n, reference_model(theta), 7.0, None, seed).unwrap()).unwrap()
}

/// Maps (event_time, event_type) onto one line so that equal joint laws give equal
/// one-dimensional laws.
fn outcome_key(data: &TrialDataset<f64>, arm: Arm) -> Vec<f64> {
    let mut v: Vec<f64> = data
        .arm(arm)
        .map(|r| {
            let slot = match r.event_type {
                EventType::Censored => 0.0,
                EventType::CancerDeath => 1.0,
                EventType::OtherDeath => 2.0,
            };
            r.event_time + 10.0 * slot
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn null_effect_arms_are_equal_in_law() {
    let rejections = (0..20u64)
        .filter(|&seed| {
            let data = trial(200_000, 1.0, 100 + seed);
            let (a, b) = (outcome_key(&data, Arm::Control), outcome_key(&data, Arm::Screening));
            let (n, m) = (a.len() as f64, b.len() as f64);
            ks_statistic(&a, &b) > 1.628 * ((n + m) / (n * m)).sqrt()
        })
        .count();
    // Expected 0.2 false positives at the 1% level; three or more has probability < 0.002.
    assert!(rejections <= 2, "{rejections} of 20 seeds rejected");
}

#[test]
fn null_effect_cancer_incidence_matches_across_arms() {
    let data = trial(100_000, 1.0, 7);
    let c = cumulative_incidence(&data, Arm::Control, EventType::CancerDeath, 7.0);
    let s = cumulative_incidence(&data, Arm::Screening, EventType::CancerDeath, 7.0);
    let se = (c * (1.0 - c) / 50_000.0 * 2.0).sqrt();
    assert!((c - s).abs() <= 3.0 * se, "control {c} screening {s}");
}

#[test]
fn delayed_treatment_raises_control_mortality() {
    let data = trial(100_000, 1.6, 8);
    let c = cumulative_incidence(&data, Arm::Control, EventType::CancerDeath, 7.0);
    let s = cumulative_incidence(&data, Arm::Screening, EventType::CancerDeath, 7.0);
    assert!(c > s, "control {c} screening {s}");
}

#[test]
fn state_occupation_matches_quadrature() {
    let model = reference_model(1.6);
    let n = 100_000usize;
    let t = 7.0;
    let counts = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = simulate_path(&model, Referral::Early, 1.0, &mut rng::stream(11, i as u64));
            let state = if p.terminal_time <= t {
                if p.terminal == EventType::CancerDeath {
                    2
                } else {
                    3
                }
            } else if p.detect_time.is_some_and(|d| d <= t) {
                1
            } else {
                0
            };
            let mut c = [0usize; 4];
            c[state] = 1;
            c
        })
        .reduce(|| [0; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);
    assert_eq!(counts.iter().sum::<usize>(), n);
    let truth = true_subgroup_quantities(&model, t).unwrap().screening.occupation();
    assert!((truth.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    for (k, (&c, &p)) in counts.iter().zip(&truth).enumerate() {
        let est = c as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((est - p).abs() <= 4.0 * se, "state {}: {est} vs {p}", k + 1);
    }
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let cfg = ScenarioConfig::new(5_000, reference_model(1.6), 7.0, None, 99).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate_trial(&cfg).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn simulation_is_generic_over_f32() {
    let cfg = ScenarioConfig::new(20_000, reference_model(1.6f32), 7.0, None, 5).unwrap();
    let data = simulate_trial(&cfg).unwrap();
    let detected = data.arm(Arm::Screening).filter(|r| r.detect_time.is_some()).count() as f32;
    let screened = data.arm(Arm::Screening).count() as f32;
    assert!(detected / screened > 0.5);
}
