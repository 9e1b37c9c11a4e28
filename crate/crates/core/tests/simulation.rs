use approx::assert_relative_eq;
use ccbym2::graph::grid_graph;
use ccbym2::math::mean;
use ccbym2::sampler::SamplerConfig;
use ccbym2::simulation::{
    design_quantities, generate_dataset, prior_correction, run_simulation, run_study, scenario_for, score, trend_summary,
    Estimates, M3Settings, MapSpec, SimModel, SimScenario, SimTruth, StudyConfig, M1, M2,
};
use ccbym2::{Error, Result};
use proptest::prelude::*;

fn scenario(seed: u64) -> SimScenario {
    SimScenario {
        n: 1500,
        pi: 0.05,
        pi_hat: 0.4,
        autocorrelation: 0.6,
        map_name: "lattice_5x5".into(),
        graph: grid_graph(5, 5).unwrap(),
        seed,
    }
}

#[test]
fn generated_data_follow_the_design() {
    let s = scenario(17);
    let t = generate_dataset(&s).unwrap();
    let q = design_quantities(s.n, s.pi, s.pi_hat);
    assert_relative_eq!(mean(&t.rho), s.pi_hat, epsilon = 1e-9);
    assert_relative_eq!(mean(&t.gamma_true), 0.0, epsilon = 1e-12);
    assert_relative_eq!(t.log_offset, ((q.n1 + s.pi * q.n_u) / (s.pi * q.n_u)).ln(), epsilon = 1e-12);
    // labels only ever come from true cases
    assert!(t.y.iter().zip(&t.r).all(|(&y, &r)| y <= r));
    let share = t.y.iter().map(|&v| f64::from(v)).sum::<f64>() / s.n as f64;
    assert!((share - q.theta1 * s.pi_hat).abs() < 0.04, "{share}");
    let mut counts = [0; 25];
    t.small_area.iter().for_each(|&a| counts[a] += 1);
    assert!(counts.iter().all(|&c| c == 60));
    assert_eq!(generate_dataset(&s).unwrap(), t);
    assert_ne!(generate_dataset(&scenario(18)).unwrap().y, t.y);
}

#[test]
fn invalid_scenarios_are_rejected() {
    assert!(generate_dataset(&SimScenario { n: 50, ..scenario(1) }).is_err());
    assert!(generate_dataset(&SimScenario { pi: 0.7, ..scenario(1) }).is_err());
    assert!(generate_dataset(&SimScenario { autocorrelation: 1.0, ..scenario(1) }).is_err());
}

#[test]
fn m2_equals_m1_when_prevalence_matches_the_label_share() {
    let mut s = scenario(3);
    let t = generate_dataset(&s).unwrap();
    s.pi = mean(&t.y.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    let (a, b) = (M1.estimate(&s, &t).unwrap(), M2.estimate(&s, &t).unwrap());
    assert_eq!(a, b);
    assert_eq!(prior_correction(0.3, 0.3), 0.0);
    assert!(prior_correction(0.4, 0.05) > 0.0);
}

#[test]
fn fixed_effects_area_estimates_are_centred() {
    let s = scenario(5);
    let t = generate_dataset(&s).unwrap();
    let e = M1.estimate(&s, &t).unwrap();
    assert_relative_eq!(mean(&e.gamma), 0.0, epsilon = 1e-9);
    assert_eq!(e.mu_star.len(), s.n);
}

struct Flaky;

impl SimModel for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }
    fn estimate(&self, scenario: &SimScenario, truth: &SimTruth) -> Result<Estimates> {
        if !scenario.seed.is_multiple_of(3) {
            return Err(Error::Simulation("refused".into()));
        }
        M1.estimate(scenario, truth)
    }
}

#[test]
fn failed_models_trigger_redraws() {
    let config = StudyConfig { n_sims: 6, seed: 8, n_range: [100, 200], models: vec!["m1".into()], ..StudyConfig::default() };
    let res = run_study(&config, &[&Flaky]).unwrap();
    let done: Vec<usize> = res.rows.iter().map(|r| r.sim).collect();
    for (sim, redraws) in res.redraws.iter().enumerate() {
        let failed = res.failures.iter().any(|(s, _)| *s == sim);
        assert_eq!(done.contains(&sim), !failed);
        if !failed {
            let row = res.rows.iter().find(|r| r.sim == sim).unwrap();
            assert_eq!(row.attempt, *redraws);
            assert_eq!(row.seed % 3, 0);
        }
    }
}

#[test]
fn study_rows_replay_from_the_config() {
    let config = StudyConfig { n_sims: 4, seed: 2, n_range: [100, 300], models: vec!["m1".into(), "m2".into()], ..StudyConfig::default() };
    let models = config.build_models();
    let refs: Vec<&dyn SimModel> = models.iter().map(|m| m.as_ref()).collect();
    let res = run_study(&config, &refs).unwrap();
    assert_eq!(res.rows.len(), 4 * 2 * 4);
    let (rows, attempt, err) = run_simulation(&config, &refs, 2);
    assert!(err.is_none());
    let original: Vec<_> = res.rows.iter().filter(|r| r.sim == 2).cloned().collect();
    assert_eq!(rows, original);
    assert_eq!(scenario_for(&config, 2, attempt).unwrap().seed, rows[0].seed);
    // first half of the sims draw pi from the low-prevalence stage
    assert!(res.rows.iter().all(|r| (r.sim < 2) == (r.pi < 0.1)));
    let trend = trend_summary(&res.rows, "beta2", &[0.0, 0.5, 1.0]);
    assert!(!trend.is_empty());
}

/// Returns the true values, so every score must be trivial.
struct Oracle;

impl SimModel for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }
    fn estimate(&self, _: &SimScenario, t: &SimTruth) -> Result<Estimates> {
        Ok(Estimates {
            mu_star: t.mu_star.clone(),
            beta1: t.beta1_star,
            beta2: t.beta2,
            gamma: t.gamma_true.clone(),
            separated: false,
        })
    }
}

#[test]
fn oracle_estimates_score_perfectly() {
    let config = StudyConfig { n_sims: 3, seed: 4, n_range: [100, 200], models: vec!["m1".into()], ..StudyConfig::default() };
    let res = run_study(&config, &[&Oracle]).unwrap();
    assert_eq!(res.rows.len(), 3 * 4);
    for r in &res.rows {
        assert_eq!((r.bias, r.rmse_paper, r.rmse_strict), (0.0, 0.0, 0.0), "{}", r.quantity);
        match r.quantity.as_str() {
            "beta1" | "beta2" => assert_eq!(r.pearson, None),
            _ => assert_relative_eq!(r.pearson.unwrap(), 1.0, epsilon = 1e-12),
        }
    }
}

/// About 28 s on the single-core reference machine.
const SMOKE_BUDGET_SECS: f64 = 60.0;

#[test]
fn smoke_study_fits_the_budget() {
    let start = std::time::Instant::now();
    let config = StudyConfig {
        n_sims: 20,
        seed: 12,
        n_range: [300, 300],
        maps: vec![MapSpec::lattice(5, 5)],
        m3: M3Settings {
            sampler: SamplerConfig { n_chains: 2, n_iter: 400, n_warmup: 200, ..SamplerConfig::default() },
            max_divergence_rate: 0.05,
        },
        ..StudyConfig::default()
    };
    let models = config.build_models();
    let refs: Vec<&dyn SimModel> = models.iter().map(|m| m.as_ref()).collect();
    let res = run_study(&config, &refs).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(res.rows.len() + 3 * 4 * res.failures.len(), 20 * 3 * 4);
    assert!(res.failures.is_empty(), "{:?}", res.failures);
    assert!(res.rows.iter().all(|r| r.n == 300 && r.bias.is_finite()));
    assert!(secs < SMOKE_BUDGET_SECS, "smoke study took {secs:.0} s");
}

proptest! {
    #[test]
    fn scores_ignore_common_translation(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30),
        shift in -100.0f64..100.0,
    ) {
        let (est, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = score(&est, &truth).unwrap();
        let moved_e: Vec<f64> = est.iter().map(|v| v + shift).collect();
        let moved_t: Vec<f64> = truth.iter().map(|v| v + shift).collect();
        let b = score(&moved_e, &moved_t).unwrap();
        prop_assert!((a.bias - b.bias).abs() < 1e-9);
        prop_assert!((a.rmse_paper - b.rmse_paper).abs() < 1e-8);
        prop_assert!((a.rmse_strict * a.rmse_strict - a.rmse_paper).abs() < 1e-9);
        match (a.pearson, b.pearson) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-6),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }
}
