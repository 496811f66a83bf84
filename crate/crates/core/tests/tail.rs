use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wealthtax_core::correction::{fit_pareto, run_pipeline, ParetoTail, PipelineConfig, StepToggles};
use wealthtax_core::syngen::Scenario;

fn pareto_draws(alpha: f64, w_min: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| w_min * (1.0 - rng.random::<f64>()).powf(-1.0 / alpha)).collect()
}

#[test]
fn hill_recovers_shape() {
    let xs = pareto_draws(1.5, 1e6, 100_000, 2024);
    let tail = fit_pareto(&xs, 1e6).unwrap();
    assert!((1.47..=1.53).contains(&tail.alpha), "{}", tail.alpha);
    assert_eq!(tail.n_fit, 100_000);
}

// Simpson's rule on x = w_min * e^s, where the Pareto density becomes a
// smooth exponential in s.
fn tail_mass_above(alpha: f64, w_min: f64, t: f64) -> f64 {
    let (a, b) = ((t / w_min).ln(), (t / w_min).ln() + 80.0 / (alpha - 1.0));
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |s: f64| w_min * alpha * (-(alpha - 1.0) * s).exp();
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn pareto_top_share_matches_integration() {
    for alpha in [1.5, 2.0, 3.0] {
        let tail = ParetoTail::known(alpha, 1e6);
        let total = tail_mass_above(alpha, 1e6, 1e6);
        for p in [0.1, 0.01] {
            let t = tail.at_survival(p);
            let oracle = tail_mass_above(alpha, 1e6, t) / total;
            assert!((tail.top_share(p) - oracle).abs() < 1e-9, "alpha {alpha} p {p}: {} vs {oracle}", tail.top_share(p));
        }
    }
    assert!((ParetoTail::known(2.0, 1e6).top_share(0.01) - 0.1).abs() < 1e-15);
}

#[test]
fn tail_step_adds_households_above_survey_maximum() {
    let data = Scenario::demo(4000, 3).build().unwrap();
    let mut cfg = PipelineConfig::disabled();
    cfg.steps = StepToggles { tail: true, portfolio: true, ..StepToggles::none() };
    let (out, report) = run_pipeline(&data.observed, &data.national_accounts, &data.rich_list, &cfg).unwrap();
    for (k, pop) in out.implicates().iter().enumerate() {
        let before = &data.observed.implicates()[k];
        let extra = &pop.records()[before.len()..];
        assert!(!extra.is_empty());
        for r in extra {
            let survey_max = before
                .records()
                .iter()
                .filter(|s| s.country == r.country)
                .map(|s| s.net_wealth())
                .fold(f64::MIN, f64::max);
            assert!(r.net_wealth() > survey_max * (1.0 - 1e-12), "{} {} vs {survey_max}", r.id, r.net_wealth());
        }
        let rep = &report.implicates[k];
        let sampled: usize = rep.tails.iter().map(|t| t.sampled + t.rich_list).sum();
        assert_eq!(pop.len(), before.len() + sampled);
    }
}
