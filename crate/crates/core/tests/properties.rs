use magic_iv::baselines::{ratio_pair, tsls};
use magic_iv::cue::CueOptions;
use magic_iv::oracle::{self, population_moment, ratio_variance, PopulationDgp};
use magic_iv::simulate::{gen_dataset, run_monte_carlo, McMethod, NormalStream, Scenario, ScenarioConfig};
use magic_iv::{fit, Dataset, FitOptions};

/// Draws `n` rows from an independent-instrument population with noise
/// `(eps, nu)` of unit variances and covariance `rho`.
fn sample(dgp: &PopulationDgp, mu: &[f64], n: usize, rho: f64, seed: u64, rep: u64) -> Dataset {
    let mut rng = NormalStream::new(seed, rep);
    let (mut y, mut d, mut rows) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z: Vec<f64> = mu.iter().map(|&m| rng.bernoulli(m)).collect();
        let nu = rng.standard_normal();
        let eps = rho * nu + (1.0 - rho * rho).sqrt() * rng.standard_normal();
        d.push(dgp.exposure_mean(&z) + nu);
        y.push(dgp.outcome_mean(&z) + dgp.beta_true * nu + eps);
        rows.push(z);
    }
    Dataset::from_rows(y, d, &rows).unwrap()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn ratio_sampling_spread_matches_the_oracle() {
    let dgp = oracle::default_fixture();
    let (n, reps) = (100_000, 60);
    let oracle_se = (ratio_variance(&dgp, 0, 1, 1.0).unwrap() / n as f64).sqrt();
    let mut draws = Vec::new();
    for rep in 0..reps {
        let ds = sample(&dgp, &[0.5, 0.5], n, 0.25, 21, rep);
        let r = ratio_pair(&ds, 0, 1).unwrap();
        assert!(
            (r.se / oracle_se - 1.0).abs() < 0.05,
            "delta-method se {} vs {}",
            r.se,
            oracle_se
        );
        draws.push(r.beta_hat);
    }
    let (m, sd) = mean_sd(&draws);
    assert!(
        (m - dgp.beta_true).abs() < 3.0 * oracle_se / (reps as f64).sqrt(),
        "mean {m}"
    );
    assert!((sd / oracle_se - 1.0).abs() < 0.25, "sd {sd} vs oracle {oracle_se}");
}

#[test]
fn sample_moment_converges_to_the_population_moment() {
    // an outcome interaction makes the moment nonzero at the truth
    let mu = [0.3, 0.6];
    let dgp = PopulationDgp::independent(mu.to_vec(), 1.0)
        .with_theta(vec![0.5, -0.4])
        .with_pi(vec![0.2, 0.3])
        .with_exposure_term(vec![0, 1], 1.0)
        .with_outcome_term(vec![0, 1], 0.8);
    let target = population_moment(&dgp, 1.0, 2).unwrap()[0];
    let mut draws = Vec::new();
    for rep in 0..80 {
        let ds = sample(&dgp, &mu, 20_000, 0.25, 33, rep);
        let f = fit(&ds, &FitOptions::default()).unwrap();
        draws.push(f.components.gbar(1.0)[0]);
    }
    let (m, sd) = mean_sd(&draws);
    let mc_se = sd / (draws.len() as f64).sqrt();
    assert!(
        (m - target).abs() < 4.0 * mc_se,
        "mean {m}, population {target}, mc se {mc_se}"
    );
}

#[test]
fn standard_error_tracks_the_sampling_spread() {
    let cfg = ScenarioConfig {
        p: 5,
        n: 2000,
        c: 12.0,
        scenario: Scenario::I,
        seed: 5,
        ..Default::default()
    };
    let s = run_monte_carlo(&cfg, 200, &[McMethod::Magic], &CueOptions::default(), 0).unwrap();
    let m = &s.methods[&McMethod::Magic];
    assert!((m.mean_se / m.sd - 1.0).abs() < 0.2, "se {} vs sd {}", m.mean_se, m.sd);
    assert!(m.coverage_95 > 0.9);
}

#[test]
fn direct_effects_bias_tsls_but_not_magic() {
    let run = |pi_mean: f64| {
        let cfg = ScenarioConfig {
            p: 5,
            n: 2000,
            c: 12.0,
            scenario: Scenario::Custom,
            pi_mean: Some(pi_mean),
            pi_var: Some(0.0),
            seed: 9,
            ..Default::default()
        };
        let mut t = Vec::new();
        let mut m = Vec::new();
        for rep in 0..40 {
            let (ds, truth) = gen_dataset(&cfg, rep).unwrap();
            t.push(tsls(&ds).unwrap().beta_hat - truth.beta);
            m.push(fit(&ds, &FitOptions::default()).unwrap().cue.beta_hat - truth.beta);
        }
        (mean_sd(&t).0, mean_sd(&m))
    };
    let (tsls_valid, _) = run(0.0);
    let (tsls_invalid, (magic_bias, magic_sd)) = run(0.3);
    assert!(tsls_valid.abs() < 0.02, "tsls with valid instruments: {tsls_valid}");
    assert!(tsls_invalid > 0.1, "tsls with direct effects: {tsls_invalid}");
    assert!(
        magic_bias.abs() < 3.0 * magic_sd / 40f64.sqrt(),
        "magic bias {magic_bias}"
    );
}

#[test]
fn simulated_instruments_follow_their_law() {
    let cfg = ScenarioConfig {
        p: 4,
        n: 20_000,
        mu: 0.3,
        seed: 2,
        ..Default::default()
    };
    let (ds, truth) = gen_dataset(&cfg, 0).unwrap();
    assert_eq!(truth.alpha, vec![cfg.c / (cfg.n as f64).sqrt(); 6]);
    assert!(truth.phi.is_empty());
    let n = ds.n() as f64;
    let means: Vec<f64> = (0..4).map(|j| ds.z_col(j).sum::<f64>() / n).collect();
    for m in &means {
        assert!((m - 0.3).abs() < 4.0 * (0.21 / n).sqrt(), "mean {m}");
    }
    let cov = ds
        .z_col(0)
        .zip(ds.z_col(1))
        .map(|(a, b)| (a - means[0]) * (b - means[1]))
        .sum::<f64>()
        / n;
    assert!(cov.abs() < 4.0 * 0.21 / n.sqrt(), "cov {cov}");
    assert!(ds.z().iter().all(|&z| z == 0.0 || z == 1.0));
}

#[test]
fn replications_are_keyed_by_seed_and_index() {
    let cfg = ScenarioConfig {
        p: 3,
        n: 300,
        ..Default::default()
    };
    let (a, _) = gen_dataset(&cfg, 4).unwrap();
    let (b, _) = gen_dataset(&cfg, 4).unwrap();
    let (c, _) = gen_dataset(&cfg, 5).unwrap();
    let (d, _) = gen_dataset(&ScenarioConfig { seed: 2, ..cfg }, 4).unwrap();
    assert_eq!(a.y(), b.y());
    assert_ne!(a.y(), c.y());
    assert_ne!(a.y(), d.y());
}
