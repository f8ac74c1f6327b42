use std::sync::OnceLock;

use fusedchoice::dataset::ChoiceDataset;
use fusedchoice::estimate::{maximize_likelihood, EstimationConfig, EstimationResult};
use fusedchoice::mev::MevStructure;
use fusedchoice::poststat::{simulate_compensating_variation, Scenario, ScenarioKind, WelfareOptions};
use fusedchoice::sampling::{compute_alpha, compute_alpha_choice_based, AlphaWeights, SamplingProtocol};
use fusedchoice::stage1::OlsFit;
use fusedchoice::synth::{simulate_dataset, AltDgp, DgpConfig, SamplingDesign, PARAM_TIME};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn alt(label: &str, asc: f64, beta_cost: Option<f64>, price_intercept: f64) -> AltDgp {
    AltDgp {
        label: label.into(),
        asc,
        beta_cost,
        endogenous: false,
        price_intercept,
        availability: 1.0,
    }
}

fn config(n: usize, seed: u64) -> DgpConfig {
    DgpConfig {
        n,
        alternatives: vec![
            alt("walk", 0.0, None, 0.0),
            alt("transit", 0.3, Some(-0.7), 1.0),
            alt("car", 0.8, Some(-0.4), 2.0),
        ],
        beta_time: -1.0,
        time_range: [0.0, 2.0],
        instrument_range: [0.0, 2.0],
        gamma: 0.5,
        delta: 0.0,
        xi_std: 0.3,
        phi: 0.0,
        zones: 0,
        sampling: SamplingDesign::Random,
        seed,
    }
}

fn quiet() -> EstimationConfig {
    EstimationConfig {
        bootstrap: 0,
        asymptotic_std_errors: false,
        ..Default::default()
    }
}

/// A small fitted model and the data it was fitted on, shared by the welfare properties.
fn fitted() -> &'static (ChoiceDataset, EstimationResult) {
    static FIT: OnceLock<(ChoiceDataset, EstimationResult)> = OnceLock::new();
    FIT.get_or_init(|| {
        let c = config(2000, 41);
        let (d, _) = simulate_dataset(&c).unwrap();
        let alpha = AlphaWeights::Uniform { n_alternatives: 3 };
        let r = maximize_likelihood(&MevStructure::Mnl, &c.utility_spec(), &d, &alpha, &quiet()).unwrap();
        assert!(r.converged);
        let head: Vec<usize> = (0..40).collect();
        (d.select(&head), r)
    })
}

fn tax(amount: f64) -> Scenario {
    Scenario::new(
        "tax",
        ScenarioKind::FixedTax {
            alternatives: vec!["transit".into(), "car".into()],
            amount,
        },
    )
}

fn eliminate(alternatives: &[&str]) -> Scenario {
    Scenario::new(
        "drop",
        ScenarioKind::Eliminate {
            alternatives: alternatives.iter().map(|a| a.to_string()).collect(),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn welfare_is_monotone_in_the_tax(a in 0.0f64..5.0, b in 0.0f64..5.0, seed in 0u64..1000) {
        let (d, r) = fitted();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let opts = WelfareOptions { draws: 200, seed, group_by: None };
        let small = simulate_compensating_variation(r, d, &tax(lo), &opts).unwrap();
        let large = simulate_compensating_variation(r, d, &tax(hi), &opts).unwrap();
        for (x, y) in small.rows.iter().zip(&large.rows) {
            prop_assert!(x.nu >= 0.0 && x.nu <= y.nu, "{} > {}", x.nu, y.nu);
        }
    }

    #[test]
    fn removing_more_never_costs_less(seed in 0u64..1000) {
        let (d, r) = fitted();
        let opts = WelfareOptions { draws: 200, seed, group_by: None };
        let one = simulate_compensating_variation(r, d, &eliminate(&["walk"]), &opts).unwrap();
        let two = simulate_compensating_variation(r, d, &eliminate(&["walk", "car"]), &opts).unwrap();
        for (x, y) in one.rows.iter().zip(&two.rows) {
            prop_assert!(x.nu >= 0.0 && x.nu <= y.nu);
        }
    }

    #[test]
    fn general_protocol_reduces_to_share_ratio(
        raw_h in proptest::collection::vec(0.05f64..1.0, 3),
        raw_q in proptest::collection::vec(0.05f64..1.0, 3),
    ) {
        let (d, _) = fitted();
        let hs: f64 = raw_h.iter().sum();
        let qs: f64 = raw_q.iter().sum();
        let h: Vec<f64> = raw_h.iter().map(|x| x / hs).collect();
        let q: Vec<f64> = raw_q.iter().map(|x| x / qs).collect();
        let via_protocol = compute_alpha(&SamplingProtocol::choice_based(&h, &q), d).unwrap();
        let direct = compute_alpha_choice_based(&h, &q).unwrap();
        for n in 0..d.len() {
            for j in 0..3 {
                prop_assert_eq!(via_protocol.get(n, j), direct.get(n, j));
                prop_assert!((direct.get(n, j) - h[j] / q[j]).abs() <= 1e-15 * h[j] / q[j]);
            }
        }
    }

    #[test]
    fn ols_residual_identities(seed in 0u64..10_000, n in 20usize..400, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p + 1, |_, j| if j == 0 { 1.0 } else { rng.random_range(-3.0..3.0) });
        let y = DVector::from_fn(n, |i, _| 2.0 - x[(i, p)] + rng.random_range(-1.0..1.0));
        let names = (0..=p).map(|j| format!("x{j}")).collect();
        let fit = OlsFit::fit(&x, &y, names, true).unwrap();
        let e = DVector::from_vec(fit.residuals.clone());
        prop_assert!((x.transpose() * &e).amax() < 1e-8);
        prop_assert!(e.sum().abs() < 1e-8 * n as f64);
        for i in 0..n {
            prop_assert!((fit.fitted[i] + fit.residuals[i] - y[i]).abs() < 1e-10);
        }
        let sse: f64 = fit.residuals.iter().map(|r| r * r).sum();
        prop_assert!((fit.r_squared - (1.0 - sse / fit.sst)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fit.r_squared));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn rescaling_alpha_leaves_slopes_alone(
        c in 0.05f64..20.0,
        raw in proptest::collection::vec(0.2f64..5.0, 3),
    ) {
        let cfg = config(3000, 77);
        let (d, _) = simulate_dataset(&cfg).unwrap();
        let spec = cfg.utility_spec();
        let alpha = AlphaWeights::ByAlternative { values: raw.clone() };
        let base = maximize_likelihood(&MevStructure::Mnl, &spec, &d, &alpha, &quiet()).unwrap();
        let scaled = maximize_likelihood(&MevStructure::Mnl, &spec, &d, &alpha.scaled(c), &quiet()).unwrap();
        for name in [PARAM_TIME, "b_cost_transit", "b_cost_car"] {
            let (x, y) = (base.estimate(name).unwrap(), scaled.estimate(name).unwrap());
            prop_assert!((x - y).abs() < 1e-5, "{name}: {x} vs {y}");
        }
        prop_assert!((base.log_likelihood - scaled.log_likelihood).abs() < 1e-6);
    }
}
