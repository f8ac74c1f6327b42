use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{Alternative, AttributeSchema, Observation};

fn labels(j: usize) -> Vec<String> {
    (0..j).map(|i| format!("a{i}")).collect()
}

/// Dataset whose single alternative attribute `x` is given per observation.
fn dataset_from(xs: &[Vec<f64>], chosen: &[usize], avail: Option<&[Vec<bool>]>) -> ChoiceDataset {
    let j = xs[0].len();
    let alts = labels(j)
        .into_iter()
        .enumerate()
        .map(|(id, label)| Alternative { id, label })
        .collect();
    let obs = xs
        .iter()
        .enumerate()
        .map(|(n, row)| Observation {
            obs_id: n as i64,
            chosen: chosen[n],
            available: avail.map_or(vec![true; j], |a| a[n].clone()),
            alt_attrs: row.iter().map(|x| vec![*x]).collect(),
            trip_attrs: vec![],
            subsample_id: 0,
            weight: 1.0,
        })
        .collect();
    ChoiceDataset::new(alts, 0, AttributeSchema::new(["x"], Vec::<String>::new()), obs).unwrap()
}

/// `V = x` through one generic coefficient held at 1.
fn identity_spec() -> (UtilitySpec, ParameterVector) {
    let spec = UtilitySpec::new(vec![Term::Generic {
        attribute: "x".into(),
        alternatives: vec![],
        param: "one".into(),
    }]);
    (spec, ParameterVector::from_pairs([("one", 1.0)]).unwrap())
}

fn two_alt_cost_time() -> ChoiceDataset {
    let alts = vec![
        Alternative {
            id: 0,
            label: "a".into(),
        },
        Alternative {
            id: 1,
            label: "b".into(),
        },
    ];
    let obs = vec![Observation {
        obs_id: 0,
        chosen: 0,
        available: vec![true, true],
        alt_attrs: vec![vec![2.0, 10.0], vec![4.0, 10.0]],
        trip_attrs: vec![],
        subsample_id: 0,
        weight: 1.0,
    }];
    ChoiceDataset::new(
        alts,
        0,
        AttributeSchema::new(["cost", "time"], Vec::<String>::new()),
        obs,
    )
    .unwrap()
}

#[test]
fn utility_examples() {
    let ds = two_alt_cost_time();
    let v = systematic_utility(&UtilitySpec::default(), &ParameterVector::default(), &ds, 0).unwrap();
    assert_eq!(v, vec![0.0, 0.0]);

    let spec = UtilitySpec::new(vec![Term::Generic {
        attribute: "cost".into(),
        alternatives: vec![],
        param: "b_cost".into(),
    }]);
    let p = ParameterVector::from_pairs([("b_cost", -0.1)]).unwrap();
    let v = systematic_utility(&spec, &p, &ds, 0).unwrap();
    assert_abs_diff_eq!(v[0], -0.2, epsilon = 1e-15);
    assert_abs_diff_eq!(v[1], -0.4, epsilon = 1e-15);

    let spec = UtilitySpec::new(vec![
        Term::Asc {
            alternative: "b".into(),
            param: "asc_b".into(),
        },
        Term::Generic {
            attribute: "time".into(),
            alternatives: vec![],
            param: "b_time".into(),
        },
    ]);
    let p = ParameterVector::from_pairs([("asc_b", 0.5), ("b_time", -0.06)]).unwrap();
    let v = systematic_utility(&spec, &p, &ds, 0).unwrap();
    assert_abs_diff_eq!(v[0], -0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(v[1], -0.1, epsilon = 1e-12);
}

#[test]
fn spec_errors_name_the_term() {
    let ds = two_alt_cost_time();
    let spec = UtilitySpec::new(vec![Term::Generic {
        attribute: "fare".into(),
        alternatives: vec![],
        param: "b".into(),
    }]);
    let err = Model::new(&MevStructure::Mnl, &spec, &ds).unwrap_err();
    assert!(err.to_string().contains("generic(fare"), "{err}");

    let spec = UtilitySpec::new(vec![Term::Asc {
        alternative: "a".into(),
        param: "asc_a".into(),
    }]);
    let err = Model::new(&MevStructure::Mnl, &spec, &ds).unwrap_err();
    assert!(err.to_string().contains("reference"), "{err}");

    let spec = UtilitySpec::new(vec![Term::Asc {
        alternative: "b".into(),
        param: "asc_b".into(),
    }]);
    let err = systematic_utility(&spec, &ParameterVector::default(), &ds, 0).unwrap_err();
    assert!(err.to_string().contains("asc_b"), "{err}");
}

#[test]
fn trip_specific_and_cyclic_terms() {
    let alts = vec![
        Alternative {
            id: 0,
            label: "car".into(),
        },
        Alternative {
            id: 1,
            label: "taxi".into(),
        },
    ];
    let obs = vec![Observation {
        obs_id: 0,
        chosen: 1,
        available: vec![true, true],
        alt_attrs: vec![vec![], vec![]],
        trip_attrs: vec![2.0, 360.0],
        subsample_id: 0,
        weight: 1.0,
    }];
    let ds = ChoiceDataset::new(
        alts,
        0,
        AttributeSchema::new(Vec::<String>::new(), ["income", "dep"]),
        obs,
    )
    .unwrap();
    let spec = UtilitySpec::new(vec![
        Term::TripSpecific {
            attribute: "income".into(),
            alternatives: vec!["taxi".into()],
            prefix: "b_inc".into(),
        },
        Term::CyclicTime {
            attribute: "dep".into(),
            alternative: "taxi".into(),
            prefix: "dt".into(),
        },
    ]);
    let mut p = ParameterVector::from_pairs([("b_inc_taxi", 0.25)]).unwrap();
    for (i, s) in CYCLIC_SUFFIXES.iter().enumerate() {
        p.set(&format!("dt_{s}"), (i + 1) as f64);
    }
    let v = systematic_utility(&spec, &p, &ds, 0).unwrap();
    // features at t = 360: (1, 0, -1, 0, -1, 0)
    assert_eq!(v[0], 0.0);
    assert_abs_diff_eq!(v[1], 0.5 + 1.0 - 3.0 - 5.0, epsilon = 1e-12);

    let bad = UtilitySpec::new(vec![Term::TripSpecific {
        attribute: "income".into(),
        alternatives: vec!["car".into()],
        prefix: "b".into(),
    }]);
    assert!(Model::new(&MevStructure::Mnl, &bad, &ds).is_err());
}

fn nested(groups: &[&[usize]], params: &[&str]) -> MevStructure {
    MevStructure::Nested {
        nests: groups
            .iter()
            .zip(params)
            .enumerate()
            .map(|(m, (g, p))| Nest {
                name: format!("n{m}"),
                alternatives: g.iter().map(|j| format!("a{j}")).collect(),
                param: p.to_string(),
            })
            .collect(),
    }
}

#[test]
fn log_g_examples() {
    let l = labels(3);
    let all = [true; 3];
    let p = ParameterVector::from_pairs([("lam", 1.0), ("lam2", 1.0)]).unwrap();
    assert_eq!(
        log_g_derivative(&MevStructure::Mnl, &l, &[1.0, -2.0, 3.0], &all, &p).unwrap(),
        vec![0.0; 3]
    );
    let s = nested(&[&[0], &[1, 2]], &["lam", "lam2"]);
    let g = log_g_derivative(&s, &l, &[1.0, -2.0, 3.0], &all, &p).unwrap();
    for x in g {
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-15);
    }
    let p = ParameterVector::from_pairs([("lam", 1.0), ("lam2", 0.5)]).unwrap();
    let g = log_g_derivative(&s, &l, &[0.0, 0.0, 0.0], &all, &p).unwrap();
    assert_abs_diff_eq!(g[1], -0.5 * 2f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(g[2], -0.34657, epsilon = 1e-5);
    let p = ParameterVector::from_pairs([("lam", 1.0), ("lam2", 0.0)]).unwrap();
    assert!(matches!(
        log_g_derivative(&s, &l, &[0.0; 3], &all, &p),
        Err(Error::Domain(_))
    ));
}

#[test]
fn probability_examples() {
    let (spec, p) = identity_spec();
    let ds = dataset_from(&[vec![0.0, 0.0], vec![0.0, 3f64.ln()]], &[0, 1], None);
    let pr = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 0, None).unwrap();
    assert_eq!(pr, vec![0.5, 0.5]);
    let pr = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 1, None).unwrap();
    assert_abs_diff_eq!(pr[0], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(pr[1], 0.75, epsilon = 1e-15);
    let alpha = AlphaWeights::ByAlternative { values: vec![1.0, 3.0] };
    let pr = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 0, Some(&alpha)).unwrap();
    assert_abs_diff_eq!(pr[0], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(pr[1], 0.75, epsilon = 1e-15);
}

#[test]
fn log_likelihood_examples() {
    let (spec, p) = identity_spec();
    let ds = dataset_from(&[vec![0.0, 0.0]], &[0], None);
    let ll = corrected_log_likelihood(
        &MevStructure::Mnl,
        &spec,
        &p,
        &ds,
        &AlphaWeights::Uniform { n_alternatives: 2 },
    )
    .unwrap();
    assert_abs_diff_eq!(ll, 0.5f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(ll, -std::f64::consts::LN_2, epsilon = 1e-12);
    let ds = dataset_from(&[vec![0.0, 0.0]], &[1], None);
    let alpha = AlphaWeights::ByAlternative { values: vec![1.0, 3.0] };
    let ll = corrected_log_likelihood(&MevStructure::Mnl, &spec, &p, &ds, &alpha).unwrap();
    assert_abs_diff_eq!(ll, 0.75f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(ll, -0.287682, epsilon = 1e-6);
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    j: usize,
    spread: f64,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<bool>>) {
    let mut xs = Vec::new();
    let mut chosen = Vec::new();
    let mut avail = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..j).map(|_| rng.random_range(-spread..spread)).collect();
        let mut a: Vec<bool> = (0..j).map(|_| rng.random_bool(0.8)).collect();
        a[0] = true;
        a[1] = true;
        let options: Vec<usize> = (0..j).filter(|&k| a[k]).collect();
        chosen.push(options[rng.random_range(0..options.len())]);
        xs.push(row);
        avail.push(a);
    }
    (xs, chosen, avail)
}

/// Plain MNL log-likelihood written straight from the softmax.
fn reference_mnl_loglik(xs: &[Vec<f64>], chosen: &[usize], avail: &[Vec<bool>]) -> f64 {
    xs.iter()
        .zip(chosen)
        .zip(avail)
        .map(|((v, &y), a)| {
            let denom: f64 = v.iter().zip(a).filter(|(_, ok)| **ok).map(|(x, _)| x.exp()).sum();
            v[y] - denom.ln()
        })
        .sum()
}

#[test]
fn unit_alpha_matches_ordinary_loglik() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (xs, chosen, avail) = random_instance(&mut rng, 50, 4, 3.0);
    let ds = dataset_from(&xs, &chosen, Some(&avail));
    let (spec, p) = identity_spec();
    let ll = corrected_log_likelihood(
        &MevStructure::Mnl,
        &spec,
        &p,
        &ds,
        &AlphaWeights::Uniform { n_alternatives: 4 },
    )
    .unwrap();
    assert!((ll - reference_mnl_loglik(&xs, &chosen, &avail)).abs() < 1e-12);
}

#[test]
fn corrected_probability_matches_bayes_rule() {
    // P(j) α_j / Σ P(j') α_j' with P the uncorrected MNL probability
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (spec, p) = identity_spec();
    for trial in 0..200 {
        let j = 2 + trial % 4;
        let (xs, chosen, avail) = random_instance(&mut rng, 1, j, 5.0);
        let ds = dataset_from(&xs, &chosen, Some(&avail));
        let alpha: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..20.0)).collect();
        let weights = AlphaWeights::ByAlternative { values: alpha.clone() };
        let got = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 0, Some(&weights)).unwrap();
        let plain: Vec<f64> = (0..j).map(|k| if avail[0][k] { xs[0][k].exp() } else { 0.0 }).collect();
        let total: f64 = plain.iter().sum();
        let pa: Vec<f64> = (0..j).map(|k| plain[k] / total * alpha[k]).collect();
        let norm: f64 = pa.iter().sum();
        for k in 0..j {
            assert!((got[k] - pa[k] / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn absent_parameter_has_zero_gradient() {
    let (spec, _) = identity_spec();
    let ds = dataset_from(&[vec![0.3, -0.2], vec![1.0, 0.5]], &[0, 1], None);
    let p = ParameterVector::from_pairs([("one", 0.7), ("unused", 2.0)]).unwrap();
    let g = gradient(
        &MevStructure::Mnl,
        &spec,
        &p,
        &ds,
        &AlphaWeights::Uniform { n_alternatives: 2 },
    )
    .unwrap();
    assert_eq!(g[1], 0.0);
    assert!(g[0] != 0.0);
}

fn central_difference(model: &Model, theta: &[f64], alpha: Option<&AlphaWeights>, h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            (model.log_likelihood(&up, alpha).unwrap() - model.log_likelihood(&dn, alpha).unwrap()) / (2.0 * h)
        })
        .collect()
}

#[test]
fn nested_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (xs, chosen, avail) = random_instance(&mut rng, 40, 5, 2.0);
    let ds = dataset_from(&xs, &chosen, Some(&avail));
    let spec = UtilitySpec::new(vec![
        Term::Generic {
            attribute: "x".into(),
            alternatives: vec![],
            param: "bx".into(),
        },
        Term::Asc {
            alternative: "a2".into(),
            param: "asc2".into(),
        },
        Term::AltSpecific {
            attribute: "x".into(),
            alternative: "a3".into(),
            param: "bx3".into(),
        },
    ]);
    let s = nested(&[&[0, 1], &[2, 3, 4]], &["l1", "l2"]);
    let model = Model::new(&s, &spec, &ds).unwrap();
    let theta = vec![0.8, -0.4, 0.3, 0.6, 0.45];
    let alpha = AlphaWeights::ByAlternative {
        values: vec![0.5, 2.0, 1.0, 3.0, 0.2],
    };
    let (_, g) = model.log_likelihood_and_gradient(&theta, Some(&alpha)).unwrap();
    let fd = central_difference(&model, &theta, Some(&alpha), 1e-5);
    for (a, b) in g.iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn huge_utilities_are_rejected() {
    let (spec, _) = identity_spec();
    let ds = dataset_from(&[vec![0.0, 800.0]], &[0], None);
    let p = ParameterVector::from_pairs([("one", 1.0)]).unwrap();
    let err = corrected_log_likelihood(
        &MevStructure::Mnl,
        &spec,
        &p,
        &ds,
        &AlphaWeights::Uniform { n_alternatives: 2 },
    )
    .unwrap_err();
    assert!(err.is_numerical());
}

proptest! {
    #[test]
    fn probabilities_sum_to_one_and_are_translation_invariant(
        v in proptest::collection::vec(-50.0f64..50.0, 2..8),
        shift in -20.0f64..20.0,
    ) {
        let (spec, p) = identity_spec();
        let j = v.len();
        let ds = dataset_from(std::slice::from_ref(&v), &[0], None);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let ds2 = dataset_from(&[shifted], &[0], None);
        let a = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 0, None).unwrap();
        let b = choice_probability(&MevStructure::Mnl, &spec, &p, &ds2, 0, None).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..j {
            prop_assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_lambda_nested_equals_mnl(
        v in proptest::collection::vec(-50.0f64..50.0, 2..8),
        split in 1usize..7,
    ) {
        let (spec, mut p) = identity_spec();
        let j = v.len();
        let split = split.min(j - 1);
        let first: Vec<usize> = (0..split).collect();
        let second: Vec<usize> = (split..j).collect();
        let s = nested(&[&first, &second], &["l1", "l2"]);
        p.set("l1", 1.0);
        p.set("l2", 1.0);
        let ds = dataset_from(&[v], &[0], None);
        let a = choice_probability(&MevStructure::Mnl, &spec, &p, &ds, 0, None).unwrap();
        let b = choice_probability(&s, &spec, &p, &ds, 0, None).unwrap();
        for k in 0..j {
            prop_assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
}
