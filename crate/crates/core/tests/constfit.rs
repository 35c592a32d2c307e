use std::time::Instant;

use odequery::constfit::{fit, fit_batch, EvalSet, FitConfig, FitProblem};
use odequery::dynamics::{integrate, Trajectory, NMSE_SENTINEL};
use odequery::oracle::{builtin_registry, find_entry, Domain, Oracle, OracleConfig};
use odequery::symbolic::{parse_system, OdeSystem};
use proptest::prelude::*;

fn training_data(truth: &str, domain: Domain, count: usize, seed: u64) -> Vec<Trajectory> {
    let system = parse_system(truth).unwrap().with_coefficients(vec![]);
    let mut cfg = OracleConfig::new(system, seed).unwrap();
    cfg.domain = domain;
    Oracle::new(cfg).unwrap().sample_training_batch(count, 1.0, 0.001).unwrap()
}

fn eval_set(data: &[Trajectory]) -> EvalSet {
    let cfg = FitConfig::default();
    EvalSet::subsample(data, cfg.eval_dt, cfg.max_trajectories, cfg.max_points, 0).unwrap()
}

fn fit_skeleton(skeleton: &str, data: &EvalSet, seed: u64) -> (Vec<f64>, f64) {
    let problem = FitProblem::new(parse_system(skeleton).unwrap(), data, &FitConfig::default(), seed);
    let r = fit(&problem).unwrap();
    (r.coefficients, r.nmse)
}

#[test]
fn growth_rate_recovered() {
    let data = training_data("0.23*x0", Domain::cube(1, -5.0, 5.0).unwrap(), 20, 1);
    let set = eval_set(&data);
    let (c, v) = fit_skeleton("c0*x0", &set, 7);
    assert!((0.2277..=0.2323).contains(&c[0]), "{c:?}");
    assert!(v < 1e-6, "{v}");
}

#[test]
fn stationary_constant_is_zero() {
    let data = training_data("0*x0", Domain::cube(1, -5.0, 5.0).unwrap(), 10, 2);
    let set = eval_set(&data);
    let (c, v) = fit_skeleton("c0", &set, 3);
    assert!(c[0].abs() < 1e-6, "{c:?}");
    assert!(v < 1e-9, "{v}");
}

#[test]
fn pendulum_coefficient() {
    let data = training_data("x1 ; -0.9*sin(x0)", Domain::cube(2, -3.0, 3.0).unwrap(), 20, 4);
    let set = eval_set(&data);
    let (c, v) = fit_skeleton("x1 ; c0*sin(x0)", &set, 11);
    assert!((-0.909..=-0.891).contains(&c[0]), "{c:?} {v}");
}

#[test]
fn constant_free_skeleton_is_evaluated_directly() {
    let data = training_data("-x0", Domain::cube(1, -5.0, 5.0).unwrap(), 5, 3);
    let set = eval_set(&data);
    let problem = FitProblem::new(parse_system("-x0").unwrap(), &set, &FitConfig::default(), 0);
    let r = fit(&problem).unwrap();
    assert!(r.coefficients.is_empty());
    assert_eq!(r.evals, 1);
    assert!(r.nmse < 1e-12, "{}", r.nmse);
}

#[test]
fn always_divergent_skeleton_gets_sentinel() {
    let data = training_data("-x0", Domain::cube(1, 1.0, 5.0).unwrap(), 5, 3);
    let set = eval_set(&data);
    let problem = FitProblem::new(parse_system("exp(exp(exp(x0)))+c0").unwrap(), &set, &FitConfig::default(), 0);
    let r = fit(&problem).unwrap();
    assert_eq!(r.nmse, NMSE_SENTINEL);
}

#[test]
fn incomplete_or_oversized_skeletons_are_rejected() {
    let data = training_data("-x0", Domain::cube(1, -5.0, 5.0).unwrap(), 3, 3);
    let set = eval_set(&data);
    let wide = (0..21).map(|i| format!("c{i}*x0")).collect::<Vec<_>>().join(" + ");
    let problem = FitProblem::new(parse_system(&wide).unwrap(), &set, &FitConfig::default(), 0);
    assert!(fit(&problem).is_err());
}

#[test]
fn batch_preserves_order_and_isolates_failures() {
    let data = training_data("0.23*x0", Domain::cube(1, -5.0, 5.0).unwrap(), 10, 5);
    let set = eval_set(&data);
    let cfg = FitConfig { max_evals: 150, ..FitConfig::default() };
    let skeletons = ["c0*x0", "c0*x0 + c1", "c0*x0*x0", "c0 + x0", "c0*x0 + c1*x0*x0"];
    let mut problems: Vec<FitProblem> = skeletons
        .iter()
        .enumerate()
        .map(|(i, s)| FitProblem::new(parse_system(s).unwrap(), &set, &cfg, i as u64))
        .collect();
    let wide = (0..21).map(|i| format!("c{i}*x0")).collect::<Vec<_>>().join(" + ");
    problems.insert(2, FitProblem::new(parse_system(&wide).unwrap(), &set, &cfg, 99));

    let serial = fit_batch(&problems, 1).results;
    let parallel = fit_batch(&problems, 4).results;
    assert_eq!(serial.len(), problems.len());
    assert_eq!(serial, parallel);
    assert_eq!(serial[2].nmse, NMSE_SENTINEL);
    assert!(serial[2].error.is_some());
    for (i, p) in problems.iter().enumerate() {
        if i == 2 {
            continue;
        }
        assert_eq!(serial[i], fit(p).unwrap(), "entry {i}");
    }
    assert!(serial[0].nmse < 1e-6);
}

/// Skeleton with every numeric literal of the truth replaced by a slot,
/// plus the literals themselves.
fn linear_skeleton(id: &str) -> (&'static str, Vec<f64>) {
    match id {
        "2" => ("c0*x0", vec![0.23]),
        "6" => ("c0*x0 - c1*x0^2", vec![2.1, 0.5]),
        "9" => ("c0 - c1*x0", vec![0.32, 0.6]),
        "11" => ("c0*x0^3", vec![-1.0]),
        "12" => ("c0*x0 - c1*x0^2", vec![1.8, 0.1107]),
        "21" => ("c0 - c1*x0 - exp(-x0)", vec![1.2, 0.2]),
        "1" => ("c0 - c1*x0", vec![0.7 / 2.31, 1.0 / (1.2 * 2.31)]),
        "16" => ("c0*x0 + c1*x0^3 - c2*x0^5", vec![0.1, 0.04, 0.001]),
        other => panic!("no skeleton for {other}"),
    }
}

#[test]
fn true_skeletons_of_one_variable_benchmarks() {
    let registry = builtin_registry("strogatz1").unwrap();
    let start = Instant::now();
    let mut recovered = 0;
    for id in ["2", "6", "9", "11", "12", "21", "1"] {
        let entry = find_entry(&registry, id).unwrap();
        let mut oracle = Oracle::new(entry.oracle_config(17)).unwrap();
        let data = oracle.sample_training_batch(20, 1.0, 0.001).unwrap();
        let set = eval_set(&data);
        let (skel, want) = linear_skeleton(id);
        let (c, v) = fit_skeleton(skel, &set, 5);
        let close = c.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 0.01 * b.abs());
        assert!(v < 1e-6, "id {id}: nmse {v}, c {c:?}");
        assert!(close, "id {id}: {c:?} vs {want:?}");
        recovered += 1;
    }
    assert!(recovered >= 5);
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn evaluate_matches_exact_system() {
    let data = training_data("0.23*x0", Domain::cube(1, -5.0, 5.0).unwrap(), 4, 8);
    let set = EvalSet::new(&data, 0.01).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set.n_points(), 400);
    let exact = parse_system("0.23*x0").unwrap().with_coefficients(vec![]);
    assert!(set.evaluate(&exact).unwrap() < 1e-12);
    let unfitted = parse_system("c0*x0").unwrap();
    assert!(set.evaluate(&unfitted).is_err());
}

#[test]
fn subsample_caps_points() {
    let data = training_data("-x0", Domain::cube(1, -5.0, 5.0).unwrap(), 30, 8);
    let set = EvalSet::subsample(&data, 0.001, 8, 1024, 4).unwrap();
    assert_eq!(set.len(), 8);
    assert!(set.n_points() <= 1024);
    let again = EvalSet::subsample(&data, 0.001, 8, 1024, 4).unwrap();
    let a: Vec<&[f64]> = set.initial_conditions().collect();
    let b: Vec<&[f64]> = again.initial_conditions().collect();
    assert_eq!(a, b);
}

fn with_coeffs(s: &str, c: Vec<f64>) -> OdeSystem {
    parse_system(s).unwrap().with_coefficients(c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn best_is_no_worse_than_any_start(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let data = training_data("0.5*x0 - 0.3*x0^2", Domain::cube(1, 0.0, 2.0).unwrap(), 6, seed);
        let set = eval_set(&data);
        let cfg = FitConfig { restarts: 1, max_evals: 120, ..FitConfig::default() };
        let mut problem = FitProblem::new(parse_system("c0*x0 + c1*x0^2").unwrap(), &set, &cfg, seed);
        problem.warm_start = Some(vec![a, b]);
        let r = fit(&problem).unwrap();
        let at_start = set.evaluate(&with_coeffs("c0*x0 + c1*x0^2", vec![a, b])).unwrap();
        let at_ones = set.evaluate(&with_coeffs("c0*x0 + c1*x0^2", vec![1.0, 1.0])).unwrap();
        prop_assert!(r.nmse <= at_start);
        prop_assert!(r.nmse <= at_ones);
        prop_assert_eq!(r.clone(), fit(&problem).unwrap());
    }
}

#[test]
fn data_from_integrate_matches_oracle_lattice() {
    let sys = parse_system("0.23*x0").unwrap().with_coefficients(vec![]);
    let grid = odequery::dynamics::TimeGrid::uniform(0.01, 1.0).unwrap();
    let t = integrate(&sys, &[1.0], &grid, 0.01).unwrap();
    let set = EvalSet::new(&[t], 0.01).unwrap();
    assert!(set.evaluate(&sys).unwrap() == 0.0);
}
