mod common;

use common::{
    dyadic_norms, observed_constants, one_activation, quadratic_experiment, random_schedule_plan, rel, scaling_spread,
    uniform_plan,
};
use mafl::bound::{eval_bound, eval_conv_lhs, geometric_staleness_factor, staleness_term};
use mafl::scheduling::{round_robin, Schedule, ScheduleLimits, ScheduleTensor};
use mafl::simulator::run;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn one_activation_lhs_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let g_n = rng.random_range(1..=12);
        let limits = ScheduleLimits { staleness_limit: rng.random_range(0..4), num_aggregations: g_n };
        let devices = rng.random_range(1..=4);
        let t = one_activation(&mut rng, devices, limits);
        let norms = dyadic_norms(&mut rng, g_n);
        let mean = norms.iter().sum::<f64>() / g_n as f64;
        assert_eq!(eval_conv_lhs(&norms, &t).unwrap(), mean);
    }
}

#[test]
fn repeated_activation_lhs_is_at_least_the_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let g_n = rng.random_range(1..=12);
        let devices = rng.random_range(1..=4);
        let k = rng.random_range(0..4);
        let mut triples = Vec::new();
        for g in 0..g_n {
            for _ in 0..rng.random_range(1..=3) {
                let last = (g + k).min(g_n - 1);
                triples.push((rng.random_range(0..devices), g, rng.random_range(g..=last)));
            }
        }
        let limits = ScheduleLimits { staleness_limit: k, num_aggregations: g_n };
        let t = ScheduleTensor::from_triples(devices, limits, &triples).unwrap();
        let norms = dyadic_norms(&mut rng, g_n);
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(eval_conv_lhs(&norms, &t).unwrap() >= min);
    }
}

#[test]
fn geometric_factor_matches_series() {
    for ka in [0.0, 0.5, 1.0, 1.5, 2.0] {
        for gp in 0..=20usize {
            let series: f64 = (0..gp).map(|k| f64::powi(ka, k as i32)).sum();
            assert!(rel(geometric_staleness_factor(ka, gp), series) <= 1e-12, "kα={ka} g'={gp}");
        }
    }
    // the kα = 1 case is the limit of the closed form
    for gp in 1..=20usize {
        let near = geometric_staleness_factor(1.0 + 1e-9, gp);
        assert!(rel(near, gp as f64) < 1e-6);
    }
}

#[test]
fn term_structure() {
    let exp = quadratic_experiment(3, &[(6, 2)], 1);
    let s = &exp.scenario;
    let sizes: Vec<usize> = s.devices.iter().map(|d| d.dataset_sizes[0]).collect();
    let c = common::exact_constants(&exp, 2.0, 3.0, 1.5);
    let limits = ScheduleLimits { staleness_limit: 2, num_aggregations: 6 };
    let schedule = Schedule { tasks: vec![round_robin(3, limits)] };
    let full = uniform_plan(s, &schedule, 2, true).expect("full-batch plan");
    let r = eval_bound(&s.tasks[0], &sizes, &schedule.tasks[0], &full.tasks[0], &c[0]).unwrap();
    assert_eq!(r.term_c, 0.0);
    assert!(r.term_b > 0.0 && r.term_d > 0.0 && r.term_e > 0.0);
    assert!(rel(r.total, r.term_a + r.term_b + r.term_c + r.term_d + r.term_e) < 1e-15);
    let per: f64 = r.per_aggregation.iter().map(|p| p.b + p.c + p.d + p.e).sum();
    assert!(rel(per, r.term_b + r.term_c + r.term_d + r.term_e) < 1e-12);

    // term (b) recomputed entry by entry
    let t = &s.tasks[0];
    let inv = 1.0 / (t.num_aggregations as f64 * t.eta_min());
    let b: f64 = schedule.tasks[0]
        .entries
        .iter()
        .map(|&(i, g, _)| inv * t.eta(g) * full.tasks[0].entries[i][g].sgd_iters as f64 * c[0].dissimilarity[i][g])
        .sum();
    assert!(rel(r.term_b, b) < 1e-12);

    // single-sample batches switch the variance term on
    let small = uniform_plan(s, &schedule, 2, false).expect("unit-batch plan");
    let r = eval_bound(&s.tasks[0], &sizes, &schedule.tasks[0], &small.tasks[0], &c[0]).unwrap();
    assert!(r.term_c > 0.0);
}

#[test]
fn single_aggregation_has_no_staleness_term() {
    let exp = quadratic_experiment(2, &[(1, 3)], 2);
    let s = &exp.scenario;
    let c = common::exact_constants(&exp, 2.0, 3.0, 1.0);
    let schedule = Schedule { tasks: vec![round_robin(2, ScheduleLimits { staleness_limit: 3, num_aggregations: 1 })] };
    let plan = uniform_plan(s, &schedule, 3, false).unwrap();
    let sizes: Vec<usize> = s.devices.iter().map(|d| d.dataset_sizes[0]).collect();
    let r = eval_bound(&s.tasks[0], &sizes, &schedule.tasks[0], &plan.tasks[0], &c[0]).unwrap();
    assert_eq!(r.term_e, 0.0);
}

#[test]
fn staleness_term_grows_with_the_limit() {
    let exp = quadratic_experiment(2, &[(8, 1)], 5);
    let c = common::exact_constants(&exp, 2.0, 3.0, 1.0);
    let mut t = exp.scenario.tasks[0].clone();
    let mut prev = 0.0;
    for k in 0..6 {
        t.staleness_limit = k;
        let e = staleness_term(&t, &c[0], 3.0);
        assert!(e >= prev, "K={k}");
        prev = e;
    }
}

#[test]
fn step_scaled_pieces_follow_their_powers() {
    let (spread, plain_gap) = scaling_spread(6);
    assert!(spread <= 0.10, "normalized coefficients drift by {spread}");
    // with e_max = e_min the scaled bound is the plain bound
    assert!(plain_gap < 1e-9, "{plain_gap}");
}

#[test]
fn bound_holds_on_simulated_quadratic_runs() {
    let exp = quadratic_experiment(2, &[(4, 2)], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sizes: Vec<usize> = exp.scenario.devices.iter().map(|d| d.dataset_sizes[0]).collect();
    for draw in 0..10 {
        let (schedule, plan) = random_schedule_plan(&mut rng, &exp.scenario, 500).expect("a feasible draw");
        let out = run(&exp.scenario, &schedule, &plan, &exp.tasks, draw).unwrap();
        let c = observed_constants(&exp, &out, 0);
        let lhs = eval_conv_lhs(&out.metrics.tasks[0].grad_norm, &schedule.tasks[0]).unwrap();
        let r = eval_bound(&exp.scenario.tasks[0], &sizes, &schedule.tasks[0], &plan.tasks[0], &c).unwrap();
        assert!(lhs <= r.total, "draw {draw}: {lhs} > {}", r.total);
    }
}
