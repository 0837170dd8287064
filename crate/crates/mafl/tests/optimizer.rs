mod common;

use common::{brute_force, exact_constants, grad_rel_err, hand_families, majorization_errors, quadratic_experiment, sample};
use mafl::autodiff::{finite_difference, gradient};
use mafl::optimizer::families::Family;
use mafl::optimizer::problem::{NONCONVEX_EQUALITIES, NONCONVEX_INEQUALITIES};
use mafl::optimizer::{assemble_problem, classify_constraints, optimize};
use mafl::scheduling::check_schedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_built_families_are_majorized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for f in hand_families() {
        let (short, anchor, grad) = majorization_errors(&f, &mut rng, 1000);
        assert!(short <= 0.0, "{f:?} undercut by {short:e}");
        assert!(anchor <= 1e-8 && grad <= 1e-8, "{f:?}: anchor {anchor:e}, gradient {grad:e}");
    }
}

#[test]
fn assembled_nonconvex_constraints_are_majorized() {
    let exp = quadratic_experiment(3, &[(4, 2), (4, 2)], 5);
    let c = exact_constants(&exp, 2.0, 3.0, 1.0);
    let p = assemble_problem(&exp.scenario, &c).unwrap();
    classify_constraints(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // tensor and compute equalities are substituted into the objective, so the curved
    // instances left are the window, energy and binary constraints
    let mut seen = std::collections::BTreeSet::new();
    let mut families: Vec<(&str, &Family)> = Vec::new();
    for inst in p.constraints.iter().filter(|c| !matches!(c.family, Family::Linear { .. })) {
        seen.insert(inst.name);
        if !families.iter().any(|(n, f)| *n == inst.name && *f == &inst.family) {
            families.push((inst.name, &inst.family));
        }
    }
    for (name, f) in families {
        let (short, anchor, grad) = majorization_errors(f, &mut rng, 1000);
        assert!(short <= 0.0, "{name}: undercut by {short:e}");
        assert!(anchor <= 1e-8 && grad <= 1e-8, "{name}: anchor {anchor:e}, gradient {grad:e}");
    }
    for name in ["qoe_window", "energy_budget", "binary_upload"] {
        assert!(seen.contains(name), "{name} missing from {seen:?}");
    }
    assert!(NONCONVEX_INEQUALITIES.contains(&"binary_upload") && !NONCONVEX_EQUALITIES.is_empty());
}

#[test]
fn family_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for f in hand_families() {
        let domain = f.domain();
        for _ in 0..100 {
            let x = sample(&mut rng, &domain);
            let (_, ad) = gradient(&f, &x);
            let fd = finite_difference(|y| f.value(y), &x, 1e-6);
            assert!(grad_rel_err(&ad, &fd) <= 1e-5, "{f:?} at {x:?}");
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let exp = quadratic_experiment(2, &[(3, 1)], 6);
    let c = exact_constants(&exp, 2.0, 3.0, 1.0);
    let p = assemble_problem(&exp.scenario, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // stay off the lower faces so the finite difference stays in the domain
    let inner: Vec<(f64, f64)> = p
        .set
        .bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { (lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo)) } else { (lo, hi) })
        .collect();
    for _ in 0..100 {
        let v = sample(&mut rng, &inner);
        let (val, ad) = p.objective_gradient(&v);
        assert!((val - p.objective(&v)).abs() <= 1e-12 * val.abs().max(1.0));
        let fd = finite_difference(|y| p.objective(y), &v, 1e-6);
        assert!(grad_rel_err(&ad, &fd) <= 1e-5, "relative error {:e}", grad_rel_err(&ad, &fd));
    }
}

#[test]
fn small_instance_is_within_a_quarter_of_brute_force() {
    let exp = quadratic_experiment(2, &[(2, 1)], 7);
    let c = exact_constants(&exp, 2.0, 3.0, 1.0);
    let best = brute_force(&exp.scenario, &c, 3);
    assert!(best.feasible > 0 && best.feasible <= 64);
    let r = optimize(&exp.scenario, &c, &exp.config.optimizer).unwrap();
    assert!(r.objective <= 1.25 * best.objective, "{} vs brute force {}", r.objective, best.objective);
}

#[test]
fn reference_instance_converges_to_binary() {
    let exp = quadratic_experiment(3, &[(4, 2), (4, 2)], 8);
    let s = &exp.scenario;
    let c = exact_constants(&exp, 2.0, 3.0, 1.0);
    let r = optimize(s, &c, &exp.config.optimizer).unwrap();
    let last = r.history.last().unwrap();
    assert!(last.binary_gap <= 1e-3, "binary gap {:e}", last.binary_gap);
    for j in 0..s.num_tasks() {
        let table = r.plan.period_table(s, &r.schedule, j).unwrap();
        let v = check_schedule(&r.schedule.tasks[j], Some(&table));
        assert!(v.is_empty(), "task {j}: {v:?}");
    }
    assert!(r.plan.check(s, &r.schedule).is_empty());
}
