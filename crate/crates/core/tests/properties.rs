//! Property-based invariants across the library.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbeedlab::classes::{
    build_perturbation_classes, concentrability, helper_realizability_error, realizability_error,
    ClassSpec, DataDistribution,
};
use sbeedlab::data::{sample_dataset, Dataset};
use sbeedlab::mdp::{
    occupancy_measure, soft_value_iteration, FiniteMdp, SoftParams, StateActionValue, StateValue,
    TabularPolicy, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use sbeedlab::solvers::{greedy_policy, sbeed_solve_with, Schedule};
use sbeedlab::theory::{
    quadratic_inequality_root, sample_complexity, telescoping_residual, theorem_bound, BoundInputs,
};

fn random_mdp(seed: u64, ns: usize, na: usize, gamma: f64) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FiniteMdp::random(ns, na, gamma, 1.0, &mut rng).unwrap()
}

/// Rows of positive weights normalized into a policy.
fn policy_from(weights: &[f64], ns: usize, na: usize) -> TabularPolicy {
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = &weights[s * na..(s + 1) * na];
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|w| w / total));
    }
    TabularPolicy::new(ns, na, probs).unwrap()
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 1usize..=6, 1usize..=4, prop_oneof![Just(0.5), Just(0.9), 0.0f64..0.95])
}

fn base_inputs() -> BoundInputs {
    BoundInputs {
        c2: 2.0,
        eps_vp: 0.01,
        eps_gvp: 0.01,
        n: 10_000,
        delta: 0.05,
        class_sizes: (16, 16, 64),
        lambda: 0.01,
        discount: 0.9,
        r_max: 1.0,
        n_actions: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_is_a_distribution_satisfying_flow(
        (seed, ns, na, gamma) in dims(),
        w in prop::collection::vec(0.01f64..1.0, 24),
    ) {
        let mdp = random_mdp(seed, ns, na, gamma);
        let pi = policy_from(&w, ns, na);
        let d = occupancy_measure(&mdp, &pi).unwrap();
        prop_assert!(d.mass().iter().all(|m| *m >= -1e-15));
        prop_assert!((d.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(d.flow_residual(&mdp) <= 1e-10);
    }

    #[test]
    fn telescoping_identity_holds(
        (seed, ns, na, gamma) in dims(),
        w in prop::collection::vec(0.01f64..1.0, 24),
        v in prop::collection::vec(-10.0f64..10.0, 6),
        lambda in 0.01f64..2.0,
    ) {
        let mdp = random_mdp(seed, ns, na, gamma);
        let pi = policy_from(&w, ns, na);
        let v = StateValue::new(v[..ns].to_vec());
        let r = telescoping_residual(&mdp, &v, &pi, SoftParams::new(lambda).unwrap()).unwrap();
        prop_assert!(r <= 1e-9, "residual {r}");
    }

    /// Adding `c` to every reward shifts `V*_lambda` by `c / (1 - gamma)` and
    /// leaves `pi*_lambda` unchanged.
    #[test]
    fn soft_optimum_is_shift_equivariant(
        (seed, ns, na, gamma) in dims(),
        c in 0.0f64..1.0,
        lambda in 0.05f64..2.0,
    ) {
        let mdp = random_mdp(seed, ns, na, gamma);
        let mut transition = Vec::new();
        let mut reward = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                transition.extend_from_slice(mdp.next_dist(s, a));
                reward.push(mdp.reward(s, a) + c);
            }
        }
        let shifted = FiniteMdp::new(ns, na, transition, reward, gamma, mdp.init_dist().to_vec(), 2.0).unwrap();
        let params = SoftParams::new(lambda).unwrap();
        let (v0, p0) = soft_value_iteration(&mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let (v1, p1) = soft_value_iteration(&shifted, params, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let scale = 1.0 / (1.0 - gamma);
        for s in 0..ns {
            prop_assert!((v1.values[s] - v0.values[s] - c * scale).abs() <= 1e-8 * scale.max(1.0));
        }
        for (a, b) in p0.probs().iter().zip(p1.probs()) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn greedy_policy_is_shift_invariant(
        q in prop::collection::vec(-5.0f64..5.0, 12),
        c in -100.0f64..100.0,
    ) {
        let q = StateActionValue::new(4, 3, q).unwrap();
        // Exact ties can break differently after rounding; skip rows with near-ties.
        for s in 0..4 {
            let mut row = q.row(s).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(row[0] - row[1] > 1e-9 * (1.0 + c.abs()));
        }
        prop_assert_eq!(greedy_policy(&q), greedy_policy(&q.shifted(c)));
    }

    #[test]
    fn lemma9_bound_holds_on_the_premise(
        a in 0.0f64..10.0,
        b in 0.0f64..10.0,
        c in 0.0f64..10.0,
        t in 0.0f64..=1.0,
    ) {
        // Largest x with x <= sqrt(a x + b) + c, scaled into [0, x_max].
        let x_max = c + a / 2.0 + (a * a / 4.0 + b + a * c).sqrt();
        let x = t * x_max;
        prop_assume!(x <= (a * x + b).sqrt() + c);
        let root = quadratic_inequality_root(a, b, c).unwrap();
        prop_assert!(x <= root * (1.0 + 1e-12), "x {x} > root {root}");
    }

    #[test]
    fn theorem_bound_is_monotone(
        factor in 1.01f64..10.0,
        which in 0usize..6,
    ) {
        let base = base_inputs();
        let mut worse = base.clone();
        match which {
            0 => worse.n = (base.n as f64 / factor) as u64,
            1 => worse.c2 *= factor,
            2 => worse.eps_vp *= factor,
            3 => worse.eps_gvp *= factor,
            4 => worse.delta /= factor,
            _ => worse.class_sizes.2 = (base.class_sizes.2 as f64 * factor).ceil() as usize,
        }
        let b0 = theorem_bound(&base).unwrap();
        let b1 = theorem_bound(&worse).unwrap();
        prop_assert!(b1.rhs_total > b0.rhs_total);
        prop_assert!(b0.chain_total <= b0.rhs_total);
        let sum = b0.bias_term + b0.approx_term + b0.cross_term + b0.stat_term;
        prop_assert!((sum - b0.rhs_total).abs() <= 1e-12 * b0.rhs_total);
    }

    #[test]
    fn sample_complexity_is_monotone_and_tight(eps in 0.5f64..50.0) {
        let mut base = base_inputs();
        base.lambda = 1e-4;
        let n = sample_complexity(eps, &base).unwrap();
        let at = |n: u64| theorem_bound(&BoundInputs { n, eps_vp: 0.0, eps_gvp: 0.0, ..base.clone() }).unwrap().rhs_total;
        prop_assert!(at(n) <= eps);
        if n > 1 {
            prop_assert!(at(n - 1) > eps);
        }
        prop_assert!(sample_complexity(eps / 2.0, &base).unwrap() >= n);
    }

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>(), n in 1usize..200) {
        let mdp = random_mdp(seed, 3, 2, 0.8);
        let d = sample_dataset(&mdp, &DataDistribution::uniform(3, 2), n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.save(&path).unwrap();
        prop_assert_eq!(Dataset::load(&path).unwrap(), d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_is_schedule_independent(seed in any::<u64>(), n in 1usize..300, realizable: bool) {
        let mdp = random_mdp(seed, 3, 3, 0.9);
        let params = SoftParams::new(0.3).unwrap();
        let spec = ClassSpec { n_values: 5, n_policies: 4, n_helpers: 3, realizable, ..ClassSpec::default() };
        let classes = build_perturbation_classes(&mdp, params, &spec, seed ^ 1).unwrap();
        let d = sample_dataset(&mdp, &DataDistribution::uniform(3, 3), n, seed).unwrap();
        let a = sbeed_solve_with(&d, &classes, params, Schedule::Parallel).unwrap();
        let b = sbeed_solve_with(&d, &classes, params, Schedule::Serial).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn class_quantities_are_permutation_invariant(seed in any::<u64>(), rot in 1usize..5) {
        let mdp = random_mdp(seed, 3, 2, 0.9);
        let params = SoftParams::new(0.5).unwrap();
        let spec = ClassSpec { n_values: 5, n_policies: 5, n_helpers: 5, realizable: false, helper_complete: false, ..ClassSpec::default() };
        let classes = build_perturbation_classes(&mdp, params, &spec, seed).unwrap();
        let mut permuted = classes.clone();
        permuted.value_class.rotate_left(rot);
        permuted.policy_class.rotate_right(rot);
        permuted.helper_class.reverse();
        let mu = DataDistribution::uniform(3, 2);
        let (_, pi_star) = soft_value_iteration(&mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let (e0, _) = realizability_error(&classes, &mu, &mdp, params).unwrap();
        let (e1, _) = realizability_error(&permuted, &mu, &mdp, params).unwrap();
        prop_assert_eq!(e0, e1);
        prop_assert_eq!(
            helper_realizability_error(&classes, &mu, &mdp, params).unwrap(),
            helper_realizability_error(&permuted, &mu, &mdp, params).unwrap()
        );
        let c2 = concentrability(&classes, &pi_star, &mu, &mdp).unwrap();
        prop_assert_eq!(c2, concentrability(&permuted, &pi_star, &mu, &mdp).unwrap());
        prop_assert!(c2 >= 1.0 - 1e-12);
    }

    #[test]
    fn enlarging_classes_is_monotone(seed in any::<u64>()) {
        let mdp = random_mdp(seed, 3, 2, 0.9);
        let params = SoftParams::new(0.5).unwrap();
        let spec = ClassSpec { n_values: 6, n_policies: 6, n_helpers: 6, realizable: false, helper_complete: false, ..ClassSpec::default() };
        let big = build_perturbation_classes(&mdp, params, &spec, seed).unwrap();
        let mut small = big.clone();
        small.value_class.truncate(3);
        small.policy_class.truncate(3);
        let mut fewer_helpers = big.clone();
        fewer_helpers.helper_class.truncate(2);
        let mu = DataDistribution::uniform(3, 2);
        let eps = |c| realizability_error(c, &mu, &mdp, params).unwrap().0;
        let heps = |c| helper_realizability_error(c, &mu, &mdp, params).unwrap();
        prop_assert!(eps(&big) <= eps(&small));
        prop_assert!(heps(&big) >= heps(&small));
        prop_assert!(heps(&big) <= heps(&fewer_helpers));
    }
}
