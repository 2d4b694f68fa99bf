use approx::assert_abs_diff_eq;
use ppgkit_core::diagnostics::{
    optimality_condition, pi_equivalence_threshold, smoothness_coefficient, solve_optimal,
};
use ppgkit_core::instances::{generate, GeneratorSpec};
use ppgkit_core::mdp::{bellman_backup, policy_evaluate, tol_argmax, visitation};
use ppgkit_core::policy_opt::{
    apply_prototype, homotopic_update_row, pi_step, ppg_step, pqa_step, prototype_update, run,
    run_with, schedule_eta, RunOptions, StepSchedule, TerminatedReason, UpdateRule,
};
use ppgkit_core::{Policy, TabularMdp};

fn bandit() -> TabularMdp {
    generate(&GeneratorSpec::Bandit {
        gamma: 0.9,
        delta: 0.5,
    })
    .unwrap()
}

fn random(seed: u64, num_states: usize, num_actions: usize, gamma: f64) -> TabularMdp {
    generate(&GeneratorSpec::Random {
        seed,
        num_states,
        num_actions,
        gamma,
        sparsity: 0.0,
    })
    .unwrap()
}

fn expected_q(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    let p = mdp.transition_row(s, a);
    let r = mdp.reward_row(s, a);
    (0..mdp.num_states())
        .map(|t| p[t] * (r[t] + mdp.gamma() * v[t]))
        .sum()
}

/// Value iteration to a sup-norm change below `tol`.
fn vi_oracle(mdp: &TabularMdp, tol: f64) -> Vec<f64> {
    let mut v = vec![0.0; mdp.num_states()];
    loop {
        let next: Vec<f64> = (0..mdp.num_states())
            .map(|s| {
                (0..mdp.num_actions())
                    .map(|a| expected_q(mdp, &v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if change < tol {
            return v;
        }
    }
}

/// Iterative policy evaluation.
fn evaluation_oracle(mdp: &TabularMdp, policy: &Policy) -> Vec<f64> {
    let mut v = vec![0.0; mdp.num_states()];
    for _ in 0..5000 {
        v = (0..mdp.num_states())
            .map(|s| {
                (0..mdp.num_actions())
                    .map(|a| policy.prob(s, a) * expected_q(mdp, &v, s, a))
                    .sum()
            })
            .collect();
    }
    v
}

/// Truncated series `(1-gamma) sum_t gamma^t mu P_pi^t`.
fn visitation_oracle(mdp: &TabularMdp, policy: &Policy, rho: &[f64]) -> Vec<f64> {
    let n = mdp.num_states();
    let mut dist = rho.to_vec();
    let mut acc = vec![0.0; n];
    let mut weight = 1.0 - mdp.gamma();
    while weight > 1e-17 {
        for s in 0..n {
            acc[s] += weight * dist[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..mdp.num_actions() {
                for (t, p) in mdp.transition_row(s, a).iter().enumerate() {
                    next[t] += dist[s] * policy.prob(s, a) * p;
                }
            }
        }
        dist = next;
        weight *= mdp.gamma();
    }
    acc
}

#[test]
fn bandit_evaluation_closed_form() {
    let mdp = bandit();
    let pi = Policy::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = policy_evaluate(&mdp, &pi).unwrap();
    assert_abs_diff_eq!(b.v[0], 7.5, epsilon = 1e-12);
    assert_abs_diff_eq!(b.q.get(0, 0), 7.5, epsilon = 1e-12);
    assert_abs_diff_eq!(b.q.get(0, 1), 7.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.adv.get(0, 1), -0.5, epsilon = 1e-12);
}

#[test]
fn evaluation_and_visitation_match_iterative_oracles() {
    for seed in 0..5 {
        let mdp = random(seed, 6, 3, 0.9);
        let pi = Policy::from_rows(
            &(0..6)
                .map(|s| {
                    let w = [1.0 + s as f64, 2.0, 0.5];
                    let z: f64 = w.iter().sum();
                    w.iter().map(|x| x / z).collect()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let bundle = policy_evaluate(&mdp, &pi).unwrap();
        for (a, b) in bundle.v.iter().zip(evaluation_oracle(&mdp, &pi)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        for (a, b) in bundle
            .visitation
            .iter()
            .zip(visitation_oracle(&mdp, &pi, mdp.mu()))
        {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let rho = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1];
        let d = visitation(&mdp, &pi, &rho).unwrap();
        for (a, b) in d.iter().zip(visitation_oracle(&mdp, &pi, &rho)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn zero_discount_visitation_is_initial_distribution() {
    let mdp = random(3, 4, 2, 0.0);
    let d = visitation(&mdp, &Policy::uniform(4, 2), mdp.mu()).unwrap();
    assert_eq!(d, mdp.mu());
}

#[test]
fn solver_matches_value_iteration() {
    for seed in 0..10 {
        let mdp = random(seed, 5, 3, 0.95);
        let opt = solve_optimal(&mdp).unwrap();
        for (a, b) in opt.v_star.iter().zip(vi_oracle(&mdp, 1e-12)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        let backup = bellman_backup(&mdp, &opt.v_star).unwrap();
        let residual = backup
            .values
            .iter()
            .zip(&opt.v_star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(residual <= 1e-10, "residual {residual}");
        assert!(opt.delta > 0.0);
        for (s, set) in opt.optimal_sets.iter().enumerate() {
            for &a in set {
                assert!(opt.a_star.get(s, a).abs() <= tol_argmax(mdp.gamma()));
            }
        }
    }
}

#[test]
fn bandit_optimal_solution() {
    let opt = solve_optimal(&bandit()).unwrap();
    assert_abs_diff_eq!(opt.v_star[0], 7.5, epsilon = 1e-12);
    assert_abs_diff_eq!(opt.delta, 0.5, epsilon = 1e-12);
    assert_eq!(opt.optimal_sets, vec![vec![0]]);
    assert_eq!(opt.s_tilde, vec![0]);
}

#[test]
fn ppg_solves_bandit_in_one_step() {
    let mdp = bandit();
    let (next, eta_s) = ppg_step(&mdp, &Policy::uniform(1, 2), 1.0).unwrap();
    assert_abs_diff_eq!(eta_s[0], 10.0, epsilon = 1e-12);
    assert_eq!(next.row(0), &[1.0, 0.0]);

    let trace = run(
        &mdp,
        &UpdateRule::Ppg,
        &StepSchedule::constant(1.0),
        50,
        true,
    )
    .unwrap();
    assert_eq!(trace.records.len(), 2);
    assert_eq!(trace.first_optimal(), Some(1));
    assert_eq!(trace.terminated_reason, TerminatedReason::ReachedOptimal);
}

#[test]
fn optimal_start_stops_immediately() {
    let mdp = bandit();
    let opt = solve_optimal(&mdp).unwrap();
    let start = Policy::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let options = RunOptions::new(10, true).with_initial_policy(start);
    let trace = run_with(
        &mdp,
        &opt,
        &UpdateRule::Pqa,
        &StepSchedule::constant(0.1),
        &options,
    )
    .unwrap();
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.terminated_reason, TerminatedReason::ReachedOptimal);
}

#[test]
fn prototype_rows_on_the_bandit() {
    let out = prototype_update(&[0.5, 0.5], &[0.25, -0.25], 1.0).unwrap();
    assert_abs_diff_eq!(out.row[0], 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(out.row[1], 0.25, epsilon = 1e-12);
    let out = prototype_update(&[0.5, 0.5], &[0.25, -0.25], 10.0).unwrap();
    assert_eq!(out.row, vec![1.0, 0.0]);
    let out = prototype_update(&[0.3, 0.7], &[0.0, 0.0], 5.0).unwrap();
    assert_eq!(out.row, vec![0.3, 0.7]);
}

#[test]
fn pi_keeps_symmetric_ties() {
    // Both actions lead to the same distribution with the same reward.
    let p = vec![
        vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    ];
    let r = vec![
        vec![vec![0.3, 0.6], vec![0.3, 0.6]],
        vec![vec![0.0, 0.0], vec![1.0, 1.0]],
    ];
    let mdp = TabularMdp::new(&p, &r, 0.9, vec![0.5, 0.5]).unwrap();
    let next = pi_step(&mdp, &Policy::uniform(2, 2)).unwrap();
    assert_eq!(next.row(0), &[0.5, 0.5]);
    assert_eq!(next.row(1), &[0.0, 1.0]);
}

#[test]
fn ppg_equals_pqa_under_uniform_visitation() {
    // Every action resets to the uniform distribution, so d^pi_mu is uniform for every policy.
    let n = 4;
    let p: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..3).map(|_| vec![1.0 / n as f64; n]).collect())
        .collect();
    let r: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|s| {
            (0..3)
                .map(|a| vec![((s * 3 + a) % 5) as f64 / 5.0; n])
                .collect()
        })
        .collect();
    let mdp = TabularMdp::new(&p, &r, 0.8, vec![0.25; 4]).unwrap();
    let pi = Policy::from_rows(&vec![vec![0.2, 0.5, 0.3]; n]).unwrap();
    let scale = 0.25 / (1.0 - 0.8);
    for eta in [0.01, 0.3, 2.0, 50.0] {
        let (ppg, _) = ppg_step(&mdp, &pi, eta).unwrap();
        let (pqa, _) = pqa_step(&mdp, &pi, scale * eta).unwrap();
        assert!(ppg.max_abs_diff(&pqa) <= 1e-12, "eta = {eta}");
    }
}

#[test]
fn steps_never_decrease_values() {
    for seed in 0..4 {
        let mdp = random(seed, 2, 3, 0.9);
        let l = smoothness_coefficient(mdp.gamma(), mdp.num_actions());
        for rule in [UpdateRule::Ppg, UpdateRule::Pqa, UpdateRule::Pi] {
            for eta in [1.0 / l, 100.0 / l, 10.0] {
                let trace = run(&mdp, &rule, &StepSchedule::constant(eta), 40, false).unwrap();
                for w in trace.records.windows(2) {
                    for (next, prev) in w[1].v.iter().zip(&w[0].v) {
                        assert!(*next >= prev - 1e-9, "{} eta {eta}", rule.name());
                    }
                }
            }
        }
    }
}

#[test]
fn support_shrinks_as_step_grows() {
    let mdp = random(11, 5, 4, 0.9);
    let pi = Policy::uniform(5, 4);
    let bundle = policy_evaluate(&mdp, &pi).unwrap();
    let etas = [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
    for s in 0..5 {
        let supports: Vec<Vec<usize>> = etas
            .iter()
            .map(|&e| {
                prototype_update(pi.row(s), bundle.adv.row(s), e)
                    .unwrap()
                    .support
            })
            .collect();
        for w in supports.windows(2) {
            assert!(w[1].iter().all(|a| w[0].contains(a)), "{w:?}");
        }
    }
}

#[test]
fn value_form_condition_predicts_optimal_step() {
    for seed in 0..10 {
        let mdp = random(seed, 5, 3, 0.9);
        let opt = solve_optimal(&mdp).unwrap();
        // Mix in less and less of the uniform policy until the value-error condition applies.
        let uniform = Policy::uniform(5, 3);
        let eta_s = vec![100.0; 5];
        let mut confirmed = false;
        for weight in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|s| {
                    (0..3)
                        .map(|a| {
                            (1.0 - weight) * opt.reference_policy.prob(s, a)
                                + weight * uniform.prob(s, a)
                        })
                        .collect()
                })
                .collect();
            let pi = Policy::from_rows(&rows).unwrap();
            let bundle = policy_evaluate(&mdp, &pi).unwrap();
            let checks = optimality_condition(&mdp, &pi, &bundle, &opt, &eta_s);
            if checks.iter().all(|c| c.value_form_holds) {
                let next = apply_prototype(&pi, &bundle, &eta_s).unwrap();
                assert!(opt.is_optimal(&next), "seed {seed} weight {weight}");
                confirmed = true;
                break;
            }
        }
        assert!(confirmed, "seed {seed}: condition never held");
    }
}

#[test]
fn step_beyond_pi_threshold_is_greedy() {
    for seed in 0..10 {
        let mdp = random(seed + 100, 6, 4, 0.9);
        let pi = Policy::uniform(6, 4);
        let bundle = policy_evaluate(&mdp, &pi).unwrap();
        let tol = tol_argmax(mdp.gamma());
        let th = pi_equivalence_threshold(&pi, &bundle, tol).unwrap();
        let next = apply_prototype(&pi, &bundle, &vec![1.01 * th.f_pi; 6]).unwrap();
        for s in 0..6 {
            let greedy = ppgkit_core::diagnostics::pi_optimal_set(bundle.adv.row(s), tol);
            assert!(next.support(s).iter().all(|a| greedy.contains(a)));
        }
    }
}

#[test]
fn schedule_examples() {
    let mdp = bandit();
    let pi = Policy::uniform(1, 2);
    let bundle = policy_evaluate(&mdp, &pi).unwrap();
    let eta = |s: &StepSchedule, k| schedule_eta(s, k, &mdp, &pi, &bundle).unwrap();
    assert_eq!(eta(&StepSchedule::constant(5.0), 17), 5.0);
    assert_abs_diff_eq!(
        eta(&StepSchedule::geometric(1.0), 0),
        2.0 / 0.9,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(eta(&StepSchedule::adaptive(1.01), 0), 2.02, epsilon = 1e-12);
    assert_eq!(eta(&StepSchedule::geometric(1.0), 10_000), 1e12);
}

#[test]
fn homotopic_counterexample_numbers() {
    let gamma: f64 = 0.9;
    let anchor = [0.5, 0.5];
    let (row, lambda) =
        homotopic_update_row(&[1.0, 0.0], &[0.0, -0.5], &anchor, 0.1, 1.0 / gamma).unwrap();
    let expected_lambda = 0.5 * (1.0 - 1.0 / gamma - 0.05);
    assert_abs_diff_eq!(lambda, expected_lambda, epsilon = 1e-12);
    assert_abs_diff_eq!(row[0], gamma * (1.0 - expected_lambda), epsilon = 1e-12);
    assert!(row[0] < 1.0);

    let (row, _) =
        homotopic_update_row(&[1.0, 0.0], &[0.0, -0.5], &anchor, 0.3, 1.0 / gamma).unwrap();
    assert_eq!(row, vec![1.0, 0.0]);
}
