//! Optimal solutions, optimal-gap bookkeeping and every convergence bound or
//! threshold the optimizers are checked against.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdp::{
    argmax_set, bellman_backup, dot, policy_evaluate, tol_argmax, visitation, ActionTable, Policy,
    TabularMdp, ValueBundle,
};
use crate::policy_opt::prototype_update;

/// Slack below which a [`BoundReport`] counts as violated.
pub const BOUND_TOL: f64 = 1e-9;

const MAX_PI_ITERS: usize = 100_000;

/// Relative rounding allowance applied before taking the ceiling in [`finite_k0`].
pub const K0_ROUNDING_REL: f64 = 1e-12;

/// Optimal values, optimal action sets and the optimal advantage gap.
#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub v_star: Vec<f64>,
    pub q_star: ActionTable,
    pub a_star: ActionTable,
    /// `A*_s`, sorted.
    pub optimal_sets: Vec<Vec<usize>>,
    /// Minimum `|A*(s,a)|` over non-optimal pairs; `+inf` when every action is optimal.
    pub delta: f64,
    /// States that have at least one non-optimal action.
    pub s_tilde: Vec<usize>,
    pub reference_policy: Policy,
}

impl OptimalSolution {
    /// Exact optimality: `supp(pi_s) ⊆ A*_s` at every state.
    pub fn is_optimal(&self, policy: &Policy) -> bool {
        (0..policy.num_states()).all(|s| {
            let set = &self.optimal_sets[s];
            policy
                .row(s)
                .iter()
                .enumerate()
                .all(|(a, &p)| p <= 0.0 || set.binary_search(&a).is_ok())
        })
    }

    pub fn gap_is_finite(&self) -> bool {
        self.delta.is_finite()
    }

    /// `||V* - v||_inf`.
    pub fn value_error(&self, v: &[f64]) -> f64 {
        self.v_star
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact solution by policy iteration from the uniform policy.
///
/// Iterates greedy improvement (uniform over the tolerance-argmax set) until the
/// greedy sets stop changing.
pub fn solve_optimal(mdp: &TabularMdp) -> Result<OptimalSolution> {
    let gamma = mdp.gamma();
    let tol = tol_argmax(gamma);
    let mut policy = Policy::uniform(mdp.num_states(), mdp.num_actions());
    let mut prev_sets: Option<Vec<Vec<usize>>> = None;
    let mut bundle = policy_evaluate(mdp, &policy)?;
    for _ in 0..MAX_PI_ITERS {
        let sets: Vec<Vec<usize>> = bundle.adv.rows().map(|row| argmax_set(row, tol)).collect();
        if prev_sets.as_ref() == Some(&sets) {
            break;
        }
        policy = Policy::uniform_over(mdp.num_actions(), &sets);
        bundle = policy_evaluate(mdp, &policy)?;
        prev_sets = Some(sets);
    }

    let backup = bellman_backup(mdp, &bundle.v)?;
    let residual = backup
        .values
        .iter()
        .zip(&bundle.v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // Tolerance-argmax ties can leave O(tol) dust; anything larger is a solver bug.
    if residual > 10.0 * tol {
        return Err(Error::NoImprovementFixedPointNotOptimal { residual });
    }

    let optimal_sets: Vec<Vec<usize>> = bundle.q.rows().map(|row| argmax_set(row, tol)).collect();
    let mut delta = f64::INFINITY;
    let mut s_tilde = Vec::new();
    for (s, set) in optimal_sets.iter().enumerate() {
        if set.len() == mdp.num_actions() {
            continue;
        }
        s_tilde.push(s);
        for a in 0..mdp.num_actions() {
            if set.binary_search(&a).is_err() {
                delta = delta.min(bundle.adv.get(s, a).abs());
            }
        }
    }

    Ok(OptimalSolution {
        v_star: bundle.v,
        q_star: bundle.q,
        a_star: bundle.adv,
        optimal_sets,
        delta,
        s_tilde,
        reference_policy: policy,
    })
}

/// `A^pi_s = argmax_a A^pi(s, a)` under `tol`.
pub fn pi_optimal_set(adv_row: &[f64], tol: f64) -> Vec<usize> {
    argmax_set(adv_row, tol)
}

/// `a ⊆ b` for sorted index sets.
pub fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.binary_search(x).is_ok())
}

/// `b_s^pi = pi_s(A \ A*_s)` for every state.
pub fn nonoptimal_mass(policy: &Policy, optimal_sets: &[Vec<usize>]) -> Vec<f64> {
    (0..policy.num_states())
        .map(|s| {
            policy
                .row(s)
                .iter()
                .enumerate()
                .filter(|(a, _)| optimal_sets[s].binary_search(a).is_err())
                .map(|(_, p)| p)
                .sum()
        })
        .collect()
}

/// `f_s(eta_s)` via its closed form over the support `B` of the prototype update:
///
/// `eta_s (sum_B A^2 - (sum_B A)^2 / |B|) + sum_{a' not in B} pi_{a'} (1/|B|) sum_B (A_a - A_{a'})`.
pub fn improvement_expression(policy_row: &[f64], adv_row: &[f64], eta_s: f64) -> Result<f64> {
    let update = prototype_update(policy_row, adv_row, eta_s)?;
    let support = &update.support;
    let size = support.len() as f64;
    let sum_b: f64 = support.iter().map(|&a| adv_row[a]).sum();
    let mean_b = sum_b / size;
    // sum_B A^2 - (sum_B A)^2/|B| in its centered form, which avoids cancellation.
    let spread: f64 = support.iter().map(|&a| (adv_row[a] - mean_b).powi(2)).sum();
    let mut in_support = vec![false; adv_row.len()];
    for &a in support {
        in_support[a] = true;
    }
    let outside: f64 = (0..adv_row.len())
        .filter(|&a| !in_support[a])
        .map(|a| policy_row[a] * (mean_b - adv_row[a]))
        .sum();
    Ok(eta_s * spread + outside)
}

/// `f_s(eta_s) = sum_a pi+_a A_a` evaluated on the prototype output directly.
pub fn improvement_direct(policy_row: &[f64], adv_row: &[f64], eta_s: f64) -> Result<f64> {
    let update = prototype_update(policy_row, adv_row, eta_s)?;
    Ok(dot(&update.row, adv_row))
}

/// `(max_a A)^2 / (max_a A + (2 + 5|A|)/eta_s)`; zero when `max_a A <= 0`.
///
/// `eta_s = +inf` gives the PI limit `max_a A`.
pub fn improvement_lower_bound(adv_row: &[f64], eta_s: f64, num_actions: usize) -> f64 {
    let m = adv_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(m > 0.0) {
        return 0.0;
    }
    m * m / (m + (2.0 + 5.0 * num_actions as f64) / eta_s)
}

/// A bound evaluated against an observed quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub bound_value: f64,
    pub inputs: BTreeMap<String, f64>,
    pub satisfied: bool,
    /// `bound_value - observed`.
    pub slack: f64,
}

impl BoundReport {
    pub fn new(bound_value: f64, inputs: BTreeMap<String, f64>, observed: f64) -> Self {
        let slack = bound_value - observed;
        Self {
            bound_value,
            inputs,
            satisfied: slack >= -BOUND_TOL,
            slack,
        }
    }
}

/// `||d*_rho / rho||_inf` with the reference optimal policy as the witness.
pub fn mismatch_coefficient(mdp: &TabularMdp, opt: &OptimalSolution, rho: &[f64]) -> Result<f64> {
    if rho.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch {
            what: "rho",
            expected: mdp.num_states(),
            found: rho.len(),
        });
    }
    if let Some(state) = rho.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::ZeroRhoComponent { state });
    }
    let d_star = visitation(mdp, &opt.reference_policy, rho)?;
    Ok(d_star
        .iter()
        .zip(rho)
        .map(|(d, r)| d / r)
        .fold(0.0, f64::max))
}

/// Constant-step PPG sublinear bound
/// `(1/k) (1/(1-gamma)^2) ||d*_rho/rho||_inf (1 + (2 + 5|A|)/(eta mu_tilde))`.
pub fn sublinear_bound_value(
    k: usize,
    gamma: f64,
    mismatch: f64,
    eta: f64,
    mu_tilde: f64,
    num_actions: usize,
) -> f64 {
    let c = 2.0 + 5.0 * num_actions as f64;
    (1.0 / k as f64) * (1.0 / (1.0 - gamma).powi(2)) * mismatch * (1.0 + c / (eta * mu_tilde))
}

/// Sublinear PPG bound at iteration `k >= 1` checked against `observed_gap = V*(rho) - V^k(rho)`.
pub fn sublinear_bound_ppg(
    mdp: &TabularMdp,
    opt: &OptimalSolution,
    rho: &[f64],
    k: usize,
    eta: f64,
    observed_gap: f64,
) -> Result<BoundReport> {
    if k == 0 {
        return Err(Error::BadParameter(
            "the sublinear bound needs k >= 1".into(),
        ));
    }
    let mismatch = mismatch_coefficient(mdp, opt, rho)?;
    let mu_tilde = mdp.mu_tilde();
    let bound = sublinear_bound_value(k, mdp.gamma(), mismatch, eta, mu_tilde, mdp.num_actions());
    let inputs = BTreeMap::from([
        ("k".to_string(), k as f64),
        ("gamma".to_string(), mdp.gamma()),
        ("mismatch".to_string(), mismatch),
        ("eta".to_string(), eta),
        ("mu_tilde".to_string(), mu_tilde),
        ("num_actions".to_string(), mdp.num_actions() as f64),
    ]);
    Ok(BoundReport::new(bound, inputs, observed_gap))
}

/// `E_{s ~ d*_rho} ||pi*_s - pi0_s||_2^2`, the initial-distance term of the PQA bound.
pub fn initial_distance(
    mdp: &TabularMdp,
    opt: &OptimalSolution,
    rho: &[f64],
    initial: &Policy,
) -> Result<f64> {
    let d_star = visitation(mdp, &opt.reference_policy, rho)?;
    Ok((0..mdp.num_states())
        .map(|s| {
            let dist: f64 = opt
                .reference_policy
                .row(s)
                .iter()
                .zip(initial.row(s))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d_star[s] * dist
        })
        .sum())
}

/// Constant-step PQA sublinear bound
/// `(1/(k+1)) (D / (2 eta (1-gamma)) + 1/(1-gamma)^2)` with `D` from [`initial_distance`].
pub fn sublinear_bound_pqa_value(k: usize, gamma: f64, eta: f64, distance: f64) -> f64 {
    (1.0 / (k as f64 + 1.0))
        * (distance / (2.0 * eta * (1.0 - gamma)) + 1.0 / (1.0 - gamma).powi(2))
}

/// Iteration-count bounds after which a method is guaranteed to output an optimal policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FiniteRule {
    Ppg {
        eta: f64,
        mu_tilde: f64,
        mismatch: f64,
        num_actions: usize,
    },
    Pqa {
        eta: f64,
    },
    Pi,
    Vi {
        initial_gap_inf: f64,
    },
    /// PPG under the geometrically increasing schedule with constant `c0`.
    PpgGeometric {
        c0: f64,
    },
}

/// `k0` for the given rule; zero when the gap is infinite (every policy is optimal).
pub fn finite_k0(rule: &FiniteRule, gamma: f64, delta: f64) -> Result<u64> {
    if delta.is_infinite() && delta > 0.0 {
        return Ok(0);
    }
    if !(delta > 0.0) {
        return Err(Error::BadParameter(format!(
            "optimal gap must be positive, got {delta}"
        )));
    }
    let h = 1.0 / (1.0 - gamma);
    let raw = match *rule {
        FiniteRule::Ppg {
            eta,
            mu_tilde,
            mismatch,
            num_actions,
        } => {
            let c = 2.0 + 5.0 * num_actions as f64;
            (2.0 / delta)
                * (1.0 + 1.0 / (eta * mu_tilde * delta))
                * (h * h / mu_tilde)
                * mismatch
                * (1.0 + c / (eta * mu_tilde))
        }
        FiniteRule::Pqa { eta } => {
            (2.0 / delta) * (1.0 + 1.0 / (eta * delta)) * (h / eta + h * h) - 1.0
        }
        FiniteRule::Pi => h * (3.0 * h / delta).ln(),
        FiniteRule::Vi { initial_gap_inf } => h * (3.0 * initial_gap_inf / delta).ln(),
        FiniteRule::PpgGeometric { c0 } => h * ((c0 + 1.0) * (c0 + 2.0) * h / delta).ln(),
    };
    if raw.is_nan() {
        return Err(Error::BadParameter("k0 formula evaluated to NaN".into()));
    }
    // Shave accumulated rounding so that exact integers are not pushed up by one.
    let shaved = raw - K0_ROUNDING_REL * raw.abs();
    // `as` saturates at u64::MAX and maps negatives to zero.
    Ok(shaved.ceil().max(0.0) as u64)
}

/// Per-state sufficient conditions for the next prototype update to be optimal.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityCheck {
    pub b: f64,
    /// `||eps_s||_inf` with `eps_{s,a} = eta_s (A^pi_{s,a} - A*_{s,a})`.
    pub eps_inf: f64,
    /// `b_s + ||eps_s||_inf <= eta_s Delta / 2`.
    pub holds: bool,
    /// `(Delta/2) eta_s Delta / (1 + eta_s Delta)`.
    pub value_threshold: f64,
    /// `||V* - V^pi||_inf <= value_threshold`.
    pub value_form_holds: bool,
    /// `b_s + 2||eps_s||_inf + min(sqrt(eta_s (V*(mu) - V^pi(mu)) / ((1-gamma) mu_tilde)), 1) < eta_s Delta`.
    pub cone_form_holds: bool,
}

pub fn optimality_condition(
    mdp: &TabularMdp,
    policy: &Policy,
    bundle: &ValueBundle,
    opt: &OptimalSolution,
    eta_s: &[f64],
) -> Vec<OptimalityCheck> {
    let b = nonoptimal_mass(policy, &opt.optimal_sets);
    let delta = opt.delta;
    let value_err = opt.value_error(&bundle.v);
    let gap_mu = dot(mdp.mu(), &opt.v_star) - dot(mdp.mu(), &bundle.v);
    let mu_tilde = mdp.mu_tilde();
    (0..policy.num_states())
        .map(|s| {
            let eta = eta_s[s];
            let eps_inf = (0..policy.num_actions())
                .map(|a| (eta * (bundle.adv.get(s, a) - opt.a_star.get(s, a))).abs())
                .fold(0.0, f64::max);
            if delta.is_infinite() {
                return OptimalityCheck {
                    b: b[s],
                    eps_inf,
                    holds: true,
                    value_threshold: f64::INFINITY,
                    value_form_holds: true,
                    cone_form_holds: true,
                };
            }
            let value_threshold = 0.5 * delta * eta * delta / (1.0 + eta * delta);
            let drift = (eta * gap_mu.max(0.0) / ((1.0 - mdp.gamma()) * mu_tilde))
                .sqrt()
                .min(1.0);
            OptimalityCheck {
                b: b[s],
                eps_inf,
                holds: b[s] + eps_inf <= 0.5 * eta * delta,
                value_threshold,
                value_form_holds: value_err <= value_threshold,
                cone_form_holds: b[s] + 2.0 * eps_inf + drift < eta * delta,
            }
        })
        .collect()
}

/// `Delta^pi` and the PI-equivalence step threshold `F^pi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiThreshold {
    pub delta_pi: f64,
    pub f_pi: f64,
}

/// `F^pi = (2 / Delta^pi) max_s pi_s(A \ A^pi_s)`, with `Delta^pi` the smallest
/// gap between the best and the best non-pi-optimal advantage over states that
/// have non-pi-optimal actions.
pub fn pi_equivalence_threshold(
    policy: &Policy,
    bundle: &ValueBundle,
    tol: f64,
) -> Result<PiThreshold> {
    let mut delta_pi = f64::INFINITY;
    let mut worst_mass: f64 = 0.0;
    for s in 0..policy.num_states() {
        let row = bundle.adv.row(s);
        let set = argmax_set(row, tol);
        if set.len() == row.len() {
            continue;
        }
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best_other = (0..row.len())
            .filter(|a| set.binary_search(a).is_err())
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        delta_pi = delta_pi.min((best - best_other).abs());
        let off_mass: f64 = (0..row.len())
            .filter(|a| set.binary_search(a).is_err())
            .map(|a| policy.prob(s, a))
            .sum();
        worst_mass = worst_mass.max(off_mass);
    }
    if delta_pi.is_infinite() {
        return Err(Error::AllActionsPiOptimal);
    }
    Ok(PiThreshold {
        delta_pi,
        f_pi: 2.0 / delta_pi * worst_mass,
    })
}

/// `gamma^k (||V* - V^0||_inf + c0/(1-gamma))`.
pub fn linear_rate_bound(k: usize, gamma: f64, c0: f64, initial_gap_inf: f64) -> f64 {
    gamma.powi(k.min(i32::MAX as usize) as i32) * (initial_gap_inf + c0 / (1.0 - gamma))
}

/// `L = 2 gamma |A| / (1-gamma)^3`.
pub fn smoothness_coefficient(gamma: f64, num_actions: usize) -> f64 {
    2.0 * gamma * num_actions as f64 / (1.0 - gamma).powi(3)
}
