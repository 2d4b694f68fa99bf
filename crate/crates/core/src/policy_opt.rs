//! The prototype update and its instances (PPG, PQA, PI, VI, homotopic PQA),
//! step-size schedules and the optimization loop.

use crate::diagnostics::{
    improvement_lower_bound, nonoptimal_mass, pi_equivalence_threshold, solve_optimal,
    OptimalSolution,
};
use crate::error::{Error, Result};
use crate::mdp::{
    argmax_set, bellman_backup, dot, policy_evaluate, tol_argmax, value_under, ActionTable, Policy,
    TabularMdp, ValueBundle,
};
use crate::simplex::{project_scaled_simplex, project_simplex};

pub const DEFAULT_STEP_CAP: f64 = 1e12;

/// Successive policies closer than this (max-norm) with unchanged supports end a non-optimal run.
pub const NUMERICAL_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Constant(f64),
    /// `eta_k = (1/mu_tilde) (1/c0) 2 / gamma^(2k+1)`.
    GeometricIncreasing {
        c0: f64,
    },
    /// `eta_k = margin * F^{pi_k} / mu_tilde`.
    AdaptivePiThreshold {
        margin: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    /// Upper clamp on the returned step.
    pub cap: f64,
}

impl StepSchedule {
    pub fn constant(eta: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant(eta),
            cap: DEFAULT_STEP_CAP,
        }
    }

    pub fn geometric(c0: f64) -> Self {
        Self {
            kind: ScheduleKind::GeometricIncreasing { c0 },
            cap: DEFAULT_STEP_CAP,
        }
    }

    pub fn adaptive(margin: f64) -> Self {
        Self {
            kind: ScheduleKind::AdaptivePiThreshold { margin },
            cap: DEFAULT_STEP_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ScheduleKind::Constant(eta) => eta > 0.0 && eta.is_finite(),
            ScheduleKind::GeometricIncreasing { c0 } => c0 > 0.0 && c0.is_finite(),
            ScheduleKind::AdaptivePiThreshold { margin } => margin > 1.0 && margin.is_finite(),
        };
        if !ok || !(self.cap > 0.0) {
            return Err(Error::BadParameter(format!(
                "invalid step schedule {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateRule {
    Ppg,
    Pqa,
    Pi,
    Vi,
    /// Euclidean homotopic PQA with a fixed coupling `1 + eta_k tau_k > 1`
    /// toward the anchor policy.
    HomotopicPqa {
        coupling: f64,
        anchor: Policy,
    },
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Ppg => "ppg",
            UpdateRule::Pqa => "pqa",
            UpdateRule::Pi => "pi",
            UpdateRule::Vi => "vi",
            UpdateRule::HomotopicPqa { .. } => "hpqa",
        }
    }

    fn uses_step_size(&self) -> bool {
        !matches!(self, UpdateRule::Pi | UpdateRule::Vi)
    }
}

/// One row of the prototype update.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeOutput {
    pub row: Vec<f64>,
    pub lambda: f64,
    pub support: Vec<usize>,
}

/// `pi+_a = (pi_a + eta_s A_a + lambda)_+` with `lambda` chosen so the row sums to one.
pub fn prototype_update(
    policy_row: &[f64],
    adv_row: &[f64],
    eta_s: f64,
) -> Result<PrototypeOutput> {
    if policy_row.len() != adv_row.len() {
        return Err(Error::DimensionMismatch {
            what: "advantage row",
            expected: policy_row.len(),
            found: adv_row.len(),
        });
    }
    if adv_row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteAdvantage);
    }
    if !(eta_s > 0.0) || !eta_s.is_finite() {
        return Err(Error::BadParameter(format!(
            "per-state step must be positive, got {eta_s}"
        )));
    }
    // Shifting by max A leaves the projection unchanged and keeps the supported
    // coordinates O(1) even for huge steps, so rounding does not scale with eta_s.
    let max_adv = adv_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = policy_row
        .iter()
        .zip(adv_row)
        .map(|(pi, a)| pi + eta_s * (a - max_adv))
        .collect();
    let proj = project_simplex(&p)?;
    Ok(PrototypeOutput {
        row: proj.point,
        lambda: proj.offset - eta_s * max_adv,
        support: proj.support,
    })
}

/// Output of one policy update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub policy: Policy,
    /// Effective per-state step; zero for the step-free rules (PI, VI).
    pub eta_s: Vec<f64>,
}

/// Applies the prototype update at every state with the given per-state steps.
pub fn apply_prototype(policy: &Policy, bundle: &ValueBundle, eta_s: &[f64]) -> Result<Policy> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    let mut next = ActionTable::zeros(ns, na);
    for s in 0..ns {
        let out = prototype_update(policy.row(s), bundle.adv.row(s), eta_s[s])?;
        next.row_mut(s).copy_from_slice(&out.row);
    }
    Ok(Policy::from_table_unchecked(next))
}

/// `eta_s = eta * d^pi_mu(s) / (1 - gamma)`.
pub fn ppg_effective_steps(bundle: &ValueBundle, gamma: f64, eta: f64) -> Vec<f64> {
    bundle
        .visitation
        .iter()
        .map(|d| eta * d / (1.0 - gamma))
        .collect()
}

pub fn ppg_step_from(
    policy: &Policy,
    bundle: &ValueBundle,
    gamma: f64,
    eta: f64,
) -> Result<StepOutcome> {
    let eta_s = ppg_effective_steps(bundle, gamma, eta);
    let policy = apply_prototype(policy, bundle, &eta_s)?;
    Ok(StepOutcome { policy, eta_s })
}

/// Projected policy gradient step with exact evaluation.
pub fn ppg_step(mdp: &TabularMdp, policy: &Policy, eta: f64) -> Result<(Policy, Vec<f64>)> {
    let bundle = policy_evaluate(mdp, policy)?;
    let out = ppg_step_from(policy, &bundle, mdp.gamma(), eta)?;
    Ok((out.policy, out.eta_s))
}

pub fn pqa_step_from(policy: &Policy, bundle: &ValueBundle, eta: f64) -> Result<StepOutcome> {
    let eta_s = vec![eta; policy.num_states()];
    let policy = apply_prototype(policy, bundle, &eta_s)?;
    Ok(StepOutcome { policy, eta_s })
}

/// Projected Q-ascent step: the prototype update with `eta_s = eta` at every state.
pub fn pqa_step(mdp: &TabularMdp, policy: &Policy, eta: f64) -> Result<(Policy, Vec<f64>)> {
    let bundle = policy_evaluate(mdp, policy)?;
    let out = pqa_step_from(policy, &bundle, eta)?;
    Ok((out.policy, out.eta_s))
}

/// Greedy policy, uniform over `argmax_a A^pi(s, a)` at every state.
pub fn pi_step_from(bundle: &ValueBundle, gamma: f64) -> Policy {
    let tol = tol_argmax(gamma);
    let sets: Vec<Vec<usize>> = bundle.adv.rows().map(|row| argmax_set(row, tol)).collect();
    Policy::uniform_over(bundle.adv.num_actions(), &sets)
}

pub fn pi_step(mdp: &TabularMdp, policy: &Policy) -> Result<Policy> {
    let bundle = policy_evaluate(mdp, policy)?;
    Ok(pi_step_from(&bundle, mdp.gamma()))
}

/// One value-iteration backup; returns `T v` and the policy greedy with respect to `v`.
pub fn vi_step(mdp: &TabularMdp, v: &[f64]) -> Result<(Vec<f64>, Policy)> {
    let backup = bellman_backup(mdp, v)?;
    let greedy = Policy::uniform_over(mdp.num_actions(), &backup.greedy);
    Ok((backup.values, greedy))
}

/// One state of the homotopic PQA update.
///
/// Returns the new row and `lambda` such that
/// `row = (1/c) (pi + eta A + (c-1)(anchor - 1/|A|) - lambda)_+` sums to one,
/// i.e. the untruncated vector sums to `c` after the shift. With a uniform
/// anchor the anchor term vanishes.
pub fn homotopic_update_row(
    policy_row: &[f64],
    adv_row: &[f64],
    anchor_row: &[f64],
    eta: f64,
    coupling: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(coupling > 1.0) || !coupling.is_finite() {
        return Err(Error::BadParameter(format!(
            "coupling must exceed 1, got {coupling}"
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::BadParameter(format!(
            "step must be positive, got {eta}"
        )));
    }
    if adv_row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteAdvantage);
    }
    let n = policy_row.len() as f64;
    let x: Vec<f64> = policy_row
        .iter()
        .zip(adv_row)
        .zip(anchor_row)
        .map(|((pi, a), w)| pi + eta * a + (coupling - 1.0) * w)
        .collect();
    let proj = project_scaled_simplex(&x, coupling)?;
    let lambda = -proj.offset - (coupling - 1.0) / n;
    let row = proj.point.iter().map(|y| y / coupling).collect();
    Ok((row, lambda))
}

pub fn homotopic_pqa_step_from(
    policy: &Policy,
    bundle: &ValueBundle,
    anchor: &Policy,
    eta: f64,
    coupling: f64,
) -> Result<Policy> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    let mut next = ActionTable::zeros(ns, na);
    for s in 0..ns {
        let (row, _) = homotopic_update_row(
            policy.row(s),
            bundle.adv.row(s),
            anchor.row(s),
            eta,
            coupling,
        )?;
        next.row_mut(s).copy_from_slice(&row);
    }
    Ok(Policy::from_table_unchecked(next))
}

pub fn homotopic_pqa_step(
    mdp: &TabularMdp,
    policy: &Policy,
    anchor: &Policy,
    eta: f64,
    coupling: f64,
) -> Result<Policy> {
    let bundle = policy_evaluate(mdp, policy)?;
    homotopic_pqa_step_from(policy, &bundle, anchor, eta, coupling)
}

/// Step size for iteration `k`, clamped to `schedule.cap`.
///
/// The adaptive schedule needs the current policy's advantages, hence the bundle.
pub fn schedule_eta(
    schedule: &StepSchedule,
    k: usize,
    mdp: &TabularMdp,
    policy: &Policy,
    bundle: &ValueBundle,
) -> Result<f64> {
    let mu_tilde = mdp.mu_tilde();
    let eta = match schedule.kind {
        ScheduleKind::Constant(eta) => eta,
        ScheduleKind::GeometricIncreasing { c0 } => {
            let exponent = 2.0 * k as f64 + 1.0;
            (1.0 / mu_tilde) * (1.0 / c0) * 2.0 / mdp.gamma().powf(exponent)
        }
        ScheduleKind::AdaptivePiThreshold { margin } => {
            match pi_equivalence_threshold(policy, bundle, tol_argmax(mdp.gamma())) {
                Ok(th) if th.f_pi > 0.0 => margin * th.f_pi / mu_tilde,
                // F = 0: every positive step is already a PI step.
                Ok(_) | Err(Error::AllActionsPiOptimal) => margin / mu_tilde,
                Err(e) => return Err(e),
            }
        }
    };
    Ok(if eta.is_nan() {
        schedule.cap
    } else {
        eta.min(schedule.cap)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminatedReason {
    ReachedOptimal,
    MaxIterations,
    NumericalFloor,
}

/// Diagnostics for iterate `k` and the step taken from it.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub k: usize,
    /// Scalar step; zero for PI and VI.
    pub eta: f64,
    pub eta_s: Vec<f64>,
    pub value_mu: f64,
    pub gap_mu: f64,
    pub gap_inf: f64,
    pub v: Vec<f64>,
    pub max_adv: Vec<f64>,
    /// `|B_s|` of the next iterate.
    pub support_sizes: Vec<usize>,
    pub b_max: f64,
    /// `f_s = sum_a pi^{k+1}_{s,a} A^k_{s,a}`.
    pub f_s: Vec<f64>,
    /// Improvement lower bound per state; `None` for rules it does not cover (VI, homotopic PQA).
    pub f_lb: Option<Vec<f64>>,
    pub is_optimal: bool,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
    pub terminal_policy: Policy,
    pub terminated_reason: TerminatedReason,
}

impl RunTrace {
    /// First iteration index whose policy is optimal.
    pub fn first_optimal(&self) -> Option<usize> {
        self.records.iter().find(|r| r.is_optimal).map(|r| r.k)
    }

    pub fn last(&self) -> &IterationRecord {
        self.records
            .last()
            .expect("a trace always holds at least one record")
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_iters: usize,
    pub stop_on_optimal: bool,
    /// Defaults to the uniform policy.
    pub initial_policy: Option<Policy>,
    /// When false only the final record is retained.
    pub keep_records: bool,
}

impl RunOptions {
    pub fn new(max_iters: usize, stop_on_optimal: bool) -> Self {
        Self {
            max_iters,
            stop_on_optimal,
            initial_policy: None,
            keep_records: true,
        }
    }

    pub fn with_initial_policy(mut self, policy: Policy) -> Self {
        self.initial_policy = Some(policy);
        self
    }

    pub fn last_record_only(mut self) -> Self {
        self.keep_records = false;
        self
    }
}

/// Solves the MDP exactly and runs `rule` from the uniform policy.
pub fn run(
    mdp: &TabularMdp,
    rule: &UpdateRule,
    schedule: &StepSchedule,
    max_iters: usize,
    stop_on_optimal: bool,
) -> Result<RunTrace> {
    let opt = solve_optimal(mdp)?;
    run_with(
        mdp,
        &opt,
        rule,
        schedule,
        &RunOptions::new(max_iters, stop_on_optimal),
    )
}

/// Runs `rule` against a precomputed optimal solution.
pub fn run_with(
    mdp: &TabularMdp,
    opt: &OptimalSolution,
    rule: &UpdateRule,
    schedule: &StepSchedule,
    options: &RunOptions,
) -> Result<RunTrace> {
    if rule.uses_step_size() {
        schedule.validate()?;
    }
    if let UpdateRule::HomotopicPqa { coupling, anchor } = rule {
        if !(*coupling > 1.0) {
            return Err(Error::BadParameter(format!(
                "coupling must exceed 1, got {coupling}"
            )));
        }
        if anchor.num_states() != mdp.num_states() || anchor.num_actions() != mdp.num_actions() {
            return Err(Error::DimensionMismatch {
                what: "anchor policy states",
                expected: mdp.num_states(),
                found: anchor.num_states(),
            });
        }
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let v_star_mu = value_under(mdp.mu(), &opt.v_star)?;

    // VI carries the value iterate one step ahead of its policy: while `policy`
    // is greedy with respect to V^k, `vi_values` already holds V^{k+1} = T V^k.
    let mut vi_values = vec![0.0; ns];
    let mut policy = match (rule, &options.initial_policy) {
        (UpdateRule::Vi, _) => {
            let (next_v, greedy) = vi_step(mdp, &vi_values)?;
            vi_values = next_v;
            greedy
        }
        (_, Some(p)) => p.clone(),
        (_, None) => Policy::uniform(ns, na),
    };

    let mut records = Vec::new();
    let mut k = 0usize;
    loop {
        let bundle = policy_evaluate(mdp, &policy)?;
        let value_mu = value_under(mdp.mu(), &bundle.v)?;
        let gap_inf = opt
            .v_star
            .iter()
            .zip(&bundle.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let is_optimal = opt.is_optimal(&policy);
        let b_max = nonoptimal_mass(&policy, &opt.optimal_sets)
            .into_iter()
            .fold(0.0, f64::max);
        let max_adv: Vec<f64> = (0..ns).map(|s| bundle.max_adv(s)).collect();

        let eta = if rule.uses_step_size() {
            schedule_eta(schedule, k, mdp, &policy, &bundle)?
        } else {
            0.0
        };
        let (next, eta_s, next_vi) = match rule {
            UpdateRule::Ppg => {
                let out = ppg_step_from(&policy, &bundle, gamma, eta)?;
                (out.policy, out.eta_s, None)
            }
            UpdateRule::Pqa => {
                let out = pqa_step_from(&policy, &bundle, eta)?;
                (out.policy, out.eta_s, None)
            }
            UpdateRule::Pi => (pi_step_from(&bundle, gamma), vec![0.0; ns], None),
            UpdateRule::Vi => {
                let (next_v, greedy) = vi_step(mdp, &vi_values)?;
                (greedy, vec![0.0; ns], Some(next_v))
            }
            UpdateRule::HomotopicPqa { coupling, anchor } => {
                let p = homotopic_pqa_step_from(&policy, &bundle, anchor, eta, *coupling)?;
                (p, vec![eta; ns], None)
            }
        };

        let f_s: Vec<f64> = (0..ns)
            .map(|s| dot(next.row(s), bundle.adv.row(s)))
            .collect();
        let f_lb = match rule {
            UpdateRule::Ppg | UpdateRule::Pqa => Some(
                (0..ns)
                    .map(|s| improvement_lower_bound(bundle.adv.row(s), eta_s[s], na))
                    .collect(),
            ),
            UpdateRule::Pi => Some(
                (0..ns)
                    .map(|s| improvement_lower_bound(bundle.adv.row(s), f64::INFINITY, na))
                    .collect(),
            ),
            _ => None,
        };
        let support_sizes = (0..ns).map(|s| next.support(s).len()).collect();

        let record = IterationRecord {
            k,
            eta,
            eta_s,
            value_mu,
            gap_mu: v_star_mu - value_mu,
            gap_inf,
            v: bundle.v,
            max_adv,
            support_sizes,
            b_max,
            f_s,
            f_lb,
            is_optimal,
        };
        if options.keep_records || records.is_empty() {
            records.push(record);
        } else {
            records[0] = record;
        }

        if options.stop_on_optimal && is_optimal {
            return Ok(finish(records, policy, TerminatedReason::ReachedOptimal));
        }
        if k >= options.max_iters {
            return Ok(finish(records, policy, TerminatedReason::MaxIterations));
        }
        let stalled = match &next_vi {
            Some(next_v) => max_diff(next_v, &vi_values) < NUMERICAL_FLOOR,
            // Dropping dust mass is a real change even when the move itself is tiny.
            None => {
                next.max_abs_diff(&policy) < NUMERICAL_FLOOR
                    && (0..policy.num_states()).all(|s| next.support(s) == policy.support(s))
            }
        };
        if stalled && !is_optimal {
            return Ok(finish(records, policy, TerminatedReason::NumericalFloor));
        }
        if let Some(next_v) = next_vi {
            vi_values = next_v;
        }
        policy = next;
        k += 1;
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn finish(records: Vec<IterationRecord>, policy: Policy, reason: TerminatedReason) -> RunTrace {
    RunTrace {
        records,
        terminal_policy: policy,
        terminated_reason: reason,
    }
}
