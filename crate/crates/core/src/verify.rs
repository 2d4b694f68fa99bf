//! Property suites that check every lemma, bound and threshold on seeded
//! random instances.
//!
//! Samples run in parallel, but each sample draws from its own seeded stream
//! and results are merged in sample order, so reports are deterministic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diagnostics::{
    finite_k0, improvement_direct, improvement_expression, improvement_lower_bound,
    initial_distance, is_subset, linear_rate_bound, mismatch_coefficient, nonoptimal_mass,
    optimality_condition, pi_equivalence_threshold, pi_optimal_set, smoothness_coefficient,
    solve_optimal, sublinear_bound_pqa_value, sublinear_bound_value, FiniteRule, OptimalSolution,
};
use crate::error::{Error, Result};
use crate::instances::{generate, GeneratorSpec};
use crate::mdp::{
    bellman_backup, dot, policy_evaluate, tol_argmax, value_under, visitation, ActionTable, Policy,
    TabularMdp,
};
use crate::policy_opt::{
    homotopic_update_row, ppg_step_from, pqa_step_from, prototype_update, run_with, schedule_eta,
    RunOptions, StepSchedule, UpdateRule,
};
use crate::simplex::{is_excluded, project_simplex};

/// Step sizes swept by the lemma and improvement suites.
pub const ETA_GRID: [f64; 7] = [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

/// Iteration cap for the finite-convergence runs.
pub const FINITE_RUN_CAP: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Projection,
    Lemmas,
    Improvement,
    Sublinear,
    Finite,
    Linear,
    PiEquiv,
    Homotopic,
    All,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Projection,
        Suite::Lemmas,
        Suite::Improvement,
        Suite::Sublinear,
        Suite::Finite,
        Suite::Linear,
        Suite::PiEquiv,
        Suite::Homotopic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Projection => "projection",
            Suite::Lemmas => "lemmas",
            Suite::Improvement => "improvement",
            Suite::Sublinear => "sublinear",
            Suite::Finite => "finite",
            Suite::Linear => "linear",
            Suite::PiEquiv => "pi-equiv",
            Suite::Homotopic => "homotopic",
            Suite::All => "all",
        }
    }

    /// Number of sampled instances when `--instances` is not given.
    pub fn default_instances(self) -> usize {
        match self {
            Suite::Projection => 10_000,
            Suite::Lemmas | Suite::Improvement => 500,
            Suite::Sublinear | Suite::Finite => 20,
            Suite::Linear => 5,
            Suite::PiEquiv => 200,
            Suite::Homotopic | Suite::All => 0,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .chain([Suite::All])
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::BadParameter(format!("unknown suite '{s}'")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of one property across all of its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    /// Smallest observed `bound - observed`; zero for exact (boolean) properties that pass.
    pub worst_slack: f64,
    pub samples: usize,
    pub failures: usize,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} worst_slack={:.3e} samples={} failures={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.property,
            self.worst_slack,
            self.samples,
            self.failures
        )
    }
}

#[derive(Clone, Debug)]
struct Tally {
    worst: f64,
    samples: usize,
    failures: usize,
}

impl Default for Tally {
    fn default() -> Self {
        Self {
            worst: f64::INFINITY,
            samples: 0,
            failures: 0,
        }
    }
}

impl Tally {
    fn record(&mut self, slack: f64, ok: bool) {
        self.samples += 1;
        if slack.is_nan() {
            self.worst = f64::NAN;
        } else if !self.worst.is_nan() {
            self.worst = self.worst.min(slack);
        }
        if !ok {
            self.failures += 1;
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.samples += other.samples;
        self.failures += other.failures;
        self.worst = if self.worst.is_nan() || other.worst.is_nan() {
            f64::NAN
        } else {
            self.worst.min(other.worst)
        };
    }
}

/// Per-property tallies in first-seen order.
#[derive(Clone, Debug, Default)]
struct Report {
    entries: Vec<(&'static str, Tally)>,
}

impl Report {
    fn entry(&mut self, name: &'static str) -> &mut Tally {
        let idx = match self.entries.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                self.entries.push((name, Tally::default()));
                self.entries.len() - 1
            }
        };
        &mut self.entries[idx].1
    }

    /// Passes iff `slack >= -tol`.
    fn check(&mut self, name: &'static str, slack: f64, tol: f64) {
        self.entry(name).record(slack, slack >= -tol);
    }

    /// Passes iff `slack > 0`.
    fn strict(&mut self, name: &'static str, slack: f64) {
        self.entry(name).record(slack, slack > 0.0);
    }

    fn flag(&mut self, name: &'static str, ok: bool) {
        self.entry(name).record(if ok { 0.0 } else { -1.0 }, ok);
    }

    /// Registers a property without a sample so that it is listed even when vacuous.
    fn declare(&mut self, name: &'static str) {
        self.entry(name);
    }

    fn merge(&mut self, other: &Report) {
        for (name, tally) in &other.entries {
            self.entry(name).merge(tally);
        }
    }

    fn into_results(self, suite: Suite) -> Vec<PropertyResult> {
        self.entries
            .into_iter()
            .map(|(property, t)| PropertyResult {
                suite: suite.name(),
                property,
                passed: t.failures == 0 && !t.worst.is_nan(),
                worst_slack: if t.samples == 0 { 0.0 } else { t.worst },
                samples: t.samples,
                failures: t.failures,
            })
            .collect()
    }
}

/// Runs `suite` (every suite for [`Suite::All`]); `instances` overrides the sample count.
pub fn run_suite(suite: Suite, seed: u64, instances: Option<usize>) -> Result<Vec<PropertyResult>> {
    if suite == Suite::All {
        let mut out = Vec::new();
        for s in Suite::ALL {
            out.extend(run_suite(s, seed, instances)?);
        }
        return Ok(out);
    }
    let n = instances.unwrap_or_else(|| suite.default_instances());
    let report = match suite {
        Suite::Projection => parallel(n, |i| projection_sample(seed, i))?,
        Suite::Lemmas => parallel(n, |i| lemma_sample(seed, i))?,
        Suite::Improvement => parallel(n, |i| improvement_sample(seed, i))?,
        Suite::Sublinear => parallel(n, |i| sublinear_sample(seed, i))?,
        Suite::Finite => parallel(n, |i| finite_sample(seed, i))?,
        Suite::Linear => {
            let mut report = linear_instance(&generate(&GeneratorSpec::Bandit {
                gamma: 0.9,
                delta: 0.5,
            })?)?;
            report.merge(&parallel(n, |i| {
                let mut rng = sample_rng(seed, TAG_LINEAR, i);
                linear_instance(&random_instance(&mut rng)?)
            })?);
            report
        }
        Suite::PiEquiv => parallel(n, |i| pi_equiv_sample(seed, i))?,
        Suite::Homotopic => homotopic_report()?,
        Suite::All => unreachable!(),
    };
    Ok(report.into_results(suite))
}

fn parallel<F>(n: usize, f: F) -> Result<Report>
where
    F: Fn(usize) -> Result<Report> + Sync,
{
    let parts: Vec<Report> = (0..n)
        .into_par_iter()
        .map(|i| f(i))
        .collect::<Result<_>>()?;
    let mut report = Report::default();
    for part in &parts {
        report.merge(part);
    }
    Ok(report)
}

const TAG_PROJECTION: u64 = 0x7072_6f6a;
const TAG_LEMMA: u64 = 0x6c65_6d6d;
const TAG_SUBLINEAR: u64 = 0x7375_626c;
const TAG_FINITE: u64 = 0x6669_6e69;
const TAG_LINEAR: u64 = 0x6c69_6e65;
const TAG_PI_EQUIV: u64 = 0x7069_6571;

/// Independent stream for sample `index` of the suite identified by `tag`.
pub fn sample_rng(seed: u64, tag: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(32));
    rng.set_stream(index as u64);
    rng
}

/// Random MDP with 3..=8 states, 2..=5 actions, gamma in {0.8, 0.9, 0.95} and dense rows.
pub fn random_instance(rng: &mut impl Rng) -> Result<TabularMdp> {
    const GAMMAS: [f64; 3] = [0.8, 0.9, 0.95];
    generate(&GeneratorSpec::Random {
        seed: rng.random(),
        num_states: rng.random_range(3..=8),
        num_actions: rng.random_range(2..=5),
        gamma: GAMMAS[rng.random_range(0..GAMMAS.len())],
        sparsity: 0.0,
    })
}

fn dirichlet(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Random policy mixing dense, sparse and deterministic rows.
pub fn random_policy(rng: &mut impl Rng, num_states: usize, num_actions: usize) -> Policy {
    let mut table = ActionTable::zeros(num_states, num_actions);
    for s in 0..num_states {
        let row = table.row_mut(s);
        match rng.random_range(0..6) {
            0 => row[rng.random_range(0..num_actions)] = 1.0,
            1 | 2 => {
                let keep: Vec<usize> = (0..num_actions).filter(|_| rng.random_bool(0.5)).collect();
                let keep = if keep.is_empty() {
                    vec![rng.random_range(0..num_actions)]
                } else {
                    keep
                };
                for (a, w) in keep.iter().zip(dirichlet(rng, keep.len())) {
                    row[*a] = w;
                }
            }
            _ => row.copy_from_slice(&dirichlet(rng, num_actions)),
        }
    }
    Policy::from_table_unchecked(table)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Minimizer of `||y - p||^2` over the simplex by enumerating every support.
pub fn brute_force_projection(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << n) {
        let members: Vec<usize> = (0..n).filter(|a| mask & (1 << a) != 0).collect();
        let lambda = (1.0 - members.iter().map(|&a| p[a]).sum::<f64>()) / members.len() as f64;
        if members.iter().any(|&a| p[a] + lambda < 0.0) {
            continue;
        }
        let mut y = vec![0.0; n];
        for &a in &members {
            y[a] = p[a] + lambda;
        }
        let dist: f64 = y.iter().zip(p).map(|(u, v)| (u - v) * (u - v)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, y));
        }
    }
    best.expect("the full support is always feasible for some vertex")
        .1
}

fn projection_sample(seed: u64, index: usize) -> Result<Report> {
    let mut rng = sample_rng(seed, TAG_PROJECTION, index);
    let mut report = Report::default();
    let dim = rng.random_range(1..=6);
    let mut p: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    if dim > 1 && rng.random_bool(0.25) {
        let (i, j) = (rng.random_range(0..dim), rng.random_range(0..dim));
        p[j] = p[i];
    }
    let y = project_simplex(&p)?;
    report.check(
        "matches brute-force minimizer",
        -max_abs(&y.point, &brute_force_projection(&p)),
        1e-10,
    );
    let shift = rng.random_range(-10.0..10.0);
    let shifted: Vec<f64> = p.iter().map(|x| x + shift).collect();
    report.check(
        "shift invariance",
        -max_abs(&y.point, &project_simplex(&shifted)?.point),
        1e-12,
    );
    report.check(
        "idempotence",
        -max_abs(&y.point, &project_simplex(&y.point)?.point),
        1e-12,
    );
    let sum: f64 = y.point.iter().sum();
    report.check("lies on the simplex", -(sum - 1.0).abs(), 1e-12);
    report.flag("lies on the simplex", y.point.iter().all(|&v| v >= 0.0));
    if dim > 1 {
        let mut b: Vec<usize> = Vec::new();
        let mut c: Vec<usize> = Vec::new();
        for a in 0..dim {
            if rng.random_bool(0.5) {
                b.push(a);
            } else {
                c.push(a);
            }
        }
        if b.is_empty() {
            b.push(c.pop().expect("dim > 1"));
        } else if c.is_empty() {
            c.push(b.pop().expect("dim > 1"));
        }
        b.sort_unstable();
        c.sort_unstable();
        let excluded = c.iter().all(|&a| y.point[a] == 0.0);
        report.flag(
            "gap property biconditional",
            is_excluded(&p, &b, &c)? == excluded,
        );
    }
    Ok(report)
}

/// Instance, optimal solution and policy shared by the lemma and improvement suites.
fn lemma_setup(
    seed: u64,
    index: usize,
) -> Result<(ChaCha8Rng, TabularMdp, OptimalSolution, Policy)> {
    let mut rng = sample_rng(seed, TAG_LEMMA, index);
    let mdp = random_instance(&mut rng)?;
    let policy = random_policy(&mut rng, mdp.num_states(), mdp.num_actions());
    let opt = solve_optimal(&mdp)?;
    Ok((rng, mdp, opt, policy))
}

fn lemma_sample(seed: u64, index: usize) -> Result<Report> {
    let (mut rng, mdp, opt, policy) = lemma_setup(seed, index)?;
    let mut report = Report::default();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let h = 1.0 / (1.0 - gamma);
    let tol = tol_argmax(gamma);
    let bundle = policy_evaluate(&mdp, &policy)?;

    // Value ranges.
    let v_slack = bundle
        .v
        .iter()
        .map(|&v| v.min(h - v))
        .fold(f64::INFINITY, f64::min);
    let q_slack = bundle
        .q
        .as_slice()
        .iter()
        .map(|&q| q.min(h - q))
        .fold(f64::INFINITY, f64::min);
    let a_slack = bundle
        .adv
        .as_slice()
        .iter()
        .map(|&a| h - a.abs())
        .fold(f64::INFINITY, f64::min);
    report.check("value ranges", v_slack.min(q_slack).min(a_slack), 1e-9);

    // Error transfer between V, Q and A.
    let v_err = opt.value_error(&bundle.v);
    report.check(
        "Q error <= gamma V error",
        gamma * v_err - opt.q_star.max_abs_diff(&bundle.q),
        1e-9,
    );
    report.check(
        "A error <= V error",
        v_err - opt.a_star.max_abs_diff(&bundle.adv),
        1e-9,
    );
    let rho = dirichlet(&mut rng, ns);
    for dist in [mdp.mu(), rho.as_slice()] {
        let rho_min = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = value_under(dist, &opt.v_star)? - value_under(dist, &bundle.v)?;
        report.check(
            "V error <= weighted gap / rho_min",
            gap / rho_min - v_err,
            1e-9,
        );
    }

    // Performance difference against a second policy.
    let other = random_policy(&mut rng, ns, na);
    let other_bundle = policy_evaluate(&mdp, &other)?;
    let d_pi = visitation(&mdp, &policy, &rho)?;
    let lhs = value_under(&rho, &bundle.v)? - value_under(&rho, &other_bundle.v)?;
    let rhs = h
        * (0..ns)
            .map(|s| d_pi[s] * dot(policy.row(s), other_bundle.adv.row(s)))
            .sum::<f64>();
    report.check("performance difference identity", -(lhs - rhs).abs(), 1e-9);

    // Non-optimal mass versus the value gap, both directions.
    let b = nonoptimal_mass(&policy, &opt.optimal_sets);
    let gap_rho = value_under(&rho, &opt.v_star)? - value_under(&rho, &bundle.v)?;
    report.check(
        "gap <= E_d[b] / (1-gamma)^2",
        h * h * dot(&d_pi, &b) - gap_rho,
        1e-9,
    );
    if opt.gap_is_finite() {
        report.check(
            "E_rho[b] <= gap / Delta",
            gap_rho / opt.delta - dot(&rho, &b),
            1e-9,
        );
    } else {
        report.flag("E_rho[b] <= gap / Delta", b.iter().all(|&x| x == 0.0));
    }

    // Prototype-update support structure.
    for s in 0..ns {
        let adv = bundle.adv.row(s);
        let row = policy.row(s);
        let pi_set = pi_optimal_set(adv, tol);
        let off_mass = 1.0 - policy.mass_on(s, &pi_set);
        let max_adv = bundle.max_adv(s);
        let mut previous: Option<Vec<usize>> = None;
        for eta in ETA_GRID {
            let out = prototype_update(row, adv, eta)?;
            let support = &out.support;
            report.flag(
                "support is one of the three cases",
                is_subset(support, &pi_set) || is_subset(&pi_set, support),
            );
            if let Some(prev) = &previous {
                report.flag("support shrinks as eta grows", is_subset(support, prev));
            }
            let worst = support
                .iter()
                .map(|&a| adv[a] - (max_adv - 2.0 * off_mass / eta))
                .fold(f64::INFINITY, f64::min);
            report.check("supported actions have near-maximal advantage", worst, 1e-9);

            let p: Vec<f64> = row
                .iter()
                .zip(adv)
                .map(|(x, a)| x + eta * (a - max_adv))
                .collect();
            if support.len() < na {
                let rest: Vec<usize> = (0..na)
                    .filter(|a| support.binary_search(a).is_err())
                    .collect();
                report.flag(
                    "gap property on the prototype vector",
                    is_excluded(&p, support, &rest)?,
                );
            }
            previous = Some(out.support);
        }
    }
    Ok(report)
}

fn improvement_sample(seed: u64, index: usize) -> Result<Report> {
    let (_, mdp, _, policy) = lemma_setup(seed, index)?;
    let mut report = Report::default();
    let bundle = policy_evaluate(&mdp, &policy)?;
    for s in 0..mdp.num_states() {
        for eta in ETA_GRID {
            let closed = improvement_expression(policy.row(s), bundle.adv.row(s), eta)?;
            let direct = improvement_direct(policy.row(s), bundle.adv.row(s), eta)?;
            report.check(
                "closed form matches direct f_s",
                -(closed - direct).abs(),
                1e-10,
            );
            let lb = improvement_lower_bound(bundle.adv.row(s), eta, mdp.num_actions());
            report.check("f_s >= improvement lower bound", direct - lb, 1e-10);
        }
    }
    Ok(report)
}

fn sublinear_sample(seed: u64, index: usize) -> Result<Report> {
    const ITERS: usize = 2000;
    let mut rng = sample_rng(seed, TAG_SUBLINEAR, index);
    let mdp = random_instance(&mut rng)?;
    let opt = solve_optimal(&mdp)?;
    let mut report = Report::default();
    let gamma = mdp.gamma();
    let na = mdp.num_actions();
    let mu_tilde = mdp.mu_tilde();
    let ratio = mismatch_coefficient(&mdp, &opt, mdp.mu())?;
    let inv_l = 1.0 / smoothness_coefficient(gamma, na);
    let c = 2.0 + 5.0 * na as f64;

    for eta in [0.01, inv_l, 1.0, 100.0, 1e4] {
        let trace = run_with(
            &mdp,
            &opt,
            &UpdateRule::Ppg,
            &StepSchedule::constant(eta),
            &RunOptions::new(ITERS, false),
        )?;
        let name = if eta > inv_l {
            "PPG gap <= bound(k), eta > 1/L"
        } else {
            "PPG gap <= bound(k), eta <= 1/L"
        };
        for pair in trace.records.windows(2) {
            let (cur, next) = (&pair[0], &pair[1]);
            if cur.k >= 1 {
                let bound = sublinear_bound_value(cur.k, gamma, ratio, eta, mu_tilde, na);
                report.check(name, bound - cur.gap_mu, 1e-9);
            }
            let delta_k = cur.gap_mu;
            let progress = (1.0 - gamma).powi(2) * delta_k * delta_k
                / ((1.0 - gamma) * delta_k + c / (eta * mu_tilde))
                / ratio;
            report.check(
                "quadratic progress",
                (delta_k - next.gap_mu) - progress,
                1e-9,
            );
            let lb = cur
                .f_lb
                .as_ref()
                .expect("PPG records carry the lower bound");
            let worst = cur
                .f_s
                .iter()
                .zip(lb)
                .map(|(f, l)| f - l)
                .fold(f64::INFINITY, f64::min);
            report.check("f_s >= lower bound along runs", worst, 1e-10);
        }
    }

    let uniform = Policy::uniform(mdp.num_states(), na);
    let distance = initial_distance(&mdp, &opt, mdp.mu(), &uniform)?;
    for eta in [0.01, 1.0, 100.0] {
        let trace = run_with(
            &mdp,
            &opt,
            &UpdateRule::Pqa,
            &StepSchedule::constant(eta),
            &RunOptions::new(ITERS / 4, false),
        )?;
        for rec in &trace.records {
            let bound = sublinear_bound_pqa_value(rec.k, gamma, eta, distance);
            report.check("PQA gap <= cited O(1/k) bound", bound - rec.gap_mu, 1e-9);
        }
    }
    Ok(report)
}

fn finite_sample(seed: u64, index: usize) -> Result<Report> {
    let mut rng = sample_rng(seed, TAG_FINITE, index);
    let mdp = random_instance(&mut rng)?;
    let opt = solve_optimal(&mdp)?;
    let mut report = Report::default();
    let gamma = mdp.gamma();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mu_tilde = mdp.mu_tilde();
    let ratio = mismatch_coefficient(&mdp, &opt, mdp.mu())?;

    for eta in [0.1, 1.0, 10.0] {
        for (rule, finite_rule, name) in [
            (
                UpdateRule::Ppg,
                FiniteRule::Ppg {
                    eta,
                    mu_tilde,
                    mismatch: ratio,
                    num_actions: na,
                },
                "PPG optimal within k0",
            ),
            (
                UpdateRule::Pqa,
                FiniteRule::Pqa { eta },
                "PQA optimal within k0",
            ),
        ] {
            let k0 = finite_k0(&finite_rule, gamma, opt.delta)?;
            let cap = k0.min(FINITE_RUN_CAP) as usize;
            let trace = run_with(
                &mdp,
                &opt,
                &rule,
                &StepSchedule::constant(eta),
                &RunOptions::new(cap, true).last_record_only(),
            )?;
            let hit = trace.last().is_optimal.then_some(trace.last().k);
            report.check(name, hit.map_or(-1.0, |k| k0 as f64 - k as f64), 0.0);
        }
        optimality_conditions(&mdp, &opt, eta, &mut report)?;
    }

    // Policy iteration.
    let k0_pi = finite_k0(&FiniteRule::Pi, gamma, opt.delta)?;
    let trace = run_with(
        &mdp,
        &opt,
        &UpdateRule::Pi,
        &StepSchedule::constant(1.0),
        &RunOptions::new(k0_pi as usize, true),
    )?;
    let hit = trace.first_optimal();
    report.check(
        "PI optimal within k0",
        hit.map_or(-1.0, |k| k0_pi as f64 - k as f64),
        0.0,
    );

    // Value iteration from V^0 = 0.
    let k0_vi = finite_k0(
        &FiniteRule::Vi {
            initial_gap_inf: opt.value_error(&vec![0.0; ns]),
        },
        gamma,
        opt.delta,
    )?;
    let horizon = k0_vi as usize + 50;
    let mut v = vec![0.0; ns];
    for k in 0..=horizon {
        let backup = bellman_backup(&mdp, &v)?;
        let greedy = Policy::uniform_over(na, &backup.greedy);
        let optimal = opt.is_optimal(&greedy);
        if k as u64 >= k0_vi {
            report.flag("VI greedy optimal for all k >= k0", optimal);
        }
        if opt.gap_is_finite() && gamma * opt.value_error(&v) <= opt.delta / 3.0 {
            report.flag("close values give optimal greedy policy", optimal);
        }
        v = backup.values;
    }
    report.declare("close values give optimal greedy policy");
    Ok(report)
}

/// Steps PPG and PQA manually and checks that every sufficient optimality
/// condition that holds at a state forces the next iterate's support into `A*_s`.
fn optimality_conditions(
    mdp: &TabularMdp,
    opt: &OptimalSolution,
    eta: f64,
    report: &mut Report,
) -> Result<()> {
    const STEPS: usize = 300;
    report.declare("state condition => next support optimal");
    report.declare("value-error condition => next support optimal");
    report.declare("cone condition => next support optimal");
    for ppg in [true, false] {
        let mut policy = Policy::uniform(mdp.num_states(), mdp.num_actions());
        for _ in 0..STEPS {
            let bundle = policy_evaluate(mdp, &policy)?;
            let step = if ppg {
                ppg_step_from(&policy, &bundle, mdp.gamma(), eta)?
            } else {
                pqa_step_from(&policy, &bundle, eta)?
            };
            let checks = optimality_condition(mdp, &policy, &bundle, opt, &step.eta_s);
            for (s, check) in checks.iter().enumerate() {
                let ok = is_subset(&step.policy.support(s), &opt.optimal_sets[s]);
                if check.holds {
                    report.flag("state condition => next support optimal", ok);
                }
                if check.value_form_holds {
                    report.flag("value-error condition => next support optimal", ok);
                }
                if check.cone_form_holds {
                    report.flag("cone condition => next support optimal", ok);
                }
            }
            let next_bundle = policy_evaluate(mdp, &step.policy)?;
            let drop = bundle
                .v
                .iter()
                .zip(&next_bundle.v)
                .map(|(old, new)| new - old)
                .fold(f64::INFINITY, f64::min);
            report.check("monotone improvement", drop, 1e-9);
            let done = opt.is_optimal(&step.policy);
            policy = step.policy;
            if done {
                break;
            }
        }
    }
    Ok(())
}

fn linear_instance(mdp: &TabularMdp) -> Result<Report> {
    const C0: f64 = 1.0;
    const ITERS: usize = 400;
    let opt = solve_optimal(mdp)?;
    let mut report = Report::default();
    let gamma = mdp.gamma();
    for (rule, name) in [
        (UpdateRule::Ppg, "PPG geometric schedule rate"),
        (UpdateRule::Pqa, "PQA geometric schedule rate"),
    ] {
        let trace = run_with(
            mdp,
            &opt,
            &rule,
            &StepSchedule::geometric(C0),
            &RunOptions::new(ITERS, true),
        )?;
        let initial = trace.records[0].gap_inf;
        for rec in &trace.records {
            report.strict(
                name,
                linear_rate_bound(rec.k, gamma, C0, initial) - rec.gap_inf,
            );
        }
        report.flag(
            "geometric schedule reaches optimality",
            trace.last().is_optimal,
        );
    }
    let trace = run_with(
        mdp,
        &opt,
        &UpdateRule::Pi,
        &StepSchedule::constant(1.0),
        &RunOptions::new(ITERS, true),
    )?;
    let initial = trace.records[0].gap_inf;
    for rec in &trace.records {
        report.check(
            "PI contraction",
            linear_rate_bound(rec.k, gamma, 0.0, initial) - rec.gap_inf,
            1e-9,
        );
    }
    Ok(report)
}

fn pi_equiv_sample(seed: u64, index: usize) -> Result<Report> {
    const MARGIN: f64 = 1.01;
    let mut rng = sample_rng(seed, TAG_PI_EQUIV, index);
    let mdp = random_instance(&mut rng)?;
    let policy = random_policy(&mut rng, mdp.num_states(), mdp.num_actions());
    let mut report = Report::default();
    let tol = tol_argmax(mdp.gamma());
    let bundle = policy_evaluate(&mdp, &policy)?;
    match pi_equivalence_threshold(&policy, &bundle, tol) {
        Ok(th) => {
            let eta = if th.f_pi > 0.0 { MARGIN * th.f_pi } else { 1.0 };
            for s in 0..mdp.num_states() {
                let out = prototype_update(policy.row(s), bundle.adv.row(s), eta)?;
                report.flag(
                    "step above threshold is a PI step",
                    is_subset(&out.support, &pi_optimal_set(bundle.adv.row(s), tol)),
                );
            }
        }
        Err(Error::AllActionsPiOptimal) => report.declare("step above threshold is a PI step"),
        Err(e) => return Err(e),
    }

    // PPG under the adaptive schedule acts as PI at every iteration.
    let schedule = StepSchedule::adaptive(MARGIN);
    let mut current = policy;
    for k in 0..5 {
        let bundle = policy_evaluate(&mdp, &current)?;
        let eta = schedule_eta(&schedule, k, &mdp, &current, &bundle)?;
        let step = ppg_step_from(&current, &bundle, mdp.gamma(), eta)?;
        for s in 0..mdp.num_states() {
            report.flag(
                "adaptive PPG iterates are PI steps",
                is_subset(
                    &step.policy.support(s),
                    &pi_optimal_set(bundle.adv.row(s), tol),
                ),
            );
        }
        current = step.policy;
    }
    Ok(report)
}

/// Bandit with gamma = 0.9 and Delta = 0.5, started at the optimal policy.
fn homotopic_report() -> Result<Report> {
    const GAMMA: f64 = 0.9;
    const DELTA: f64 = 0.5;
    let mut report = Report::default();
    let mdp = generate(&GeneratorSpec::Bandit {
        gamma: GAMMA,
        delta: DELTA,
    })?;
    let start = Policy::from_rows(&[vec![1.0, 0.0]])?;
    let bundle = policy_evaluate(&mdp, &start)?;
    let anchor = Policy::uniform(1, 2);
    let coupling = 1.0 / GAMMA;
    let adv = bundle.adv.row(0);

    let eta = 0.1;
    let (row, lambda) = homotopic_update_row(start.row(0), adv, anchor.row(0), eta, coupling)?;
    let lambda_closed = 0.5 * (1.0 - 1.0 / GAMMA - eta * DELTA);
    report.check(
        "lambda matches closed form at eta = 0.1",
        -(lambda - lambda_closed).abs(),
        1e-12,
    );
    report.check(
        "pi+(a1) = gamma (1 - lambda) at eta = 0.1",
        -(row[0] - GAMMA * (1.0 - lambda_closed)).abs(),
        1e-12,
    );
    report.strict("optimality lost at eta = 0.1", 1.0 - row[0]);

    let (row, _) = homotopic_update_row(start.row(0), adv, anchor.row(0), 0.3, coupling)?;
    report.flag("optimality kept exactly at eta = 0.3", row == [1.0, 0.0]);

    let threshold = (1.0 / GAMMA - 1.0) / DELTA;
    for eta in [0.01, 0.05, 0.1, 0.2, 0.25, 0.3, 1.0, 10.0] {
        let (row, _) = homotopic_update_row(start.row(0), adv, anchor.row(0), eta, coupling)?;
        report.flag(
            "optimality kept iff eta >= (1/gamma - 1)/Delta",
            (row[1] == 0.0) == (eta >= threshold),
        );
    }
    Ok(report)
}
