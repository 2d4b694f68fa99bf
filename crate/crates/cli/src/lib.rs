//! Command-line front end: instance generation, traced runs, step-size sweeps
//! and the verification suites.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use ppgkit_core::diagnostics::{
    finite_k0, initial_distance, linear_rate_bound, mismatch_coefficient, pi_equivalence_threshold,
    smoothness_coefficient, solve_optimal, sublinear_bound_pqa_value, sublinear_bound_value,
    FiniteRule, OptimalSolution,
};
use ppgkit_core::fmt::sig17;
use ppgkit_core::instances::{generate, load_mdp, save_mdp, GeneratorSpec};
use ppgkit_core::mdp::{policy_evaluate, tol_argmax, Policy, TabularMdp};
use ppgkit_core::policy_opt::{
    run_with, RunOptions, RunTrace, ScheduleKind, StepSchedule, UpdateRule,
};
use ppgkit_core::verify::{run_suite, PropertyResult, Suite};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "PPGKIT_THREADS";

pub const TRACE_COLUMNS: [&str; 17] = [
    "k",
    "eta",
    "eta_s_min",
    "eta_s_max",
    "value_mu",
    "gap_mu",
    "gap_inf",
    "max_adv_max",
    "b_max",
    "f_min",
    "f_lb_min",
    "f_slack_min",
    "sublinear_bound",
    "linear_bound",
    "support_min",
    "support_max",
    "is_optimal",
];

pub const SWEEP_COLUMNS: [&str; 5] = [
    "eta",
    "eta_over_inv_L",
    "iters_to_optimal",
    "max_bound_violation",
    "min_f_slack",
];

#[derive(Debug, Parser)]
#[command(
    name = "ppgkit",
    version,
    about = "Exact tabular policy optimization and convergence diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an MDP and write it as JSON.
    Gen(GenArgs),
    /// Run one method and write a per-iteration CSV trace plus a meta.json file.
    Run(RunArgs),
    /// Run PPG or PQA for several constant step sizes and summarize each run.
    Sweep(SweepArgs),
    /// Run the property suites; exit 0 iff every property holds.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Random,
    Bandit,
    Chain,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 2)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    /// Reward gap of the bandit.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub sparsity: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RuleName {
    Ppg,
    Pqa,
    Pi,
    Vi,
    Hpqa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleName {
    Constant,
    Geometric,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RhoName {
    Mu,
    Uniform,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long, value_enum)]
    pub rule: RuleName,
    #[arg(long, value_enum, default_value_t = ScheduleName::Constant)]
    pub schedule: ScheduleName,
    /// Constant step size.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// Constant of the geometric schedule.
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,
    /// Multiplier on the PI threshold for the adaptive schedule.
    #[arg(long, default_value_t = 1.01)]
    pub margin: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    /// Distribution entering the mismatch coefficient of the sublinear bound.
    #[arg(long, value_enum, default_value_t = RhoName::Mu)]
    pub rho: RhoName,
    #[arg(long)]
    pub stop_on_optimal: bool,
    /// Homotopic coupling 1 + eta*tau; defaults to 1/gamma.
    #[arg(long)]
    pub coupling: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long, value_enum)]
    pub rule: RuleName,
    /// Comma-separated constant step sizes.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub etas: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Overrides the per-suite sample count.
    #[arg(long)]
    pub instances: Option<usize>,
}

/// Sizes the global rayon pool from `PPGKIT_THREADS` when it is set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got '{raw}'"))?;
    // A second initialization (e.g. in tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<()> {
    let spec = match args.kind {
        Kind::Random => GeneratorSpec::Random {
            seed: args.seed,
            num_states: args.states,
            num_actions: args.actions,
            gamma: args.gamma,
            sparsity: args.sparsity,
        },
        Kind::Bandit => GeneratorSpec::Bandit {
            gamma: args.gamma,
            delta: args.delta,
        },
        Kind::Chain => GeneratorSpec::Chain {
            num_states: args.states,
            gamma: args.gamma,
        },
    };
    let mdp = generate(&spec)?;
    save_mdp(&mdp, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

/// Everything a trace needs besides the run itself.
pub struct TraceContext<'a> {
    pub mdp: &'a TabularMdp,
    pub opt: &'a OptimalSolution,
    pub rule: RuleName,
    pub schedule: StepSchedule,
    pub rho: Vec<f64>,
}

impl TraceContext<'_> {
    fn mismatch(&self) -> anyhow::Result<f64> {
        Ok(mismatch_coefficient(self.mdp, self.opt, &self.rho)?)
    }

    /// Per-iteration sublinear bound, when one applies to this rule and schedule.
    fn sublinear_bound(&self) -> anyhow::Result<Option<Box<dyn Fn(usize) -> f64 + '_>>> {
        let ScheduleKind::Constant(eta) = self.schedule.kind else {
            return Ok(None);
        };
        let gamma = self.mdp.gamma();
        match self.rule {
            RuleName::Ppg => {
                let ratio = self.mismatch()?;
                let (mu_tilde, na) = (self.mdp.mu_tilde(), self.mdp.num_actions());
                Ok(Some(Box::new(move |k| {
                    if k == 0 {
                        1.0 / (1.0 - gamma)
                    } else {
                        sublinear_bound_value(k, gamma, ratio, eta, mu_tilde, na)
                    }
                })))
            }
            RuleName::Pqa => {
                let uniform = Policy::uniform(self.mdp.num_states(), self.mdp.num_actions());
                let distance = initial_distance(self.mdp, self.opt, &self.rho, &uniform)?;
                Ok(Some(Box::new(move |k| {
                    sublinear_bound_pqa_value(k, gamma, eta, distance)
                })))
            }
            _ => Ok(None),
        }
    }

    /// `c0` of the linear-rate bound, when one applies.
    fn linear_c0(&self) -> Option<f64> {
        match (self.rule, self.schedule.kind) {
            (RuleName::Pi, _) => Some(0.0),
            (RuleName::Ppg | RuleName::Pqa, ScheduleKind::GeometricIncreasing { c0 }) => Some(c0),
            (RuleName::Ppg | RuleName::Pqa, ScheduleKind::AdaptivePiThreshold { .. }) => Some(0.0),
            _ => None,
        }
    }
}

fn min_max(xs: impl IntoIterator<Item = f64>) -> (f64, f64) {
    xs.into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

fn cell(x: Option<f64>) -> String {
    x.map(sig17).unwrap_or_default()
}

/// Renders a run as the trace CSV (header included).
pub fn trace_csv(ctx: &TraceContext<'_>, trace: &RunTrace) -> anyhow::Result<String> {
    let sublinear = ctx.sublinear_bound()?;
    let linear_c0 = ctx.linear_c0();
    let initial_gap = trace.records.first().map_or(0.0, |r| r.gap_inf);
    let gamma = ctx.mdp.gamma();

    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for rec in &trace.records {
        let (eta_lo, eta_hi) = min_max(rec.eta_s.iter().copied());
        let (_, adv_hi) = min_max(rec.max_adv.iter().copied());
        let (f_lo, _) = min_max(rec.f_s.iter().copied());
        let (f_lb_min, f_slack_min) = match &rec.f_lb {
            Some(lb) => (
                Some(min_max(lb.iter().copied()).0),
                Some(min_max(rec.f_s.iter().zip(lb).map(|(f, l)| f - l)).0),
            ),
            None => (None, None),
        };
        let (sup_lo, sup_hi) = min_max(rec.support_sizes.iter().map(|&n| n as f64));
        let fields = [
            rec.k.to_string(),
            sig17(rec.eta),
            sig17(eta_lo),
            sig17(eta_hi),
            sig17(rec.value_mu),
            sig17(rec.gap_mu),
            sig17(rec.gap_inf),
            sig17(adv_hi),
            sig17(rec.b_max),
            sig17(f_lo),
            cell(f_lb_min),
            cell(f_slack_min),
            cell(sublinear.as_ref().map(|b| b(rec.k))),
            cell(linear_c0.map(|c0| linear_rate_bound(rec.k, gamma, c0, initial_gap))),
            (sup_lo as usize).to_string(),
            (sup_hi as usize).to_string(),
            rec.is_optimal.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// Constants of the instance and the k0 bounds evaluated for the run's settings.
pub fn trace_meta(ctx: &TraceContext<'_>, eta: f64, trace: &RunTrace) -> anyhow::Result<Value> {
    let mdp = ctx.mdp;
    let opt = ctx.opt;
    let gamma = mdp.gamma();
    let na = mdp.num_actions();
    let mu_tilde = mdp.mu_tilde();
    let ratio_mu = mismatch_coefficient(mdp, opt, mdp.mu())?;
    let initial = Policy::uniform(mdp.num_states(), na);
    let bundle = policy_evaluate(mdp, &initial)?;
    let (delta_pi0, f_pi0) = match pi_equivalence_threshold(&initial, &bundle, tol_argmax(gamma)) {
        Ok(th) => (finite_or_null(th.delta_pi), json!(th.f_pi)),
        Err(_) => (Value::Null, json!(0.0)),
    };
    let k0 = |rule: FiniteRule| -> Value {
        finite_k0(&rule, gamma, opt.delta).map_or(Value::Null, |k| json!(k))
    };
    let v0_gap = opt.value_error(&vec![0.0; mdp.num_states()]);
    Ok(json!({
        "rule": format!("{:?}", ctx.rule).to_lowercase(),
        "schedule": schedule_label(&ctx.schedule),
        "eta": eta,
        "gamma": gamma,
        "num_states": mdp.num_states(),
        "num_actions": na,
        "L": smoothness_coefficient(gamma, na),
        "delta": finite_or_null(opt.delta),
        "F_pi0": f_pi0,
        "delta_pi0": delta_pi0,
        "mu_tilde": mu_tilde,
        "mismatch_mu": ratio_mu,
        "mismatch_rho": ctx.mismatch()?,
        "k0": {
            "ppg": k0(FiniteRule::Ppg { eta, mu_tilde, mismatch: ratio_mu, num_actions: na }),
            "pqa": k0(FiniteRule::Pqa { eta }),
            "pi": k0(FiniteRule::Pi),
            "vi": k0(FiniteRule::Vi { initial_gap_inf: v0_gap }),
        },
        "rows": trace.records.len(),
        "terminated": format!("{:?}", trace.terminated_reason),
    }))
}

fn schedule_label(schedule: &StepSchedule) -> &'static str {
    match schedule.kind {
        ScheduleKind::Constant(_) => "constant",
        ScheduleKind::GeometricIncreasing { .. } => "geometric",
        ScheduleKind::AdaptivePiThreshold { .. } => "adaptive",
    }
}

/// `trace.csv` -> `trace.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    match out.extension() {
        Some(ext) if ext == "csv" => out.with_extension("meta.json"),
        _ => {
            let mut name = out.as_os_str().to_owned();
            name.push(".meta.json");
            PathBuf::from(name)
        }
    }
}

fn build_rule(rule: RuleName, mdp: &TabularMdp, coupling: Option<f64>) -> UpdateRule {
    match rule {
        RuleName::Ppg => UpdateRule::Ppg,
        RuleName::Pqa => UpdateRule::Pqa,
        RuleName::Pi => UpdateRule::Pi,
        RuleName::Vi => UpdateRule::Vi,
        RuleName::Hpqa => UpdateRule::HomotopicPqa {
            coupling: coupling.unwrap_or(1.0 / mdp.gamma()),
            anchor: Policy::uniform(mdp.num_states(), mdp.num_actions()),
        },
    }
}

fn build_schedule(args: &RunArgs) -> StepSchedule {
    match args.schedule {
        ScheduleName::Constant => StepSchedule::constant(args.eta),
        ScheduleName::Geometric => StepSchedule::geometric(args.c0),
        ScheduleName::Adaptive => StepSchedule::adaptive(args.margin),
    }
}

fn rho_for(name: RhoName, mdp: &TabularMdp) -> Vec<f64> {
    match name {
        RhoName::Mu => mdp.mu().to_vec(),
        RhoName::Uniform => vec![1.0 / mdp.num_states() as f64; mdp.num_states()],
    }
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let mdp = load_mdp(&args.mdp).with_context(|| format!("loading {}", args.mdp.display()))?;
    let opt = solve_optimal(&mdp)?;
    let rule = build_rule(args.rule, &mdp, args.coupling);
    let schedule = build_schedule(args);
    let trace = run_with(
        &mdp,
        &opt,
        &rule,
        &schedule,
        &RunOptions::new(args.iters, args.stop_on_optimal),
    )?;
    let ctx = TraceContext {
        mdp: &mdp,
        opt: &opt,
        rule: args.rule,
        schedule,
        rho: rho_for(args.rho, &mdp),
    };
    std::fs::write(&args.out, trace_csv(&ctx, &trace)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let meta = trace_meta(&ctx, args.eta, &trace)?;
    let meta_out = meta_path(&args.out);
    std::fs::write(&meta_out, serde_json::to_string_pretty(&meta)? + "\n")
        .with_context(|| format!("writing {}", meta_out.display()))?;
    Ok(())
}

/// One row of the sweep summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub eta_over_inv_l: f64,
    pub iters_to_optimal: Option<usize>,
    /// `max_k (gap(k) - bound(k))` over `k >= 1`; negative values are slack.
    pub max_bound_violation: Option<f64>,
    pub min_f_slack: f64,
}

pub fn sweep(
    mdp: &TabularMdp,
    rule: RuleName,
    etas: &[f64],
    iters: usize,
) -> anyhow::Result<Vec<SweepRow>> {
    if !matches!(rule, RuleName::Ppg | RuleName::Pqa) {
        bail!("sweep supports --rule ppg or pqa");
    }
    if etas.is_empty() {
        bail!("--etas must list at least one step size");
    }
    if let Some(bad) = etas.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        bail!("step sizes must be positive and finite, got {bad}");
    }
    let opt = solve_optimal(mdp)?;
    let l = smoothness_coefficient(mdp.gamma(), mdp.num_actions());
    etas.par_iter()
        .map(|&eta| {
            let schedule = StepSchedule::constant(eta);
            let trace = run_with(
                mdp,
                &opt,
                &build_rule(rule, mdp, None),
                &schedule,
                &RunOptions::new(iters, true),
            )?;
            let ctx = TraceContext {
                mdp,
                opt: &opt,
                rule,
                schedule,
                rho: mdp.mu().to_vec(),
            };
            let bound = ctx
                .sublinear_bound()?
                .expect("constant PPG/PQA always has a bound");
            let max_bound_violation = trace
                .records
                .iter()
                .filter(|r| r.k >= 1)
                .map(|r| r.gap_mu - bound(r.k))
                .reduce(f64::max);
            let min_f_slack = trace
                .records
                .iter()
                .flat_map(|r| {
                    let lb = r.f_lb.as_deref().unwrap_or(&[]);
                    r.f_s.iter().zip(lb).map(|(f, l)| f - l).collect::<Vec<_>>()
                })
                .fold(f64::INFINITY, f64::min);
            Ok(SweepRow {
                eta,
                eta_over_inv_l: eta * l,
                iters_to_optimal: trace.first_optimal(),
                max_bound_violation,
                min_f_slack,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            sig17(row.eta),
            sig17(row.eta_over_inv_l),
            row.iters_to_optimal
                .map(|k| k.to_string())
                .unwrap_or_default(),
            cell(row.max_bound_violation),
            sig17(row.min_f_slack),
        );
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mdp = load_mdp(&args.mdp).with_context(|| format!("loading {}", args.mdp.display()))?;
    let rows = sweep(&mdp, args.rule, &args.etas, args.iters)?;
    std::fs::write(&args.out, sweep_csv(&rows))
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

/// Parses the suite name and runs it; `Err` means a configuration error.
pub fn verify(args: &VerifyArgs) -> anyhow::Result<Vec<PropertyResult>> {
    let suite: Suite = args.suite.parse()?;
    Ok(run_suite(suite, args.seed, args.instances)?)
}
