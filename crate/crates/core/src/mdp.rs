//! Finite discounted MDPs, stationary policies and exact policy evaluation.
//!
//! Every tensor is stored flat and row-major. Transition and reward tensors are
//! indexed `[s][a][s']`, per-state-action tables `[s][a]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, ValidationReport, Violation, ViolationKind};

/// Tolerance on row sums of transition rows, policy rows and `mu`.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Absolute tolerance for argmax-set membership, scaled by the value range `1/(1-gamma)`.
pub fn tol_argmax(gamma: f64) -> f64 {
    1e-9 * f64::max(1.0, 1.0 / (1.0 - gamma))
}

/// Indices `a` with `row[a] >= max(row) - tol`, in increasing order.
pub fn argmax_set(row: &[f64], tol: f64) -> Vec<usize> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter()
        .enumerate()
        .filter(|(_, &x)| x >= max - tol)
        .map(|(a, _)| a)
        .collect()
}

/// A dense `num_states x num_actions` table of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTable {
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl ActionTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            data: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_flat(num_states: usize, num_actions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                what: "action table",
                expected: num_states * num_actions,
                found: data.len(),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(num_states * num_actions);
        for row in rows {
            if row.len() != num_actions {
                return Err(Error::DimensionMismatch {
                    what: "action table row",
                    expected: num_actions,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            num_states,
            num_actions,
            data,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.data[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.data[s * self.num_actions + a] = value;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.num_actions..(s + 1) * self.num_actions]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.data[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data
            .chunks(self.num_actions.max(1))
            .take(self.num_states)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// `max |self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &ActionTable) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Finite MDP `(S, A, P, r, gamma, mu)`.
///
/// Construction through [`TabularMdp::from_parts`] only checks shapes, so that
/// invalid instances can be represented and reported by [`validate_mdp`].
/// [`TabularMdp::new`] additionally validates.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    mu: Vec<f64>,
}

fn flatten3(
    what: &'static str,
    t: &[Vec<Vec<f64>>],
    num_states: usize,
    num_actions: usize,
) -> Result<Vec<f64>> {
    let mismatch = |expected, found| Error::DimensionMismatch {
        what,
        expected,
        found,
    };
    if t.len() != num_states {
        return Err(mismatch(num_states, t.len()));
    }
    let mut flat = Vec::with_capacity(num_states * num_actions * num_states);
    for per_state in t {
        if per_state.len() != num_actions {
            return Err(mismatch(num_actions, per_state.len()));
        }
        for row in per_state {
            if row.len() != num_states {
                return Err(mismatch(num_states, row.len()));
            }
            flat.extend_from_slice(row);
        }
    }
    Ok(flat)
}

impl TabularMdp {
    /// Shape-checked constructor; does not validate the assumptions.
    pub fn from_parts(
        transition: &[Vec<Vec<f64>>],
        reward: &[Vec<Vec<f64>>],
        gamma: f64,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let num_states = transition.len();
        let num_actions = transition.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(Error::BadParameter(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        let transition = flatten3("transition", transition, num_states, num_actions)?;
        let reward = flatten3("reward", reward, num_states, num_actions)?;
        if mu.len() != num_states {
            return Err(Error::DimensionMismatch {
                what: "mu",
                expected: num_states,
                found: mu.len(),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            mu,
        })
    }

    /// Flat-buffer constructor used by the generators.
    pub(crate) fn from_flat(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        mu: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(transition.len(), num_states * num_actions * num_states);
        debug_assert_eq!(reward.len(), transition.len());
        debug_assert_eq!(mu.len(), num_states);
        Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            mu,
        }
    }

    /// Shape-checked and validated constructor.
    pub fn new(
        transition: &[Vec<Vec<f64>>],
        reward: &[Vec<Vec<f64>>],
        gamma: f64,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self::from_parts(transition, reward, gamma, mu)?;
        validate_mdp(&mdp).map_err(Error::InvalidMdp)?;
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// `min_s mu(s)`.
    pub fn mu_tilde(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }

    #[inline]
    fn offset(&self, s: usize, a: usize) -> usize {
        (s * self.num_actions + a) * self.num_states
    }

    /// `P(. | s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.offset(s, a);
        &self.transition[o..o + self.num_states]
    }

    /// `r(s, a, .)`.
    #[inline]
    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.offset(s, a);
        &self.reward[o..o + self.num_states]
    }

    /// Expected one-step reward `sum_{s'} P(s'|s,a) r(s,a,s')`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        dot(self.transition_row(s, a), self.reward_row(s, a))
    }

    pub fn transition_tensor(&self) -> Vec<Vec<Vec<f64>>> {
        self.tensor(&self.transition)
    }

    pub fn reward_tensor(&self) -> Vec<Vec<Vec<f64>>> {
        self.tensor(&self.reward)
    }

    fn tensor(&self, flat: &[f64]) -> Vec<Vec<Vec<f64>>> {
        flat.chunks(self.num_states * self.num_actions)
            .map(|per_state| {
                per_state
                    .chunks(self.num_states)
                    .map(<[f64]>::to_vec)
                    .collect()
            })
            .collect()
    }

    /// `Q^V(s,a) = E_{s'}[r + gamma V(s')]` for an arbitrary vector `v`.
    pub fn q_from_values(&self, v: &[f64]) -> ActionTable {
        let mut q = ActionTable::zeros(self.num_states, self.num_actions);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let p = self.transition_row(s, a);
                let r = self.reward_row(s, a);
                let mut acc = 0.0;
                for t in 0..self.num_states {
                    acc += p[t] * (r[t] + self.gamma * v[t]);
                }
                q.set(s, a, acc);
            }
        }
        q
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Checks every modelling assumption and lists each violation found.
pub fn validate_mdp(mdp: &TabularMdp) -> std::result::Result<(), ValidationReport> {
    let mut report = ValidationReport::default();
    let (ns, na) = (mdp.num_states, mdp.num_actions);

    if !(mdp.gamma >= 0.0 && mdp.gamma < 1.0) {
        report.violations.push(Violation {
            kind: ViolationKind::BadGamma,
            field: "gamma",
            index: vec![],
            value: mdp.gamma,
        });
    }

    for s in 0..ns {
        for a in 0..na {
            let row = mdp.transition_row(s, a);
            for (t, &p) in row.iter().enumerate() {
                if !(p >= 0.0) || !p.is_finite() {
                    report.violations.push(Violation {
                        kind: ViolationKind::RowNotStochastic,
                        field: "P",
                        index: vec![s, a, t],
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
                report.violations.push(Violation {
                    kind: ViolationKind::RowNotStochastic,
                    field: "P",
                    index: vec![s, a],
                    value: sum,
                });
            }
            for (t, &r) in mdp.reward_row(s, a).iter().enumerate() {
                if !(0.0..=1.0).contains(&r) {
                    report.violations.push(Violation {
                        kind: ViolationKind::RewardOutOfRange,
                        field: "r",
                        index: vec![s, a, t],
                        value: r,
                    });
                }
            }
        }
    }

    for (s, &m) in mdp.mu.iter().enumerate() {
        if !(m > 0.0) || !m.is_finite() {
            report.violations.push(Violation {
                kind: ViolationKind::InitialDistributionNotTraversal,
                field: "mu",
                index: vec![s],
                value: m,
            });
        }
    }
    let mu_sum: f64 = mdp.mu.iter().sum();
    if !((mu_sum - 1.0).abs() <= STOCHASTIC_TOL) {
        report.violations.push(Violation {
            kind: ViolationKind::InitialDistributionNotTraversal,
            field: "mu",
            index: vec![],
            value: mu_sum,
        });
    }

    if report.is_ok() {
        Ok(())
    } else {
        Err(report)
    }
}

/// Row-stochastic table `pi[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: ActionTable,
}

impl Policy {
    /// Validates every row against the simplex within [`STOCHASTIC_TOL`].
    pub fn new(probs: ActionTable) -> Result<Self> {
        for s in 0..probs.num_states() {
            let row = probs.row(s);
            let sum: f64 = row.iter().sum();
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            if !(min >= 0.0) || !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
                return Err(Error::InvalidPolicy { state: s, sum, min });
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(ActionTable::from_rows(rows)?)
    }

    pub(crate) fn from_table_unchecked(probs: ActionTable) -> Self {
        Self { probs }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            probs: ActionTable::from_flat(
                num_states,
                num_actions,
                vec![p; num_states * num_actions],
            )
            .expect("shape is consistent by construction"),
        }
    }

    /// Uniform over the given action set at each state.
    pub fn uniform_over(num_actions: usize, sets: &[Vec<usize>]) -> Self {
        let mut probs = ActionTable::zeros(sets.len(), num_actions);
        for (s, set) in sets.iter().enumerate() {
            let p = 1.0 / set.len() as f64;
            for &a in set {
                probs.set(s, a, p);
            }
        }
        Self { probs }
    }

    pub fn num_states(&self) -> usize {
        self.probs.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.num_actions()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs.get(s, a)
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        self.probs.row(s)
    }

    pub fn table(&self) -> &ActionTable {
        &self.probs
    }

    /// `supp(pi_s)`: actions with strictly positive mass.
    pub fn support(&self, s: usize) -> Vec<usize> {
        self.row(s)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(a, _)| a)
            .collect()
    }

    /// `pi_s(B)`.
    pub fn mass_on(&self, s: usize, set: &[usize]) -> f64 {
        set.iter().map(|&a| self.prob(s, a)).sum()
    }

    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.probs.max_abs_diff(&other.probs)
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states() != mdp.num_states() {
            return Err(Error::DimensionMismatch {
                what: "policy states",
                expected: mdp.num_states(),
                found: self.num_states(),
            });
        }
        if self.num_actions() != mdp.num_actions() {
            return Err(Error::DimensionMismatch {
                what: "policy actions",
                expected: mdp.num_actions(),
                found: self.num_actions(),
            });
        }
        Ok(())
    }
}

/// Exact `V^pi`, `Q^pi`, `A^pi` and `d^pi_mu` of a single policy.
#[derive(Clone, Debug)]
pub struct ValueBundle {
    pub v: Vec<f64>,
    pub q: ActionTable,
    pub adv: ActionTable,
    pub visitation: Vec<f64>,
}

impl ValueBundle {
    /// `max_a A^pi(s, a)`.
    pub fn max_adv(&self, s: usize) -> f64 {
        self.adv
            .row(s)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `I - gamma * P^pi` as a dense matrix, plus `r^pi`.
fn policy_system(mdp: &TabularMdp, policy: &Policy) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.num_states();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let p = mdp.transition_row(s, a);
            let rw = mdp.reward_row(s, a);
            for t in 0..n {
                m[(s, t)] -= mdp.gamma() * pa * p[t];
                r[s] += pa * p[t] * rw[t];
            }
        }
    }
    (m, r)
}

/// Discounted visitation `d^pi_rho = (1-gamma) (I - gamma P^pi^T)^{-1} rho`.
pub fn visitation(mdp: &TabularMdp, policy: &Policy, rho: &[f64]) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    if rho.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch {
            what: "rho",
            expected: mdp.num_states(),
            found: rho.len(),
        });
    }
    let (m, _) = policy_system(mdp, policy);
    visitation_from_system(&m, mdp.gamma(), rho)
}

fn visitation_from_system(m: &DMatrix<f64>, gamma: f64, rho: &[f64]) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(rho);
    let d = m
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularSystem)?;
    let d: Vec<f64> = d.iter().map(|x| (1.0 - gamma) * x).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(d)
}

/// Exact policy evaluation by dense LU solves.
pub fn policy_evaluate(mdp: &TabularMdp, policy: &Policy) -> Result<ValueBundle> {
    policy.check_shape(mdp)?;
    let (m, r) = policy_system(mdp, policy);
    let v = m.clone().lu().solve(&r).ok_or(Error::SingularSystem)?;
    let v: Vec<f64> = v.iter().copied().collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let q = mdp.q_from_values(&v);
    let mut adv = q.clone();
    for s in 0..mdp.num_states() {
        for x in adv.row_mut(s) {
            *x -= v[s];
        }
    }
    let visitation = visitation_from_system(&m, mdp.gamma(), mdp.mu())?;
    Ok(ValueBundle {
        v,
        q,
        adv,
        visitation,
    })
}

/// `V(rho) = sum_s rho(s) V(s)`.
pub fn value_under(rho: &[f64], v: &[f64]) -> Result<f64> {
    if rho.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "rho vs values",
            expected: v.len(),
            found: rho.len(),
        });
    }
    Ok(dot(rho, v))
}

/// Result of one Bellman optimality backup.
#[derive(Clone, Debug)]
pub struct Backup {
    pub values: Vec<f64>,
    pub q: ActionTable,
    /// Per state, `argmax_a Q^V(s, a)` under [`tol_argmax`].
    pub greedy: Vec<Vec<usize>>,
}

/// `(T V)(s) = max_a Q^V(s, a)` together with the greedy action sets.
pub fn bellman_backup(mdp: &TabularMdp, v: &[f64]) -> Result<Backup> {
    if v.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch {
            what: "value vector",
            expected: mdp.num_states(),
            found: v.len(),
        });
    }
    let q = mdp.q_from_values(v);
    let tol = tol_argmax(mdp.gamma());
    let mut values = Vec::with_capacity(mdp.num_states());
    let mut greedy = Vec::with_capacity(mdp.num_states());
    for row in q.rows() {
        values.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        greedy.push(argmax_set(row, tol));
    }
    Ok(Backup { values, q, greedy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bandit() -> TabularMdp {
        TabularMdp::new(
            &[vec![vec![1.0], vec![1.0]]],
            &[vec![vec![0.75], vec![0.25]]],
            0.9,
            vec![1.0],
        )
        .unwrap()
    }

    fn two_state(rewards: f64) -> TabularMdp {
        TabularMdp::from_parts(
            &[
                vec![vec![0.5, 0.5], vec![0.1, 0.9]],
                vec![vec![1.0, 0.0], vec![0.3, 0.7]],
            ],
            &[
                vec![vec![rewards, rewards], vec![rewards, rewards]],
                vec![vec![rewards, rewards], vec![rewards, rewards]],
            ],
            0.8,
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn valid_mdp_passes() {
        assert!(validate_mdp(&two_state(0.3)).is_ok());
    }

    #[test]
    fn reward_out_of_range_is_reported() {
        let mut mdp = two_state(0.3);
        mdp.reward[3] = 1.5;
        let report = validate_mdp(&mdp).unwrap_err();
        assert!(report.has(ViolationKind::RewardOutOfRange));
        assert_eq!(report.violations[0].index, vec![0, 1, 1]);
        assert_eq!(report.violations[0].value, 1.5);
    }

    #[test]
    fn non_traversal_mu_is_reported() {
        let mut mdp = two_state(0.3);
        mdp.mu = vec![1.0, 0.0];
        let report = validate_mdp(&mdp).unwrap_err();
        assert!(report.has(ViolationKind::InitialDistributionNotTraversal));
        assert_eq!(report.violations.len(), 1);
    }

    #[test]
    fn bad_rows_and_gamma_are_reported() {
        let mut mdp = two_state(0.3);
        mdp.transition[0] = 0.4;
        mdp.gamma = 1.0;
        let report = validate_mdp(&mdp).unwrap_err();
        assert!(report.has(ViolationKind::RowNotStochastic));
        assert!(report.has(ViolationKind::BadGamma));
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mdp = two_state(0.0);
        let b = policy_evaluate(&mdp, &Policy::uniform(2, 2)).unwrap();
        assert!(b.v.iter().all(|&x| x == 0.0));
        assert!(b.q.as_slice().iter().all(|&x| x == 0.0));
        assert!(b.adv.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bandit_closed_form() {
        let pi = Policy::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = policy_evaluate(&bandit(), &pi).unwrap();
        assert_abs_diff_eq!(b.v[0], 7.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.q.get(0, 0), 7.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.q.get(0, 1), 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.adv.get(0, 1), -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.visitation[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_zero_visitation_is_mu() {
        let mut mdp = two_state(0.4);
        mdp.gamma = 0.0;
        mdp.mu = vec![0.3, 0.7];
        let b = policy_evaluate(&mdp, &Policy::uniform(2, 2)).unwrap();
        assert_eq!(b.visitation, vec![0.3, 0.7]);
    }

    #[test]
    fn value_under_examples() {
        assert_eq!(value_under(&[0.0, 1.0], &[4.0, 6.0]).unwrap(), 6.0);
        assert_eq!(value_under(&[0.5, 0.5], &[4.0, 6.0]).unwrap(), 5.0);
        assert_abs_diff_eq!(value_under(&[1.0], &[7.5]).unwrap(), 7.5);
        assert!(matches!(
            value_under(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bellman_backup_examples() {
        let b = bellman_backup(&bandit(), &[0.0]).unwrap();
        assert_abs_diff_eq!(b.values[0], 0.75);
        assert_eq!(b.greedy[0], vec![0]);

        let b = bellman_backup(&bandit(), &[7.5]).unwrap();
        assert_abs_diff_eq!(b.values[0], 7.5, epsilon = 1e-10);

        let b = bellman_backup(&two_state(0.0), &[0.0, 0.0]).unwrap();
        assert_eq!(b.values, vec![0.0, 0.0]);
        assert_eq!(b.greedy, vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn invalid_policy_rejected() {
        assert!(matches!(
            Policy::from_rows(&[vec![0.6, 0.6]]),
            Err(Error::InvalidPolicy { state: 0, .. })
        ));
        assert!(Policy::from_rows(&[vec![1.2, -0.2]]).is_err());
    }
}
