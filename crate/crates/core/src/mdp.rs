//! Finite MDPs, advisor policies and the delegative composition `M[Ad]`.
//!
//! The composed environment lives over `St × (A ∪ {⊥})`. A composed state is
//! encoded as `s·(|A|+1) + c` where `c` is the advisor's last action, or `|A|`
//! for ⊥. Composed action `|A|` is delegation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};

/// Tolerance for row-stochasticity checks.
pub const PROB_TOL: f64 = 1e-9;

/// An action of the delegating agent: a direct action from `A`, or ⊥.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Direct(usize),
    Delegate,
}

impl Action {
    /// Composed action index; ⊥ maps to `n_actions`.
    pub fn index(self, n_actions: usize) -> usize {
        match self {
            Action::Direct(a) => a,
            Action::Delegate => n_actions,
        }
    }

    pub fn from_index(index: usize, n_actions: usize) -> Action {
        if index >= n_actions {
            Action::Delegate
        } else {
            Action::Direct(index)
        }
    }

    pub fn is_delegate(self) -> bool {
        matches!(self, Action::Delegate)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Direct(a) => write!(f, "{a}"),
            Action::Delegate => write!(f, "⊥"),
        }
    }
}

/// A state of `M[Ad]`: base state plus the advisor's action on the last step
/// (`None` when the last step was not delegated).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComposedState {
    pub state: usize,
    pub advisor: Option<usize>,
}

impl ComposedState {
    pub fn undelegated(state: usize) -> Self {
        ComposedState {
            state,
            advisor: None,
        }
    }

    pub fn encode(self, n_actions: usize) -> usize {
        self.state * (n_actions + 1) + self.advisor.unwrap_or(n_actions)
    }

    pub fn decode(index: usize, n_actions: usize) -> Self {
        let width = n_actions + 1;
        let c = index % width;
        ComposedState {
            state: index / width,
            advisor: if c == n_actions { None } else { Some(c) },
        }
    }
}

/// A finite MDP with state-only rewards in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub initial_state: usize,
    /// `transition[s][a][t]` = probability of moving to `t` after `a` in `s`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<f64>,
}

/// One invariant violation, with its location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    fn into_result(self, what: &str) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let joined: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(DrlError::InvalidModel(format!("{what}: {}", joined.join("; "))))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_distribution(report: &mut ValidationReport, location: String, row: &[f64], width: usize) {
    if row.len() != width {
        report.push(location, format!("expected {width} entries, found {}", row.len()));
        return;
    }
    if let Some((i, p)) = row.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        report.push(location, format!("entry {i} is {p}, must be a non-negative probability"));
        return;
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        report.push(location, format!("row sums to {sum}, not 1"));
    }
}

/// Reports every invariant violation of `m`; `is_ok()` iff all invariants hold.
pub fn validate_mdp(m: &FiniteMdp) -> ValidationReport {
    let mut report = ValidationReport::default();
    if m.n_states == 0 {
        report.push("n_states", "must be positive");
    }
    if m.n_actions == 0 {
        report.push("n_actions", "must be positive");
    }
    if m.initial_state >= m.n_states {
        report.push(
            "initial_state",
            format!("{} out of range for {} states", m.initial_state, m.n_states),
        );
    }
    if m.reward.len() != m.n_states {
        report.push(
            "reward",
            format!("expected {} entries, found {}", m.n_states, m.reward.len()),
        );
    }
    for (s, r) in m.reward.iter().enumerate() {
        if !(0.0..=1.0).contains(r) {
            report.push(format!("reward[{s}]"), format!("reward out of [0,1]: {r}"));
        }
    }
    if m.transition.len() != m.n_states {
        report.push(
            "transition",
            format!("expected {} state rows, found {}", m.n_states, m.transition.len()),
        );
    }
    for (s, rows) in m.transition.iter().enumerate() {
        if rows.len() != m.n_actions {
            report.push(
                format!("transition[{s}]"),
                format!("expected {} action rows, found {}", m.n_actions, rows.len()),
            );
            continue;
        }
        for (a, row) in rows.iter().enumerate() {
            check_distribution(&mut report, format!("transition[{s}][{a}]"), row, m.n_states);
        }
    }
    report
}

fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
}

impl FiniteMdp {
    /// Builds a validated MDP. Rows within [`PROB_TOL`] of stochastic are
    /// renormalized exactly; anything else is rejected.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        initial_state: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        FiniteMdp {
            n_states,
            n_actions,
            initial_state,
            transition,
            reward,
        }
        .normalized()
    }

    /// Validates and renormalizes in place.
    pub fn normalized(mut self) -> Result<Self> {
        validate_mdp(&self).into_result("mdp")?;
        for rows in &mut self.transition {
            rows.iter_mut().for_each(|row| renormalize(row));
        }
        Ok(self)
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    /// Deterministic MDP from a successor table `next[s][a]`.
    pub fn deterministic(
        initial_state: usize,
        next: &[Vec<usize>],
        reward: Vec<f64>,
    ) -> Result<Self> {
        let n_states = next.len();
        let n_actions = next.first().map_or(0, |r| r.len());
        let transition = next
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&t| {
                        let mut p = vec![0.0; n_states];
                        if t < n_states {
                            p[t] = 1.0;
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        FiniteMdp::new(n_states, n_actions, initial_state, transition, reward)
    }

    /// Same dynamics with a different reward vector.
    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        FiniteMdp::new(
            self.n_states,
            self.n_actions,
            self.initial_state,
            self.transition.clone(),
            reward,
        )
    }

    /// Kernel of the Markov chain induced by a memoryless stochastic policy
    /// `policy[s][a]`.
    pub fn induced_chain(&self, policy: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                let mut row = vec![0.0; self.n_states];
                for (a, &pa) in policy[s].iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for (t, &p) in self.transition[s][a].iter().enumerate() {
                        row[t] += pa * p;
                    }
                }
                row
            })
            .collect()
    }
}

/// A memoryless stochastic advisor `Ad(a|s)` with its claimed sanity level ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvisorPolicy {
    pub probs: Vec<Vec<f64>>,
    pub epsilon: f64,
}

/// Structural checks for an advisor against `n_states × n_actions`.
pub fn validate_advisor(ad: &AdvisorPolicy, n_states: usize, n_actions: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !(ad.epsilon > 0.0 && ad.epsilon < 1.0) {
        report.push("epsilon", format!("{} not in (0,1)", ad.epsilon));
    }
    if ad.probs.len() != n_states {
        report.push(
            "probs",
            format!("expected {n_states} state rows, found {}", ad.probs.len()),
        );
    }
    for (s, row) in ad.probs.iter().enumerate() {
        if row.len() == n_actions && row.iter().all(|p| *p == 0.0) {
            report.push(format!("probs[{s}]"), "zero row");
            continue;
        }
        check_distribution(&mut report, format!("probs[{s}]"), row, n_actions);
    }
    report
}

impl AdvisorPolicy {
    pub fn new(probs: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let n_states = probs.len();
        let n_actions = probs.first().map_or(0, |r| r.len());
        let mut ad = AdvisorPolicy { probs, epsilon };
        validate_advisor(&ad, n_states, n_actions).into_result("advisor")?;
        ad.probs.iter_mut().for_each(|row| renormalize(row));
        Ok(ad)
    }

    pub fn uniform(n_states: usize, n_actions: usize, epsilon: f64) -> Result<Self> {
        AdvisorPolicy::new(vec![vec![1.0 / n_actions as f64; n_actions]; n_states], epsilon)
    }

    /// Point mass on `actions[s]` at every state.
    pub fn deterministic(actions: &[usize], n_actions: usize, epsilon: f64) -> Result<Self> {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                if a < n_actions {
                    row[a] = 1.0;
                }
                row
            })
            .collect();
        AdvisorPolicy::new(probs, epsilon)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map_or(0, |r| r.len())
    }

    pub fn support(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        self.probs[s]
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(a, _)| a)
    }
}

/// `M[Ad]`: the environment as seen by an agent that may delegate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelegativeEnv {
    pub base: FiniteMdp,
    pub advisor: AdvisorPolicy,
    pub composed: FiniteMdp,
}

/// Builds `M[Ad]` over `|St|·(|A|+1)` states and `|A|+1` actions.
pub fn compose_delegative(m: &FiniteMdp, ad: &AdvisorPolicy) -> Result<DelegativeEnv> {
    let report = validate_mdp(m);
    if !report.is_ok() {
        return Err(DrlError::InvalidModel(report.to_string()));
    }
    if ad.n_states() != m.n_states || ad.n_actions() != m.n_actions {
        return Err(DrlError::DimensionMismatch(format!(
            "mdp is {}x{}, advisor is {}x{}",
            m.n_states,
            m.n_actions,
            ad.n_states(),
            ad.n_actions()
        )));
    }
    let report = validate_advisor(ad, m.n_states, m.n_actions);
    if !report.is_ok() {
        return Err(DrlError::InvalidModel(report.to_string()));
    }

    let na = m.n_actions;
    let width = na + 1;
    let n_composed = m.n_states * width;
    let mut transition = Vec::with_capacity(n_composed);
    let mut reward = Vec::with_capacity(n_composed);
    for x in 0..n_composed {
        let s = ComposedState::decode(x, na).state;
        reward.push(m.reward[s]);
        let mut rows = Vec::with_capacity(width);
        for b in 0..width {
            let mut row = vec![0.0; n_composed];
            match Action::from_index(b, na) {
                Action::Direct(a) => {
                    for (t, &p) in m.transition[s][a].iter().enumerate() {
                        row[ComposedState::undelegated(t).encode(na)] = p;
                    }
                }
                Action::Delegate => {
                    for c in 0..na {
                        let pc = ad.probs[s][c];
                        if pc == 0.0 {
                            continue;
                        }
                        for (t, &p) in m.transition[s][c].iter().enumerate() {
                            let y = ComposedState {
                                state: t,
                                advisor: Some(c),
                            };
                            row[y.encode(na)] = p * pc;
                        }
                    }
                }
            }
            rows.push(row);
        }
        transition.push(rows);
    }
    let composed = FiniteMdp {
        n_states: n_composed,
        n_actions: width,
        initial_state: ComposedState::undelegated(m.initial_state).encode(na),
        transition,
        reward,
    };
    Ok(DelegativeEnv {
        base: m.clone(),
        advisor: ad.clone(),
        composed,
    })
}

impl DelegativeEnv {
    pub fn n_actions(&self) -> usize {
        self.base.n_actions
    }

    pub fn initial(&self) -> ComposedState {
        ComposedState::undelegated(self.base.initial_state)
    }

    /// Probability of moving from `from` to `to` when the agent plays `act`.
    pub fn likelihood(&self, from: ComposedState, act: Action, to: ComposedState) -> f64 {
        let na = self.n_actions();
        self.composed.transition[from.encode(na)][act.index(na)][to.encode(na)]
    }

    pub fn reward(&self, x: ComposedState) -> f64 {
        self.base.reward[x.state]
    }
}

/// Draws a successor from the composed kernel row of `(s, act)` using a single
/// uniform variate from `rng`.
pub fn sample_step<R: Rng + ?Sized>(
    env: &DelegativeEnv,
    s: ComposedState,
    act: Action,
    rng: &mut R,
) -> ComposedState {
    let na = env.n_actions();
    let row = &env.composed.transition[s.encode(na)][act.index(na)];
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (y, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = y;
        if u < acc {
            return ComposedState::decode(y, na);
        }
    }
    // Rounding can leave `acc` a hair below 1.
    ComposedState::decode(last, na)
}

/// Hypotheses `(T^k, Ad^k)` sharing states, actions, initial state and reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub n_states: usize,
    pub n_actions: usize,
    pub initial_state: usize,
    pub reward: Vec<f64>,
    pub n: usize,
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    pub advisors: Vec<AdvisorPolicy>,
}

/// Checks every hypothesis and the shared-structure invariants.
pub fn validate_hypotheses(h: &HypothesisSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    if h.n == 0 {
        report.push("n", "at least one hypothesis is required");
    }
    if h.kernels.len() != h.n {
        report.push("kernels", format!("expected {} kernels, found {}", h.n, h.kernels.len()));
    }
    if h.advisors.len() != h.n {
        report.push("advisors", format!("expected {} advisors, found {}", h.n, h.advisors.len()));
    }
    for (k, kernel) in h.kernels.iter().enumerate() {
        let m = FiniteMdp {
            n_states: h.n_states,
            n_actions: h.n_actions,
            initial_state: h.initial_state,
            transition: kernel.clone(),
            reward: h.reward.clone(),
        };
        for v in validate_mdp(&m).violations {
            report.push(format!("hypothesis {k}: {}", v.location), v.message);
        }
    }
    for (k, ad) in h.advisors.iter().enumerate() {
        for v in validate_advisor(ad, h.n_states, h.n_actions).violations {
            report.push(format!("advisor {k}: {}", v.location), v.message);
        }
    }
    report
}

impl HypothesisSet {
    /// Builds a set from per-hypothesis MDPs, which must agree on everything
    /// except the kernel.
    pub fn from_parts(mdps: Vec<FiniteMdp>, advisors: Vec<AdvisorPolicy>) -> Result<Self> {
        let first = mdps
            .first()
            .ok_or_else(|| DrlError::InvalidModel("empty hypothesis set".into()))?;
        for (k, m) in mdps.iter().enumerate() {
            if m.n_states != first.n_states
                || m.n_actions != first.n_actions
                || m.initial_state != first.initial_state
                || m.reward != first.reward
            {
                return Err(DrlError::DimensionMismatch(format!(
                    "hypothesis {k} differs from hypothesis 0 in states, actions, initial state or reward"
                )));
            }
        }
        let set = HypothesisSet {
            n_states: first.n_states,
            n_actions: first.n_actions,
            initial_state: first.initial_state,
            reward: first.reward.clone(),
            n: mdps.len(),
            kernels: mdps.into_iter().map(|m| m.transition).collect(),
            advisors,
        };
        set.validated()
    }

    pub fn validated(self) -> Result<Self> {
        validate_hypotheses(&self).into_result("hypothesis set")?;
        let mut set = self;
        for kernel in &mut set.kernels {
            for rows in kernel.iter_mut() {
                rows.iter_mut().for_each(|row| renormalize(row));
            }
        }
        for ad in &mut set.advisors {
            ad.probs.iter_mut().for_each(|row| renormalize(row));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `M^k`.
    pub fn mdp(&self, k: usize) -> FiniteMdp {
        FiniteMdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            initial_state: self.initial_state,
            transition: self.kernels[k].clone(),
            reward: self.reward.clone(),
        }
    }

    /// `L^k = M^k[Ad^k]`.
    pub fn env(&self, k: usize) -> Result<DelegativeEnv> {
        compose_delegative(&self.mdp(k), &self.advisors[k])
    }

    /// `T_{L^k}(to | from, act)` computed from the base kernel and advisor.
    pub fn likelihood(&self, k: usize, from: ComposedState, act: Action, to: ComposedState) -> f64 {
        let s = from.state;
        match (act, to.advisor) {
            (Action::Direct(a), None) => self.kernels[k][s][a][to.state],
            (Action::Delegate, Some(c)) => self.kernels[k][s][c][to.state] * self.advisors[k].probs[s][c],
            _ => 0.0,
        }
    }
}

/// One step of a composed-environment history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub from: ComposedState,
    pub action: Action,
    pub to: ComposedState,
}

/// A finite history of `M[Ad]`; `rewards[i]` is the reward of `steps[i].from`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: Step, reward: f64) {
        self.steps.push(step);
        self.rewards.push(reward);
    }

    /// States chain, and the successor's advisor component is ⊥ exactly when
    /// the agent acted directly.
    pub fn is_consistent(&self) -> bool {
        let chained = self.steps.windows(2).all(|w| w[0].to == w[1].from);
        let marked = self
            .steps
            .iter()
            .all(|st| st.action.is_delegate() == st.to.advisor.is_some());
        chained && marked && self.rewards.len() == self.steps.len()
    }

    /// Truncated normalized utility `(1−γ) Σ γ^n R(x_n)`.
    pub fn utility(&self, gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut total = 0.0;
        for r in &self.rewards {
            total += disc * r;
            disc *= gamma;
        }
        (1.0 - gamma) * total
    }
}

/// Number of steps whose successor lies in `St × A`, i.e. delegated steps.
pub fn count_delegations(traj: &Trajectory) -> usize {
    traj.steps.iter().filter(|st| st.to.advisor.is_some()).count()
}
