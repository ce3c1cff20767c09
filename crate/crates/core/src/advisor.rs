//! ε-sanity checks and canonical ε-sane advisors.
//!
//! An advisor is ε-sane for `M` when at every state
//! (i) its support stays inside `A⁰(s)`, and
//! (ii) some Blackwell-optimal action gets probability strictly above ε.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::mdp::{AdvisorPolicy, FiniteMdp};
use crate::planner::LimitSolution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SanityCondition {
    /// Support leaves the trap-free set.
    SupportInTrapFree,
    /// No Blackwell action has probability above ε.
    BlackwellAboveEpsilon,
}

impl fmt::Display for SanityCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SanityCondition::SupportInTrapFree => write!(f, "condition i (support within trap-free actions)"),
            SanityCondition::BlackwellAboveEpsilon => {
                write!(f, "condition ii (a Blackwell-optimal action with probability > epsilon)")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityViolation {
    pub state: usize,
    pub condition: SanityCondition,
    pub detail: String,
}

impl fmt::Display for SanityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {}: {} violated: {}", self.state, self.condition, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityCertificate {
    pub is_sane: bool,
    pub violations: Vec<SanityViolation>,
    /// Lowest-index Blackwell action with probability above ε, where one exists.
    pub witness_actions: Vec<Option<usize>>,
}

/// Checks both sanity conditions at level `ad.epsilon`.
pub fn check_epsilon_sane(m: &FiniteMdp, ad: &AdvisorPolicy, limits: &LimitSolution) -> SanityCertificate {
    check_epsilon_sane_at(m, ad, limits, ad.epsilon)
}

/// Checks both sanity conditions at an explicit level `epsilon`.
pub fn check_epsilon_sane_at(
    m: &FiniteMdp,
    ad: &AdvisorPolicy,
    limits: &LimitSolution,
    epsilon: f64,
) -> SanityCertificate {
    let mut violations = Vec::new();
    let mut witness_actions = Vec::with_capacity(m.n_states);
    for s in 0..m.n_states {
        let outside: Vec<usize> = ad.support(s).filter(|a| !limits.trap_free[s].contains(a)).collect();
        if !outside.is_empty() {
            violations.push(SanityViolation {
                state: s,
                condition: SanityCondition::SupportInTrapFree,
                detail: format!(
                    "actions {outside:?} have positive probability but trap-free set is {:?}",
                    limits.trap_free[s]
                ),
            });
        }
        let witness = limits.blackwell[s].iter().copied().find(|&a| ad.prob(s, a) > epsilon);
        if witness.is_none() {
            violations.push(SanityViolation {
                state: s,
                condition: SanityCondition::BlackwellAboveEpsilon,
                detail: format!(
                    "Blackwell actions {:?} all have probability <= {epsilon}",
                    limits.blackwell[s]
                ),
            });
        }
        witness_actions.push(witness);
    }
    SanityCertificate {
        is_sane: violations.is_empty(),
        violations,
        witness_actions,
    }
}

/// Advisor with mass `mix` on the lowest-index Blackwell action and `1 − mix`
/// spread uniformly over the trap-free actions.
pub fn synthesize_sane_advisor(
    m: &FiniteMdp,
    limits: &LimitSolution,
    epsilon: f64,
    mix: f64,
) -> Result<AdvisorPolicy> {
    if !(mix > 0.0 && mix <= 1.0) {
        return Err(DrlError::InvalidArgument(format!("mix = {mix} is not in (0,1]")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DrlError::InvalidArgument(format!("epsilon = {epsilon} is not in (0,1)")));
    }
    if epsilon >= mix {
        return Err(DrlError::InvalidArgument(format!(
            "epsilon = {epsilon} must be below mix = {mix}, otherwise the advisor cannot be epsilon-sane"
        )));
    }
    let probs = (0..m.n_states)
        .map(|s| {
            let mut row = vec![0.0; m.n_actions];
            let best = limits.blackwell[s][0];
            row[best] += mix;
            let safe = &limits.trap_free[s];
            let share = (1.0 - mix) / safe.len() as f64;
            for &a in safe {
                row[a] += share;
            }
            row
        })
        .collect();
    AdvisorPolicy::new(probs, epsilon)
}

/// Per-state action `π★(s)` with `π★(s) ∈ A★(s)` and `Ad(π★(s)|s) > ε`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimalActionTable {
    pub actions: Vec<usize>,
}

impl OptimalActionTable {
    pub fn action(&self, s: usize) -> usize {
        self.actions[s]
    }
}

/// Lowest-index qualifying action per state.
pub fn build_optimal_table(
    m: &FiniteMdp,
    ad: &AdvisorPolicy,
    limits: &LimitSolution,
    epsilon: f64,
) -> Result<OptimalActionTable> {
    let actions = (0..m.n_states)
        .map(|s| {
            limits.blackwell[s]
                .iter()
                .copied()
                .find(|&a| ad.prob(s, a) > epsilon)
                .ok_or_else(|| {
                    DrlError::NotSane(format!(
                        "state {s}: no Blackwell action in {:?} has advisor probability > {epsilon}",
                        limits.blackwell[s]
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimalActionTable { actions })
}
