//! Delegative posterior-sampling agent.
//!
//! Time is cut into episodes of length `T`. At each episode start a hypothesis
//! `J` is drawn from the belief and its optimal-action table is followed, except
//! that the agent delegates (plays ⊥) whenever some hypothesis still in the
//! belief support gives the intended action zero advisor probability. If `J`
//! itself has been discarded mid-episode, the agent plays the lowest-index
//! action that every surviving advisor might take, and delegates if there is
//! none.
//!
//! After each observation the belief is multiplied by the composed-kernel
//! likelihoods `T_{L^k}`, normalized, and every weight below `η` is zeroed
//! before normalizing again. If the first normalizer vanishes the belief
//! restarts from uniform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advisor::OptimalActionTable;
use crate::error::{DrlError, Result};
use crate::infogain::entropy;
use crate::mdp::{sample_step, Action, ComposedState, DelegativeEnv, HypothesisSet, Step, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Discard threshold; `0` disables discarding.
    pub eta: f64,
    /// Episode length `T`.
    pub episode_len: usize,
    pub epsilon: f64,
    /// Recorded only; the policy sees γ through `eta` and `episode_len`.
    pub gamma: f64,
}

impl AgentParams {
    pub fn new(eta: f64, episode_len: usize, epsilon: f64, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(DrlError::InvalidArgument(format!("eta = {eta} is not in [0,1)")));
        }
        if episode_len == 0 {
            return Err(DrlError::InvalidArgument("episode length must be at least 1".into()));
        }
        Ok(AgentParams {
            eta,
            episode_len,
            epsilon,
            gamma,
        })
    }
}

/// Probability vector over the hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub weights: Vec<f64>,
}

impl Belief {
    pub fn uniform(n: usize) -> Self {
        Belief {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn is_alive(&self, k: usize) -> bool {
        self.weights[k] > 0.0
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, _)| k)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }

    fn normalize(&mut self) -> bool {
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            self.weights.iter_mut().for_each(|w| *w /= sum);
            true
        } else {
            false
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            last = k;
            if u < acc {
                return k;
            }
        }
        last
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounters {
    pub steps: u64,
    pub delegations: u64,
    /// Update steps in which the discard pass zeroed at least one weight.
    pub discard_events: u64,
    /// Update steps in which every likelihood was zero and the belief restarted.
    pub fallback_events: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub belief: Belief,
    /// Hypothesis `J` drawn at the start of the current episode. It is
    /// "discarded" when its belief weight is zero.
    pub hypothesis: usize,
    pub step_in_episode: usize,
    pub last_state: ComposedState,
    pub counters: AgentCounters,
}

impl AgentState {
    pub fn hypothesis_discarded(&self) -> bool {
        !self.belief.is_alive(self.hypothesis)
    }
}

/// The delegative posterior-sampling policy over a fixed hypothesis set.
#[derive(Clone, Debug)]
pub struct DelegativeAgent<'a> {
    hyps: &'a HypothesisSet,
    tables: &'a [OptimalActionTable],
    params: AgentParams,
}

impl<'a> DelegativeAgent<'a> {
    /// Requires one table per hypothesis and, when discarding is enabled,
    /// `η < 1/N` so the discard pass can never empty the belief.
    pub fn new(hyps: &'a HypothesisSet, tables: &'a [OptimalActionTable], params: AgentParams) -> Result<Self> {
        if tables.len() != hyps.len() {
            return Err(DrlError::DimensionMismatch(format!(
                "{} hypotheses but {} optimal-action tables",
                hyps.len(),
                tables.len()
            )));
        }
        if tables.iter().any(|t| t.actions.len() != hyps.n_states) {
            return Err(DrlError::DimensionMismatch("optimal-action table size differs from state count".into()));
        }
        if params.eta * hyps.len() as f64 >= 1.0 {
            return Err(DrlError::InvalidArgument(format!(
                "eta = {} must be below 1/N = {}",
                params.eta,
                1.0 / hyps.len() as f64
            )));
        }
        Ok(DelegativeAgent { hyps, tables, params })
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn hypotheses(&self) -> &HypothesisSet {
        self.hyps
    }

    /// Uniform belief, a freshly drawn hypothesis, step 0, at `(s₀, ⊥)`.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentState {
        let belief = Belief::uniform(self.hyps.len());
        let hypothesis = belief.sample(rng);
        AgentState {
            belief,
            hypothesis,
            step_in_episode: 0,
            last_state: ComposedState::undelegated(self.hyps.initial_state),
            counters: AgentCounters::default(),
        }
    }

    fn safe_for_all(&self, belief: &Belief, s: usize, a: usize) -> bool {
        belief.support().all(|k| self.hyps.advisors[k].prob(s, a) > 0.0)
    }

    /// Deterministic in `(belief, hypothesis, state)`.
    pub fn select_action(&self, state: &AgentState) -> Action {
        let s = state.last_state.state;
        if state.belief.is_alive(state.hypothesis) {
            let candidate = self.tables[state.hypothesis].action(s);
            if self.safe_for_all(&state.belief, s, candidate) {
                Action::Direct(candidate)
            } else {
                Action::Delegate
            }
        } else {
            (0..self.hyps.n_actions)
                .find(|&a| self.safe_for_all(&state.belief, s, a))
                .map_or(Action::Delegate, Action::Direct)
        }
    }

    /// Bayes update on `(state.last_state, taken) → next`, discard pass,
    /// episode bookkeeping.
    pub fn observe_and_update<R: Rng + ?Sized>(
        &self,
        state: &mut AgentState,
        taken: Action,
        next: ComposedState,
        rng: &mut R,
    ) {
        let from = state.last_state;
        let n = self.hyps.len();
        for k in 0..n {
            let w = state.belief.weights[k];
            if w > 0.0 {
                state.belief.weights[k] = w * self.hyps.likelihood(k, from, taken, next);
            }
        }
        if !state.belief.normalize() {
            state.belief = Belief::uniform(n);
            state.counters.fallback_events += 1;
        }

        if self.params.eta > 0.0 {
            let mut zeroed = false;
            for w in state.belief.weights.iter_mut() {
                if *w > 0.0 && *w < self.params.eta {
                    *w = 0.0;
                    zeroed = true;
                }
            }
            if zeroed {
                state.counters.discard_events += 1;
                if !state.belief.normalize() {
                    // unreachable while eta < 1/N
                    state.belief = Belief::uniform(n);
                    state.counters.fallback_events += 1;
                }
            }
        }

        if taken.is_delegate() {
            state.counters.delegations += 1;
        }
        state.counters.steps += 1;
        state.last_state = next;
        state.step_in_episode += 1;
        if state.step_in_episode == self.params.episode_len {
            state.step_in_episode = 0;
            state.hypothesis = state.belief.sample(rng);
        }
    }

    /// Runs `horizon` steps against `env`.
    pub fn run<R: Rng + ?Sized>(
        &self,
        env: &DelegativeEnv,
        state: &mut AgentState,
        horizon: usize,
        rng: &mut R,
    ) -> Trajectory {
        let mut traj = Trajectory::default();
        for _ in 0..horizon {
            let from = state.last_state;
            let action = self.select_action(state);
            let to = sample_step(env, from, action, rng);
            traj.push(Step { from, action, to }, env.reward(from));
            self.observe_and_update(state, action, to, rng);
        }
        traj
    }
}
