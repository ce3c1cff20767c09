//! Small benchmark instances used by tests, the acceptance suite and the CLI.

use rand::Rng;

use crate::advisor::synthesize_sane_advisor;
use crate::error::Result;
use crate::mdp::{AdvisorPolicy, FiniteMdp, HypothesisSet};
use crate::planner::limit_quantities;

/// Two states: `s1` (reward 1) where action `a` loops and action `b` falls
/// into the absorbing reward-0 state `s2`.
pub fn trap_mdp() -> FiniteMdp {
    FiniteMdp::deterministic(0, &[vec![0, 1], vec![1, 1]], vec![1.0, 0.0]).expect("trap mdp")
}

/// [`trap_mdp`] with the roles of `a` and `b` exchanged at `s1`.
pub fn trap_mdp_swapped() -> FiniteMdp {
    FiniteMdp::deterministic(0, &[vec![1, 0], vec![1, 1]], vec![1.0, 0.0]).expect("swapped trap mdp")
}

/// `{trap, swapped trap}` with advisors fixed on the safe action.
pub fn trap_pair() -> HypothesisSet {
    let eps = 0.5;
    HypothesisSet::from_parts(
        vec![trap_mdp(), trap_mdp_swapped()],
        vec![
            AdvisorPolicy::deterministic(&[0, 0], 2, eps).expect("advisor"),
            AdvisorPolicy::deterministic(&[1, 0], 2, eps).expect("advisor"),
        ],
    )
    .expect("trap pair")
}

/// Trap MDP with a third, safe but costly action: from `home` (state 0,
/// reward 1) action `stay` loops, action `fall` enters the absorbing trap
/// (state 1, reward 0) and action `c = 2` detours through state 2 (reward 0)
/// which returns home under every action. `stay`/`fall` are actions 0/1, or
/// 1/0 when `swapped`.
pub fn detour_trap_mdp(swapped: bool) -> FiniteMdp {
    let home = if swapped { vec![1, 0, 2] } else { vec![0, 1, 2] };
    FiniteMdp::deterministic(0, &[home, vec![1, 1, 1], vec![0, 0, 0]], vec![1.0, 0.0, 0.0])
        .expect("detour trap mdp")
}

/// Regret benchmark: the two [`detour_trap_mdp`] variants with synthesized
/// ε-sane advisors that put `mix` on the Blackwell action and spread the rest
/// over the trap-free actions (so they sometimes take the detour).
pub fn detour_trap_pair(epsilon: f64, mix: f64) -> Result<HypothesisSet> {
    let mdps = vec![detour_trap_mdp(false), detour_trap_mdp(true)];
    let advisors = mdps
        .iter()
        .map(|m| synthesize_sane_advisor(m, &limit_quantities(m)?, epsilon, mix))
        .collect::<Result<Vec<_>>>()?;
    HypothesisSet::from_parts(mdps, advisors)
}

/// Three-door instance for hypothesis `k ∈ {0,1,2}`: at the hub (state 0,
/// reward 0.5) door `k` leads to the trap (state 2) with probability 0.3 and
/// to the room (state 1, reward 1) otherwise; the other doors reach the room
/// with probability 0.6. The room returns to the hub with a
/// hypothesis-specific probability.
pub fn three_door_mdp(k: usize) -> FiniteMdp {
    const LEAVE_ROOM: [f64; 3] = [0.2, 0.5, 0.8];
    let hub: Vec<Vec<f64>> = (0..3)
        .map(|door| {
            if door == k {
                vec![0.0, 0.7, 0.3]
            } else {
                vec![0.4, 0.6, 0.0]
            }
        })
        .collect();
    let q = LEAVE_ROOM[k];
    let room = vec![vec![q, 1.0 - q, 0.0]; 3];
    let trap = vec![vec![0.0, 0.0, 1.0]; 3];
    FiniteMdp::new(3, 3, 0, vec![hub, room, trap], vec![0.5, 1.0, 0.0]).expect("three door mdp")
}

/// N=3 hypothesis set over [`three_door_mdp`] with synthesized advisors.
pub fn three_door(epsilon: f64, mix: f64) -> Result<HypothesisSet> {
    let mdps: Vec<FiniteMdp> = (0..3).map(three_door_mdp).collect();
    let advisors = mdps
        .iter()
        .map(|m| synthesize_sane_advisor(m, &limit_quantities(m)?, epsilon, mix))
        .collect::<Result<Vec<_>>>()?;
    HypothesisSet::from_parts(mdps, advisors)
}

/// Bandit-style MDP: the state is the last action taken.
pub fn bandit_mdp(rewards: &[f64]) -> FiniteMdp {
    let n = rewards.len();
    let next: Vec<Vec<usize>> = (0..n).map(|_| (0..n).collect()).collect();
    FiniteMdp::deterministic(0, &next, rewards.to_vec()).expect("bandit mdp")
}

/// State 0 (reward 0) moves to the absorbing reward-1 state 1.
pub fn two_phase_mdp() -> FiniteMdp {
    FiniteMdp::deterministic(0, &[vec![1], vec![1]], vec![0.0, 1.0]).expect("two phase mdp")
}

/// One action; state 0 moves to (0, 1) with probabilities (0.25, 0.75).
pub fn coin_mdp() -> FiniteMdp {
    FiniteMdp::new(
        2,
        1,
        0,
        vec![vec![vec![0.25, 0.75]], vec![vec![0.5, 0.5]]],
        vec![0.0, 1.0],
    )
    .expect("coin mdp")
}

/// Stochastic 3-state, 2-action dynamics with constant reward `c`.
pub fn constant_reward_mdp(c: f64) -> FiniteMdp {
    FiniteMdp::new(
        3,
        2,
        0,
        vec![
            vec![vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 1.0]],
            vec![vec![0.6, 0.4, 0.0], vec![0.1, 0.1, 0.8]],
            vec![vec![0.0, 0.0, 1.0], vec![0.5, 0.25, 0.25]],
        ],
        vec![c; 3],
    )
    .expect("constant reward mdp")
}

/// Random dense-ish MDP; roughly a third of the kernel entries are zero.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> FiniteMdp {
    let transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| random_distribution(rng, n_states, 0.33))
                .collect()
        })
        .collect();
    let reward = (0..n_states).map(|_| rng.gen::<f64>()).collect();
    FiniteMdp::new(n_states, n_actions, 0, transition, reward).expect("random mdp")
}

/// Random probability vector; each entry is zeroed with probability `sparsity`
/// (at least one entry stays positive).
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    let keep = rng.gen_range(0..n);
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            if i != keep && rng.gen::<f64>() < sparsity {
                0.0
            } else {
                rng.gen::<f64>() + 1e-3
            }
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Random memoryless stochastic policy.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    (0..n_states)
        .map(|_| random_distribution(rng, n_actions, 0.3))
        .collect()
}
