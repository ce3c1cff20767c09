//! Monte Carlo experiments: parameter derivation, regret estimation,
//! delegation-count tails, γ sweeps and the regret-decomposition check.
//!
//! Every rollout owns a ChaCha8 stream seeded from
//! `(master seed, γ index, true k, rollout index)`, and per-cell statistics
//! are reduced over rollouts in index order, so results do not depend on how
//! many threads run the rollouts.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advisor::{build_optimal_table, check_epsilon_sane_at, OptimalActionTable};
use crate::agent::{AgentParams, DelegativeAgent};
use crate::error::{DrlError, Result};
use crate::fixtures;
use crate::mdp::{sample_step, Action, AdvisorPolicy, ComposedState, DelegativeEnv, FiniteMdp, HypothesisSet};
use crate::planner::{evaluate_policy, limit_quantities, solve_discounted, tau_bound, LimitSolution};

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-3;
/// Auto-derived η is capped just below `1/N` so the discard pass can never
/// empty the belief.
pub const ETA_CAP_FACTOR: f64 = 1.0 - 1e-6;
const Z95: f64 = 1.959963984540054;

pub const CSV_HEADER: &str = "gamma,eta,T,true_k,seed,eu_star,eu_hat,regret,regret_ci,nd_mean,nd_p50,nd_p90,\
tail_K,tail_freq,discard_events,fallback_events,unsafe_actions";

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

/// A parameter that is either derived automatically or fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting<T> {
    Auto(AutoTag),
    Fixed(T),
}

impl<T> Default for Setting<T> {
    fn default() -> Self {
        Setting::Auto(AutoTag::Auto)
    }
}

impl<T: Copy> Setting<T> {
    pub fn fixed(&self) -> Option<T> {
        match self {
            Setting::Auto(_) => None,
            Setting::Fixed(v) => Some(*v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HypothesisSource {
    /// A bundled instance: `trap_pair`, `detour_trap_pair` or `three_door`.
    /// Synthesized advisors put `mix` on the Blackwell action.
    Builtin {
        name: String,
        #[serde(default)]
        mix: Option<f64>,
    },
    Inline {
        mdps: Vec<FiniteMdp>,
        advisors: Vec<AdvisorPolicy>,
    },
}

pub const BUILTIN_NAMES: [&str; 3] = ["trap_pair", "detour_trap_pair", "three_door"];
const DEFAULT_MIX: f64 = 0.5;

impl HypothesisSource {
    /// Per-hypothesis MDPs and advisors, without cross-validation.
    pub fn parts(&self, epsilon: f64) -> Result<(Vec<FiniteMdp>, Vec<AdvisorPolicy>)> {
        match self {
            HypothesisSource::Inline { mdps, advisors } => Ok((mdps.clone(), advisors.clone())),
            HypothesisSource::Builtin { name, mix } => {
                let mix = mix.unwrap_or(DEFAULT_MIX);
                let set = match name.as_str() {
                    "trap_pair" => {
                        let mut set = fixtures::trap_pair();
                        set.advisors.iter_mut().for_each(|ad| ad.epsilon = epsilon);
                        set
                    }
                    "detour_trap_pair" => fixtures::detour_trap_pair(epsilon, mix)?,
                    "three_door" => fixtures::three_door(epsilon, mix)?,
                    other => {
                        return Err(DrlError::InvalidArgument(format!(
                            "unknown builtin hypothesis set {other:?}; expected one of {BUILTIN_NAMES:?}"
                        )))
                    }
                };
                Ok(((0..set.len()).map(|k| set.mdp(k)).collect(), set.advisors))
            }
        }
    }

    pub fn resolve(&self, epsilon: f64) -> Result<HypothesisSet> {
        let (mdps, advisors) = self.parts(epsilon)?;
        HypothesisSet::from_parts(mdps, advisors)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// The delegative posterior-sampling agent.
    #[default]
    Agent,
    /// Optimal memoryless policy of the true composed environment.
    Oracle,
    /// Delegates at every step.
    AlwaysDelegate,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Agent => "agent",
            PolicyKind::Oracle => "oracle",
            PolicyKind::AlwaysDelegate => "always_delegate",
        })
    }
}

fn default_tol() -> f64 {
    DEFAULT_TRUNCATION_TOL
}

fn default_tail() -> Vec<u64> {
    vec![0, 1, 5, 10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hypotheses: HypothesisSource,
    pub gammas: Vec<f64>,
    pub epsilon: f64,
    #[serde(default)]
    pub eta: Setting<f64>,
    #[serde(default, rename = "T")]
    pub episode_len: Setting<usize>,
    /// Rollouts per (γ, true k) cell.
    pub rollouts: usize,
    #[serde(default = "default_tol")]
    pub truncation_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Delegation-count thresholds `K` for the tail frequencies `P[ND > K]`.
    #[serde(default = "default_tail")]
    pub tail_thresholds: Vec<u64>,
    #[serde(default)]
    pub policy: PolicyKind,
    /// Which hypotheses to use as the true environment; all when absent.
    #[serde(default)]
    pub true_hypotheses: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 {
            return Err(DrlError::InvalidArgument("rollouts must be at least 1".into()));
        }
        if self.gammas.is_empty() {
            return Err(DrlError::InvalidArgument("gamma list is empty".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(DrlError::InvalidArgument(format!("gamma = {g} is not in (0,1)")));
        }
        if !(self.truncation_tol > 0.0 && self.truncation_tol < 1.0) {
            return Err(DrlError::InvalidArgument(format!(
                "truncation tolerance {} is not in (0,1)",
                self.truncation_tol
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(DrlError::InvalidArgument(format!("epsilon = {} is not in (0,1)", self.epsilon)));
        }
        if self.tail_thresholds.is_empty() {
            return Err(DrlError::InvalidArgument("tail threshold list is empty".into()));
        }
        if let Some(eta) = self.eta.fixed() {
            if !(0.0..1.0).contains(&eta) {
                return Err(DrlError::InvalidArgument(format!("eta = {eta} is not in [0,1)")));
            }
        }
        if self.episode_len.fixed() == Some(0) {
            return Err(DrlError::InvalidArgument("T must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses either a plain config or a run manifest (whose resolved config
    /// is replayed).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let cfg: ExperimentConfig = if value.get("manifest_version").is_some() {
            serde_json::from_value::<RunManifest>(value)?.config
        } else {
            serde_json::from_value(value)?
        };
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDerivation {
    pub gamma: f64,
    pub n: usize,
    pub n_actions: usize,
    pub epsilon: f64,
    pub tau_per_hypothesis: Vec<f64>,
    pub tau_bar: f64,
    /// Formula value of η.
    pub eta: f64,
    /// η handed to the agent: the formula value capped below `1/N`.
    pub eta_used: f64,
    /// Formula value of T before the ceiling.
    pub t_raw: f64,
    #[serde(rename = "T")]
    pub episode_len: usize,
    pub xi: f64,
    /// `Ξ (1−γ)^{1/4}`, the regret envelope up to a constant.
    pub envelope: f64,
    /// Smallest γ admitted by the precondition.
    pub precondition_gamma: f64,
    pub precondition_ok: bool,
}

/// The η / T / Ξ formulas for given `N`, `|A|`, ε, γ and τ̄. Needs `N ≥ 2`.
pub fn derive_parameters_from(
    n: usize,
    n_actions: usize,
    epsilon: f64,
    gamma: f64,
    tau_bar: f64,
) -> Result<ParameterDerivation> {
    if n < 2 {
        return Err(DrlError::InvalidArgument(
            "automatic eta and T need at least two hypotheses; pass them explicitly".into(),
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) || !(epsilon > 0.0 && epsilon < 1.0) || !(tau_bar >= 0.0) {
        return Err(DrlError::InvalidArgument(format!(
            "bad derivation inputs: gamma = {gamma}, epsilon = {epsilon}, tau_bar = {tau_bar}"
        )));
    }
    let nf = n as f64;
    let ln_n = nf.ln();
    let c = 1.0 / epsilon + n_actions as f64;
    let alpha = 1.0 - gamma;
    let eta = alpha.powf(0.25) * nf.powf(-0.5) * ln_n.powf(0.25) * c.powf(0.25) * (tau_bar + 1.0).powf(0.25);
    let t_raw = alpha.powf(-0.25) * nf.powf(-0.5) * ln_n.powf(-0.25) * c.powf(-0.25) * (tau_bar + 1.0).powf(0.75);
    let xi = (nf.powi(6) * ln_n * c * (tau_bar + 1.0)).powf(0.25);
    let precondition_gamma =
        1.0 - (tau_bar + 1.0).powi(3) / (nf * nf * ln_n) * epsilon.min(1.0 / n_actions as f64);
    Ok(ParameterDerivation {
        gamma,
        n,
        n_actions,
        epsilon,
        tau_per_hypothesis: Vec::new(),
        tau_bar,
        eta,
        eta_used: eta.min(ETA_CAP_FACTOR / nf),
        t_raw,
        episode_len: (t_raw.ceil() as usize).max(1),
        xi,
        envelope: xi * alpha.powf(0.25),
        precondition_gamma,
        precondition_ok: gamma >= precondition_gamma,
    })
}

/// τ̄ from the planner, then [`derive_parameters_from`].
pub fn derive_parameters(hyps: &HypothesisSet, gamma: f64, epsilon: f64) -> Result<ParameterDerivation> {
    let taus = (0..hyps.len())
        .map(|k| tau_bound(&hyps.mdp(k), gamma))
        .collect::<Result<Vec<_>>>()?;
    let tau_bar = taus.iter().sum::<f64>() / taus.len() as f64;
    let mut d = derive_parameters_from(hyps.len(), hyps.n_actions, epsilon, gamma, tau_bar)?;
    d.tau_per_hypothesis = taus;
    Ok(d)
}

// ---------------------------------------------------------------------------
// regret estimation

/// Shared, read-only inputs for all cells of an experiment.
#[derive(Clone, Debug)]
pub struct Harness {
    pub hyps: HypothesisSet,
    pub epsilon: f64,
    pub limits: Vec<LimitSolution>,
    /// Present for [`PolicyKind::Agent`].
    pub tables: Option<Vec<OptimalActionTable>>,
    pub policy: PolicyKind,
    pub truncation_tol: f64,
}

impl Harness {
    pub fn new(hyps: HypothesisSet, epsilon: f64, policy: PolicyKind, truncation_tol: f64) -> Result<Self> {
        let limits = (0..hyps.len())
            .map(|k| limit_quantities(&hyps.mdp(k)))
            .collect::<Result<Vec<_>>>()?;
        let tables = if policy == PolicyKind::Agent {
            let mut tables = Vec::with_capacity(hyps.len());
            for (k, lim) in limits.iter().enumerate() {
                let m = hyps.mdp(k);
                let cert = check_epsilon_sane_at(&m, &hyps.advisors[k], lim, epsilon);
                if !cert.is_sane {
                    let detail: Vec<String> = cert.violations.iter().map(ToString::to_string).collect();
                    return Err(DrlError::NotSane(format!("hypothesis {k}: {}", detail.join("; "))));
                }
                tables.push(build_optimal_table(&m, &hyps.advisors[k], lim, epsilon)?);
            }
            Some(tables)
        } else {
            None
        };
        Ok(Harness {
            hyps,
            epsilon,
            limits,
            tables,
            policy,
            truncation_tol,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hyps = cfg.hypotheses.resolve(cfg.epsilon)?;
        if let Some(ks) = &cfg.true_hypotheses {
            if let Some(k) = ks.iter().find(|k| **k >= hyps.len()) {
                return Err(DrlError::InvalidArgument(format!("true hypothesis {k} out of range")));
            }
        }
        Harness::new(hyps, cfg.epsilon, cfg.policy, cfg.truncation_tol)
    }

    /// `n_max = ⌈ln(tol) / ln γ⌉`, so that `γ^{n_max} ≤ tol`.
    pub fn horizon(&self, gamma: f64) -> usize {
        ((self.truncation_tol.ln() / gamma.ln()).ceil() as usize).max(1)
    }
}

/// 32-byte ChaCha seed built from the four stream coordinates.
pub fn rollout_rng(seed: u64, gamma_index: usize, true_k: usize, rollout: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (i, word) in [seed, gamma_index as u64, true_k as u64, rollout as u64].iter().enumerate() {
        bytes[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    /// Truncated normalized utility `(1−γ) Σ_{n<n_max} γⁿ R(xₙ)`.
    pub utility: f64,
    pub delegations: u64,
    pub discard_events: u64,
    pub fallback_events: u64,
    /// Direct actions the true advisor never takes.
    pub unsafe_actions: u64,
    /// Whether the true hypothesis' weight ever hit zero.
    pub true_discarded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCell {
    pub gamma: f64,
    pub gamma_index: usize,
    pub true_k: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub eta: f64,
    #[serde(rename = "T")]
    pub episode_len: usize,
    pub rollouts: usize,
    pub horizon: usize,
    /// `γ^{n_max}`: bound on the truncation bias of `eu_hat`.
    pub truncation_bias: f64,
    pub eu_star: f64,
    pub eu_hat: f64,
    pub eu_sd: f64,
    pub regret: f64,
    /// 95% normal-approximation half width.
    pub regret_ci: f64,
    pub nd_mean: f64,
    pub nd_sd: f64,
    pub nd_p50: u64,
    pub nd_p90: u64,
    pub nd_max: u64,
    pub discard_events: u64,
    pub fallback_events: u64,
    /// Unsafe direct actions on rollouts where the true hypothesis survived.
    pub unsafe_actions: u64,
    /// Unsafe direct actions on rollouts where it was zeroed at some point.
    pub unsafe_actions_after_discard: u64,
    pub true_discarded_rollouts: u64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub nd: Vec<u64>,
}

impl RegretCell {
    pub fn discard_frequency(&self) -> f64 {
        self.true_discarded_rollouts as f64 / self.rollouts as f64
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Nearest-rank quantile of a sorted sample.
fn quantile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Monte Carlo estimate of the regret of the configured policy in `L^k`.
/// `agent_params` is ignored for the oracle and always-delegate policies.
pub fn estimate_regret(
    h: &Harness,
    true_k: usize,
    gamma_index: usize,
    gamma: f64,
    agent_params: AgentParams,
    rollouts: usize,
    seed: u64,
) -> Result<RegretCell> {
    if rollouts == 0 {
        return Err(DrlError::InvalidArgument("rollouts must be at least 1".into()));
    }
    let env = h.hyps.env(true_k)?;
    let comparator = solve_discounted(&env.composed, gamma)?;
    let eu_star = comparator.v[env.initial().encode(h.hyps.n_actions)];
    let horizon = h.horizon(gamma);
    let agent = match &h.tables {
        Some(tables) => Some(DelegativeAgent::new(&h.hyps, tables, agent_params)?),
        None => None,
    };

    let outcomes: Vec<RolloutOutcome> = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rollout_rng(seed, gamma_index, true_k, r);
            match h.policy {
                PolicyKind::Agent => {
                    let agent = agent.as_ref().expect("agent policy has tables");
                    agent_rollout(agent, &env, true_k, gamma, horizon, &mut rng)
                }
                PolicyKind::Oracle => fixed_rollout(&env, gamma, horizon, &mut rng, |x| {
                    Action::from_index(comparator.policy[x.encode(env.base.n_actions)], env.base.n_actions)
                }),
                PolicyKind::AlwaysDelegate => fixed_rollout(&env, gamma, horizon, &mut rng, |_| Action::Delegate),
            }
        })
        .collect();

    let (eu_hat, eu_sd) = mean_sd(outcomes.iter().map(|o| o.utility));
    let (nd_mean, nd_sd) = mean_sd(outcomes.iter().map(|o| o.delegations as f64));
    let nd: Vec<u64> = outcomes.iter().map(|o| o.delegations).collect();
    let mut sorted = nd.clone();
    sorted.sort_unstable();
    let mut warnings = Vec::new();
    let unsafe_actions = outcomes
        .iter()
        .filter(|o| !o.true_discarded)
        .map(|o| o.unsafe_actions)
        .sum();
    if h.policy == PolicyKind::Agent && unsafe_actions > 0 {
        warnings.push(format!(
            "{unsafe_actions} unsafe direct actions on rollouts where the true hypothesis survived"
        ));
    }
    Ok(RegretCell {
        gamma,
        gamma_index,
        true_k,
        seed,
        policy: h.policy,
        eta: agent_params.eta,
        episode_len: agent_params.episode_len,
        rollouts,
        horizon,
        truncation_bias: gamma.powi(horizon as i32),
        eu_star,
        eu_hat,
        eu_sd,
        regret: eu_star - eu_hat,
        regret_ci: Z95 * eu_sd / (rollouts as f64).sqrt(),
        nd_mean,
        nd_sd,
        nd_p50: quantile(&sorted, 0.5),
        nd_p90: quantile(&sorted, 0.9),
        nd_max: *sorted.last().expect("at least one rollout"),
        discard_events: outcomes.iter().map(|o| o.discard_events).sum(),
        fallback_events: outcomes.iter().map(|o| o.fallback_events).sum(),
        unsafe_actions,
        unsafe_actions_after_discard: outcomes
            .iter()
            .filter(|o| o.true_discarded)
            .map(|o| o.unsafe_actions)
            .sum(),
        true_discarded_rollouts: outcomes.iter().filter(|o| o.true_discarded).count() as u64,
        warnings,
        nd,
    })
}

fn agent_rollout(
    agent: &DelegativeAgent<'_>,
    env: &DelegativeEnv,
    true_k: usize,
    gamma: f64,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutOutcome {
    let mut st = agent.reset(rng);
    let mut out = RolloutOutcome::default();
    let mut acc = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let from = st.last_state;
        let action = agent.select_action(&st);
        if let Action::Direct(a) = action {
            if env.advisor.prob(from.state, a) == 0.0 {
                out.unsafe_actions += 1;
            }
        }
        acc += discount * env.reward(from);
        discount *= gamma;
        let to = sample_step(env, from, action, rng);
        agent.observe_and_update(&mut st, action, to, rng);
        if !st.belief.is_alive(true_k) {
            out.true_discarded = true;
        }
    }
    out.utility = (1.0 - gamma) * acc;
    out.delegations = st.counters.delegations;
    out.discard_events = st.counters.discard_events;
    out.fallback_events = st.counters.fallback_events;
    out
}

fn fixed_rollout(
    env: &DelegativeEnv,
    gamma: f64,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    policy: impl Fn(ComposedState) -> Action,
) -> RolloutOutcome {
    let mut out = RolloutOutcome::default();
    let mut x = env.initial();
    let mut acc = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let action = policy(x);
        match action {
            Action::Delegate => out.delegations += 1,
            Action::Direct(a) => {
                if env.advisor.prob(x.state, a) == 0.0 {
                    out.unsafe_actions += 1;
                }
            }
        }
        acc += discount * env.reward(x);
        discount *= gamma;
        x = sample_step(env, x, action, rng);
    }
    out.utility = (1.0 - gamma) * acc;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub threshold: u64,
    /// Empirical `P[ND > K]`.
    pub frequency: f64,
    /// 95% normal-approximation half width.
    pub ci: f64,
}

pub fn delegation_tail(cell: &RegretCell, thresholds: &[u64]) -> Vec<TailEstimate> {
    let n = cell.nd.len() as f64;
    thresholds
        .iter()
        .map(|&k| {
            let p = cell.nd.iter().filter(|&&d| d > k).count() as f64 / n;
            TailEstimate {
                threshold: k,
                frequency: p,
                ci: Z95 * (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEntry {
    pub gamma: f64,
    pub eta: f64,
    #[serde(rename = "T")]
    pub episode_len: usize,
    pub derivation: Option<ParameterDerivation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub policy: PolicyKind,
    pub entries: Vec<GammaEntry>,
    pub cells: Vec<RegretCell>,
    /// `tails[i]` belongs to `cells[i]`.
    pub tails: Vec<Vec<TailEstimate>>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    /// Mean regret at γ index `gi` over the true hypotheses.
    pub fn mean_regret(&self, gi: usize) -> f64 {
        let cells: Vec<&RegretCell> = self.cells.iter().filter(|c| c.gamma_index == gi).collect();
        cells.iter().map(|c| c.regret).sum::<f64>() / cells.len() as f64
    }
}

/// Resolves η and T for one γ: explicit overrides win, the rest is derived.
pub fn resolve_parameters(cfg: &ExperimentConfig, hyps: &HypothesisSet, gamma: f64) -> Result<GammaEntry> {
    let (eta, t) = (cfg.eta.fixed(), cfg.episode_len.fixed());
    let derivation = match derive_parameters(hyps, gamma, cfg.epsilon) {
        Ok(d) => Some(d),
        Err(e) if eta.is_some() && t.is_some() => {
            log::debug!("no parameter derivation at gamma = {gamma}: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let eta = eta.unwrap_or_else(|| derivation.as_ref().map_or(0.0, |d| d.eta_used));
    let episode_len = t.unwrap_or_else(|| derivation.as_ref().map_or(1, |d| d.episode_len));
    Ok(GammaEntry {
        gamma,
        eta,
        episode_len,
        derivation,
    })
}

pub fn sweep_gamma(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let h = Harness::from_config(cfg)?;
    sweep_with(&h, cfg)
}

/// [`sweep_gamma`] with a prebuilt harness.
pub fn sweep_with(h: &Harness, cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let ks: Vec<usize> = cfg
        .true_hypotheses
        .clone()
        .unwrap_or_else(|| (0..h.hyps.len()).collect());
    let mut report = SweepReport {
        policy: h.policy,
        entries: Vec::new(),
        cells: Vec::new(),
        tails: Vec::new(),
        warnings: Vec::new(),
    };
    for (gi, &gamma) in cfg.gammas.iter().enumerate() {
        let entry = resolve_parameters(cfg, &h.hyps, gamma)?;
        let mut cell_warnings = Vec::new();
        if let Some(d) = &entry.derivation {
            if !d.precondition_ok {
                let w = format!(
                    "gamma = {gamma}: precondition needs gamma >= {:.6}; bounds are not guaranteed",
                    d.precondition_gamma
                );
                log::warn!("{w}");
                cell_warnings.push(w);
            }
            if d.eta_used < d.eta {
                cell_warnings.push(format!(
                    "gamma = {gamma}: derived eta {:.6} capped to {:.6} (below 1/N)",
                    d.eta, d.eta_used
                ));
            }
        }
        let params = AgentParams::new(entry.eta, entry.episode_len, cfg.epsilon, gamma)?;
        for &k in &ks {
            log::info!("cell gamma = {gamma}, k = {k}, {} rollouts", cfg.rollouts);
            let mut cell = estimate_regret(h, k, gi, gamma, params, cfg.rollouts, cfg.seed)?;
            cell.warnings.splice(0..0, cell_warnings.iter().cloned());
            report.warnings.extend(cell.warnings.iter().cloned());
            report.tails.push(delegation_tail(&cell, &cfg.tail_thresholds));
            report.cells.push(cell);
        }
        report.entries.push(entry);
    }
    report.warnings.dedup();
    Ok(report)
}

#[derive(Serialize)]
struct CsvRow {
    gamma: f64,
    eta: f64,
    #[serde(rename = "T")]
    t: usize,
    true_k: usize,
    seed: u64,
    eu_star: f64,
    eu_hat: f64,
    regret: f64,
    regret_ci: f64,
    nd_mean: f64,
    nd_p50: u64,
    nd_p90: u64,
    #[serde(rename = "tail_K")]
    tail_k: u64,
    tail_freq: f64,
    discard_events: u64,
    fallback_events: u64,
    unsafe_actions: u64,
}

/// One row per (γ, true k, tail threshold K).
pub fn report_csv(report: &SweepReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (cell, tails) in report.cells.iter().zip(&report.tails) {
        for tail in tails {
            w.serialize(CsvRow {
                gamma: cell.gamma,
                eta: cell.eta,
                t: cell.episode_len,
                true_k: cell.true_k,
                seed: cell.seed,
                eu_star: cell.eu_star,
                eu_hat: cell.eu_hat,
                regret: cell.regret,
                regret_ci: cell.regret_ci,
                nd_mean: cell.nd_mean,
                nd_p50: cell.nd_p50,
                nd_p90: cell.nd_p90,
                tail_k: tail.threshold,
                tail_freq: tail.frequency,
                discard_events: cell.discard_events,
                fallback_events: cell.fallback_events,
                unsafe_actions: cell.unsafe_actions,
            })
            .map_err(|e| DrlError::InvalidArgument(format!("csv: {e}")))?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| DrlError::InvalidArgument(format!("csv: {e}")))?;
    let mut text = String::from_utf8(bytes).expect("csv output is utf-8");
    if report.cells.is_empty() {
        text = format!("{CSV_HEADER}\n");
    }
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub csv: String,
    pub summary: String,
    pub manifest: String,
}

/// Everything needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub parameters: Vec<GammaEntry>,
    pub outputs: OutputPaths,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, report: &SweepReport, outputs: OutputPaths) -> Self {
        RunManifest {
            manifest_version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            parameters: report.entries.clone(),
            outputs,
        }
    }
}

// ---------------------------------------------------------------------------
// regret decomposition

pub const MAX_IDENTITY_STATES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretIdentity {
    /// `V(s₀) − V_π(s₀)`, both normalized.
    pub regret: f64,
    /// `Σ_{n<H} γⁿ E[V(xₙ) − Q(xₙ, π)]`.
    pub decomposition: f64,
    pub residual: f64,
    /// `2 γ^H`.
    pub tail_bound: f64,
}

fn check_identity_inputs(m: &FiniteMdp, pi: &[Vec<f64>]) -> Result<()> {
    if m.n_states > MAX_IDENTITY_STATES {
        return Err(DrlError::TooLarge(format!(
            "{} states; the decomposition check handles at most {MAX_IDENTITY_STATES}",
            m.n_states
        )));
    }
    if pi.len() != m.n_states || pi.iter().any(|r| r.len() != m.n_actions) {
        return Err(DrlError::DimensionMismatch("policy shape differs from the MDP".into()));
    }
    Ok(())
}

/// Per-state gap `V(s) − Σ_a π(a|s) Q(s,a)` and the policy's state chain.
fn gaps_and_chain(m: &FiniteMdp, pi: &[Vec<f64>], gamma: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    let sol = solve_discounted(m, gamma)?;
    let vpi = evaluate_policy(m, pi, gamma)?;
    let gaps = (0..m.n_states)
        .map(|s| sol.v[s] - (0..m.n_actions).map(|a| pi[s][a] * sol.q[s][a]).sum::<f64>())
        .collect();
    let regret = sol.v[m.initial_state] - vpi[m.initial_state];
    Ok((gaps, m.induced_chain(pi), regret))
}

/// Both sides of the regret decomposition for a memoryless policy, the
/// expectation over paths of length `horizon` taken exactly by propagating
/// the state distribution.
pub fn check_regret_identity(m: &FiniteMdp, pi: &[Vec<f64>], gamma: f64, horizon: usize) -> Result<RegretIdentity> {
    check_identity_inputs(m, pi)?;
    let (gaps, chain, regret) = gaps_and_chain(m, pi, gamma)?;
    let mut dist = vec![0.0; m.n_states];
    dist[m.initial_state] = 1.0;
    let mut decomposition = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        decomposition += discount * dist.iter().zip(&gaps).map(|(p, g)| p * g).sum::<f64>();
        discount *= gamma;
        let mut next = vec![0.0; m.n_states];
        for (s, p) in dist.iter().enumerate() {
            if *p > 0.0 {
                for (t, q) in chain[s].iter().enumerate() {
                    next[t] += p * q;
                }
            }
        }
        dist = next;
    }
    Ok(RegretIdentity {
        regret,
        decomposition,
        residual: (regret - decomposition).abs(),
        tail_bound: 2.0 * gamma.powi(horizon as i32),
    })
}

/// [`check_regret_identity`] by literal enumeration of every state path of
/// length `horizon`; exponential, for cross-checking at small horizons.
pub fn check_regret_identity_by_paths(
    m: &FiniteMdp,
    pi: &[Vec<f64>],
    gamma: f64,
    horizon: usize,
) -> Result<RegretIdentity> {
    check_identity_inputs(m, pi)?;
    if (m.n_states as f64).powi(horizon as i32) > 1e7 {
        return Err(DrlError::TooLarge(format!(
            "{}^{horizon} paths is too many to enumerate",
            m.n_states
        )));
    }
    let (gaps, chain, regret) = gaps_and_chain(m, pi, gamma)?;
    fn walk(s: usize, n: usize, prob: f64, horizon: usize, gamma: f64, gaps: &[f64], chain: &[Vec<f64>]) -> f64 {
        if n == horizon {
            return 0.0;
        }
        let here = prob * gamma.powi(n as i32) * gaps[s];
        here + chain[s]
            .iter()
            .enumerate()
            .filter(|(_, q)| **q > 0.0)
            .map(|(t, q)| walk(t, n + 1, prob * q, horizon, gamma, gaps, chain))
            .sum::<f64>()
    }
    let decomposition = walk(m.initial_state, 0, 1.0, horizon, gamma, &gaps, &chain);
    Ok(RegretIdentity {
        regret,
        decomposition,
        residual: (regret - decomposition).abs(),
        tail_bound: 2.0 * gamma.powi(horizon as i32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::deterministic_policy;
    use rand::Rng;

    fn cfg(name: &str, gammas: Vec<f64>, policy: PolicyKind, rollouts: usize) -> ExperimentConfig {
        ExperimentConfig {
            hypotheses: HypothesisSource::Builtin {
                name: name.into(),
                mix: None,
            },
            gammas,
            epsilon: 0.1,
            eta: Setting::default(),
            episode_len: Setting::default(),
            rollouts,
            truncation_tol: DEFAULT_TRUNCATION_TOL,
            seed: 7,
            tail_thresholds: vec![0, 1, 5],
            policy,
            true_hypotheses: None,
        }
    }

    #[test]
    fn derivation_hand_example() {
        let d = derive_parameters_from(2, 2, 0.1, 0.9999, 1.0).unwrap();
        let eta = 0.1 * 2f64.powf(-0.5) * 2f64.ln().powf(0.25) * 12f64.powf(0.25) * 2f64.powf(0.25);
        assert!((d.eta - eta).abs() < 1e-14);
        assert!((d.eta - 0.14281).abs() < 1e-5);
        assert_eq!(d.episode_len, 8);
        assert!(d.t_raw > 7.0 && d.t_raw < 8.0);
        assert!((d.precondition_gamma - (1.0 - 8.0 / (4.0 * 2f64.ln()) * 0.1)).abs() < 1e-15);
        assert!((d.precondition_gamma - 0.7115).abs() < 1e-4);
        assert!(d.precondition_ok);
        let xi = (64.0 * 2f64.ln() * 12.0 * 2.0f64).powf(0.25);
        assert!((d.xi - xi).abs() < 1e-12);
    }

    #[test]
    fn derivation_zero_tau_ceiling() {
        let d = derive_parameters_from(2, 2, 0.1, 0.9, 0.0).unwrap();
        let raw = 0.1f64.powf(-0.25) * 2f64.powf(-0.5) * 2f64.ln().powf(-0.25) * 12f64.powf(-0.25);
        assert!((d.t_raw - raw).abs() < 1e-15);
        assert_eq!(d.episode_len, raw.ceil() as usize);
        assert!(d.episode_len >= 1);
        assert!(derive_parameters_from(1, 2, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn derivation_caps_eta_below_one_over_n() {
        let d = derive_parameters_from(2, 3, 0.1, 1.0 - 2f64.powi(-4), 1.0).unwrap();
        assert!(d.eta > 0.5);
        assert!(d.eta_used < 0.5);
    }

    #[test]
    fn derived_columns_scale_with_gamma() {
        let h = fixtures::detour_trap_pair(0.1, 0.5).unwrap();
        let gammas: Vec<f64> = (4..=10).map(|j| 1.0 - 2f64.powi(-j)).collect();
        let ds: Vec<ParameterDerivation> = gammas.iter().map(|&g| derive_parameters(&h, g, 0.1).unwrap()).collect();
        for w in ds.windows(2) {
            assert_eq!(w[0].tau_bar, w[1].tau_bar);
            let ratio = w[1].eta / w[0].eta;
            let expect = ((1.0 - w[1].gamma) / (1.0 - w[0].gamma)).powf(0.25);
            assert!((ratio - expect).abs() < 1e-12);
            assert!(w[1].episode_len >= w[0].episode_len);
        }
    }

    #[test]
    fn setting_round_trips() {
        let a: Setting<f64> = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(a, Setting::Auto(AutoTag::Auto));
        let b: Setting<usize> = serde_json::from_str("12").unwrap();
        assert_eq!(b.fixed(), Some(12));
        assert!(serde_json::from_str::<Setting<f64>>("\"often\"").is_err());
        assert_eq!(serde_json::to_string(&a).unwrap(), "\"auto\"");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg("trap_pair", vec![0.9], PolicyKind::Agent, 10);
        assert!(c.validate().is_ok());
        c.rollouts = 0;
        assert!(c.validate().is_err());
        let mut c = cfg("trap_pair", vec![1.0], PolicyKind::Agent, 10);
        assert!(c.validate().is_err());
        c.gammas = vec![0.9];
        c.truncation_tol = 1.0;
        assert!(c.validate().is_err());
        let c = cfg("nope", vec![0.9], PolicyKind::Agent, 10);
        assert!(Harness::from_config(&c).is_err());
    }

    #[test]
    fn horizon_bounds_truncation() {
        let h = Harness::new(fixtures::trap_pair(), 0.1, PolicyKind::Oracle, 1e-3).unwrap();
        for g in [0.5, 0.9, 0.99, 0.999] {
            let n = h.horizon(g);
            assert!(g.powi(n as i32) <= 1e-3);
            assert!(g.powi(n as i32 - 1) > 1e-3);
        }
    }

    #[test]
    fn oracle_has_zero_regret() {
        let c = cfg("three_door", vec![0.9], PolicyKind::Oracle, 2000);
        let r = sweep_gamma(&c).unwrap();
        // two CI half widths is about 4σ
        for cell in &r.cells {
            let band = c.truncation_tol + 2.0 * cell.regret_ci;
            assert!(cell.regret.abs() <= band, "k = {}: regret {} band {band}", cell.true_k, cell.regret);
            assert!((0.0..=1.0).contains(&cell.eu_hat));
        }
    }

    #[test]
    fn constant_reward_regret_is_exactly_zero() {
        let m = fixtures::constant_reward_mdp(1.0);
        let hyps = HypothesisSet::from_parts(
            vec![m.clone(), m],
            vec![AdvisorPolicy::uniform(3, 2, 0.1).unwrap(), AdvisorPolicy::uniform(3, 2, 0.1).unwrap()],
        )
        .unwrap();
        let h = Harness::new(hyps, 0.1, PolicyKind::Agent, 1e-3).unwrap();
        let p = AgentParams::new(0.2, 3, 0.1, 0.9).unwrap();
        let cell = estimate_regret(&h, 0, 0, 0.9, p, 50, 1).unwrap();
        let expected = 1.0 - 0.9f64.powi(cell.horizon as i32);
        assert!((cell.eu_star - 1.0).abs() < 1e-12);
        // every rollout collects the same truncated utility
        assert!((cell.eu_hat - expected).abs() < 1e-12);
        assert!(cell.eu_sd < 1e-12);
        assert!((cell.regret - cell.truncation_bias).abs() < 1e-12);
    }

    #[test]
    fn agent_beats_always_delegate_on_detour_pair() {
        let agent = sweep_gamma(&cfg("detour_trap_pair", vec![0.99], PolicyKind::Agent, 300)).unwrap();
        let base = sweep_gamma(&cfg("detour_trap_pair", vec![0.99], PolicyKind::AlwaysDelegate, 300)).unwrap();
        let (ra, rb) = (agent.mean_regret(0), base.mean_regret(0));
        let ci = agent.cells.iter().chain(&base.cells).map(|c| c.regret_ci).fold(0.0, f64::max);
        assert!(ra + 2.0 * ci < rb, "agent {ra} baseline {rb}");
        assert!(agent.cells.iter().all(|c| c.unsafe_actions == 0));
    }

    #[test]
    fn cells_are_deterministic_and_seed_dependent() {
        let c = cfg("three_door", vec![0.95], PolicyKind::Agent, 64);
        let a = report_csv(&sweep_gamma(&c).unwrap()).unwrap();
        let b = report_csv(&sweep_gamma(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut c2 = c.clone();
        c2.seed = 8;
        assert_ne!(a, report_csv(&sweep_gamma(&c2).unwrap()).unwrap());
    }

    #[test]
    fn csv_shape() {
        let c = cfg("trap_pair", vec![0.9, 0.95], PolicyKind::Agent, 8);
        let r = sweep_gamma(&c).unwrap();
        let text = report_csv(&r).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.count(), 2 * 2 * 3);
    }

    #[test]
    fn tail_examples() {
        let m = fixtures::three_door_mdp(1);
        let ad = fixtures::three_door(0.2, 0.5).unwrap().advisors[1].clone();
        let hyps = HypothesisSet::from_parts(vec![m], vec![ad]).unwrap();
        let h = Harness::new(hyps, 0.2, PolicyKind::Agent, 1e-2).unwrap();
        let cell = estimate_regret(&h, 0, 0, 0.9, AgentParams::new(0.5, 4, 0.2, 0.9).unwrap(), 100, 3).unwrap();
        let t = delegation_tail(&cell, &[0, cell.horizon as u64]);
        assert_eq!(t[0].frequency, 0.0);
        assert_eq!(t[1].frequency, 0.0);

        let base = Harness::new(fixtures::trap_pair(), 0.5, PolicyKind::AlwaysDelegate, 1e-2).unwrap();
        let cell = estimate_regret(&base, 0, 0, 0.9, AgentParams::new(0.1, 1, 0.5, 0.9).unwrap(), 20, 3).unwrap();
        let t = delegation_tail(&cell, &[0, cell.horizon as u64 - 1, cell.horizon as u64]);
        assert_eq!(t[0].frequency, 1.0);
        assert_eq!(t[1].frequency, 1.0);
        assert_eq!(t[2].frequency, 0.0);
    }

    #[test]
    fn manifest_replays_as_config() {
        let c = cfg("trap_pair", vec![0.9], PolicyKind::Agent, 4);
        let r = sweep_gamma(&c).unwrap();
        let m = RunManifest::new(
            &c,
            &r,
            OutputPaths {
                csv: "a.csv".into(),
                summary: "a.json".into(),
                manifest: "a.manifest.json".into(),
            },
        );
        let text = serde_json::to_string_pretty(&m).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), c);
        let plain = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&plain).unwrap(), c);
    }

    #[test]
    fn identity_trap_always_b() {
        let m = fixtures::trap_mdp();
        let pi = deterministic_policy(&[1, 1], 2);
        let r = check_regret_identity(&m, &pi, 0.9, 200).unwrap();
        assert!((r.regret - 0.9).abs() < 1e-12);
        assert!(r.residual <= r.tail_bound);
        let opt = deterministic_policy(&[0, 0], 2);
        let r = check_regret_identity(&m, &opt, 0.9, 50).unwrap();
        assert!(r.regret.abs() < 1e-12 && r.decomposition.abs() < 1e-12);
    }

    #[test]
    fn identity_propagation_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = fixtures::random_mdp(&mut rng, 3, 2);
            let pi = fixtures::random_policy(&mut rng, 3, 2);
            let g = rng.gen_range(0.5..0.95);
            let a = check_regret_identity(&m, &pi, g, 8).unwrap();
            let b = check_regret_identity_by_paths(&m, &pi, g, 8).unwrap();
            assert!((a.decomposition - b.decomposition).abs() < 1e-12);
            assert!(a.residual <= a.tail_bound);
        }
    }

    #[test]
    fn identity_rejects_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = fixtures::random_mdp(&mut rng, 7, 2);
        let pi = fixtures::random_policy(&mut rng, 7, 2);
        assert!(matches!(check_regret_identity(&m, &pi, 0.9, 10), Err(DrlError::TooLarge(_))));
    }
}
