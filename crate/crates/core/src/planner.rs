//! Exact discounted planning and the γ→1 limit quantities.
//!
//! All values are normalized by `(1−γ)` so they lie in `[0, 1]`:
//!
//! ```text
//! Q(s,a,γ) = (1−γ)·R(s) + γ·Σ_t T(t|s,a)·V(t,γ)
//! V(s,γ)   = max_a Q(s,a,γ)
//! ```
//!
//! Limits `V⁰`, `Q⁰` are extrapolated from a discount sweep; the Blackwell
//! sets are read off the argmax at the top of the sweep and accepted only if
//! they are stable there.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::mdp::{validate_mdp, FiniteMdp};

/// Default tolerance for "trap-free" membership against extrapolated `Q⁰`.
pub const DEFAULT_DELTA_TRAP: f64 = 1e-4;
/// Default tolerance for argmax ties.
pub const DEFAULT_DELTA_TIE: f64 = 1e-9;
/// Bellman residual certified by [`solve_discounted`].
pub const BELLMAN_TOL: f64 = 1e-10;

// Strict policy-iteration improvement threshold.
const IMPROVE_TOL: f64 = 1e-13;
// Exponents j of the sweep γ = 1 − 10^(−j); the last three drive extrapolation.
const SWEEP_EXPONENTS: [i32; 7] = [1, 2, 3, 4, 5, 6, 7];
// τ grid: 1−θ ranges over (TAU_ALPHA_MIN, 1−γ).
const TAU_ALPHA_MIN: f64 = 1e-5;
const TAU_GRID_POINTS: usize = 48;
const TAU_REL_STEP: f64 = 1e-2;
// Rounding in the slope grows like machine epsilon / (1−θ)² ≈ 2e-6 at the grid
// floor; anything below this is reported as zero.
const TAU_NOISE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub delta_trap: f64,
    pub delta_tie: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            delta_trap: DEFAULT_DELTA_TRAP,
            delta_tie: DEFAULT_DELTA_TIE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningSolution {
    pub gamma: f64,
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    /// Per-state argmax sets of `q`, ties within `delta_tie`.
    pub optimal_actions: Vec<Vec<usize>>,
    /// Lowest-index optimal action per state.
    pub policy: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSolution {
    pub v0: Vec<f64>,
    pub q0: Vec<Vec<f64>>,
    /// `A⁰(s)`: actions whose `Q⁰` is within `delta_trap` of `V⁰`.
    pub trap_free: Vec<Vec<usize>>,
    /// `A★(s)`: argmax of `Q` at the top of the discount sweep.
    pub blackwell: Vec<Vec<usize>>,
    /// Smallest sweep discount from which every argmax set already equals
    /// `blackwell`. An observed surrogate for `γ_M`, not an exact value.
    pub gamma_threshold: f64,
    /// Grid estimate of `τ_M` at `min(gamma_threshold, 1 − 10⁻⁴)`.
    pub tau: f64,
    pub sweep: Vec<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(DrlError::InvalidArgument(format!("gamma = {gamma} is not in (0,1)")))
    }
}

fn check_mdp(m: &FiniteMdp) -> Result<()> {
    let report = validate_mdp(m);
    if report.is_ok() {
        Ok(())
    } else {
        Err(DrlError::InvalidModel(report.to_string()))
    }
}

/// Solves `(I − γP) v = (1−γ) R` by LU with two rounds of iterative
/// refinement.
fn solve_chain(chain: &[Vec<f64>], reward: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = reward.len();
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - gamma * chain[i][j]
    });
    let b = DVector::from_iterator(n, reward.iter().map(|r| (1.0 - gamma) * r));
    let lu = a.clone().lu();
    let mut x = lu.solve(&b).ok_or(DrlError::SingularSystem { gamma })?;
    for _ in 0..2 {
        let r = &b - &a * &x;
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => return Err(DrlError::SingularSystem { gamma }),
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DrlError::SingularSystem { gamma });
    }
    Ok(x.iter().copied().collect())
}

fn q_values(m: &FiniteMdp, v: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    (0..m.n_states)
        .map(|s| {
            (0..m.n_actions)
                .map(|a| {
                    let ev: f64 = m.transition[s][a].iter().zip(v).map(|(p, x)| p * x).sum();
                    (1.0 - gamma) * m.reward[s] + gamma * ev
                })
                .collect()
        })
        .collect()
}

fn argmax_set(row: &[f64], tie: f64) -> Vec<usize> {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter()
        .enumerate()
        .filter(|(_, q)| **q >= best - tie)
        .map(|(a, _)| a)
        .collect()
}

fn lowest_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, q) in row.iter().enumerate() {
        if *q > row[best] {
            best = a;
        }
    }
    best
}

/// Iteration cap for the value-iteration warm start at discount `gamma`.
pub fn iteration_cap(gamma: f64) -> usize {
    ((1e-12f64).ln() / gamma.ln()).ceil() as usize + 64
}

// Warm-start sweeps before switching to policy iteration.
const WARM_START_SWEEPS: usize = 256;

/// Optimal normalized values at discount `gamma` with the default tie
/// tolerance.
pub fn solve_discounted(m: &FiniteMdp, gamma: f64) -> Result<PlanningSolution> {
    solve_discounted_with(m, gamma, DEFAULT_DELTA_TIE)
}

pub fn solve_discounted_with(m: &FiniteMdp, gamma: f64, delta_tie: f64) -> Result<PlanningSolution> {
    check_gamma(gamma)?;
    check_mdp(m)?;

    // Value-iteration warm start, then Howard policy iteration with exact
    // linear solves.
    let mut v = vec![0.0; m.n_states];
    let sweeps = WARM_START_SWEEPS.min(iteration_cap(gamma));
    for _ in 0..sweeps {
        let q = q_values(m, &v, gamma);
        let next: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::MIN, f64::max)).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= 1e-12 {
            break;
        }
    }
    let mut policy: Vec<usize> = q_values(m, &v, gamma).iter().map(|row| lowest_argmax(row)).collect();

    let max_rounds = 64 + 4 * m.n_states * m.n_actions;
    let mut rounds = 0;
    let q = loop {
        let chain: Vec<Vec<f64>> = (0..m.n_states).map(|s| m.transition[s][policy[s]].clone()).collect();
        v = solve_chain(&chain, &m.reward, gamma)?;
        let q = q_values(m, &v, gamma);
        let mut changed = false;
        for s in 0..m.n_states {
            let best = lowest_argmax(&q[s]);
            if q[s][best] > q[s][policy[s]] + IMPROVE_TOL {
                policy[s] = best;
                changed = true;
            }
        }
        rounds += 1;
        if !changed {
            break q;
        }
        if rounds >= max_rounds {
            let residual = bellman_residual(&v, &q);
            return Err(DrlError::NonConvergence { iterations: rounds, residual });
        }
    };

    let residual = bellman_residual(&v, &q);
    if residual > BELLMAN_TOL {
        return Err(DrlError::NonConvergence { iterations: rounds, residual });
    }
    let v: Vec<f64> = v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
    let q: Vec<Vec<f64>> = q
        .into_iter()
        .map(|row| row.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
        .collect();
    let optimal_actions = q.iter().map(|row| argmax_set(row, delta_tie)).collect();
    let policy = q.iter().map(|row| lowest_argmax(row)).collect();
    Ok(PlanningSolution {
        gamma,
        v,
        q,
        optimal_actions,
        policy,
    })
}

fn bellman_residual(v: &[f64], q: &[Vec<f64>]) -> f64 {
    v.iter()
        .zip(q)
        .map(|(x, row)| (x - row.iter().copied().fold(f64::MIN, f64::max)).abs())
        .fold(0.0, f64::max)
}

/// Normalized values of a memoryless stochastic policy `pi[s][a]`, by direct
/// solve of `v = (1−γ)R + γ T_π v`.
pub fn evaluate_policy(m: &FiniteMdp, pi: &[Vec<f64>], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_mdp(m)?;
    if pi.len() != m.n_states || pi.iter().any(|row| row.len() != m.n_actions) {
        return Err(DrlError::DimensionMismatch(format!(
            "policy must be {}x{}",
            m.n_states, m.n_actions
        )));
    }
    for (s, row) in pi.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > crate::mdp::PROB_TOL {
            return Err(DrlError::InvalidArgument(format!("policy row {s} is not a distribution")));
        }
    }
    let chain = m.induced_chain(pi);
    solve_chain(&chain, &m.reward, gamma)
}

/// One-hot policy matrix for a deterministic policy.
pub fn deterministic_policy(actions: &[usize], n_actions: usize) -> Vec<Vec<f64>> {
    actions
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; n_actions];
            row[a] = 1.0;
            row
        })
        .collect()
}

/// Quadratic extrapolation to `α = 0` through `(α_i, y_i)`.
fn extrapolate(alphas: &[f64; 3], ys: [f64; 3]) -> f64 {
    let mut total = 0.0;
    for i in 0..3 {
        let mut w = 1.0;
        for j in 0..3 {
            if i != j {
                w *= alphas[j] / (alphas[j] - alphas[i]);
            }
        }
        total += w * ys[i];
    }
    total
}

pub fn limit_quantities(m: &FiniteMdp) -> Result<LimitSolution> {
    limit_quantities_with(m, &PlannerConfig::default())
}

/// `V⁰`, `Q⁰`, `A⁰`, `A★`, the stability threshold and `τ`.
pub fn limit_quantities_with(m: &FiniteMdp, cfg: &PlannerConfig) -> Result<LimitSolution> {
    check_mdp(m)?;
    let sweep: Vec<f64> = SWEEP_EXPONENTS.iter().map(|&j| 1.0 - 10f64.powi(-j)).collect();
    let solutions = sweep
        .iter()
        .map(|&g| solve_discounted_with(m, g, cfg.delta_tie))
        .collect::<Result<Vec<_>>>()?;

    let top = &solutions[solutions.len() - 3..];
    let alphas = [1.0 - top[0].gamma, 1.0 - top[1].gamma, 1.0 - top[2].gamma];
    let q0: Vec<Vec<f64>> = (0..m.n_states)
        .map(|s| {
            (0..m.n_actions)
                .map(|a| extrapolate(&alphas, [top[0].q[s][a], top[1].q[s][a], top[2].q[s][a]]).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let v0: Vec<f64> = q0.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
    let trap_free: Vec<Vec<usize>> = q0
        .iter()
        .zip(&v0)
        .map(|(row, &best)| {
            row.iter()
                .enumerate()
                .filter(|(_, q)| **q >= best - cfg.delta_trap)
                .map(|(a, _)| a)
                .collect()
        })
        .collect();

    let blackwell = top[2].optimal_actions.clone();
    for s in 0..m.n_states {
        for sol in &top[..2] {
            if sol.optimal_actions[s] != blackwell[s] {
                return Err(DrlError::BlackwellUnstable {
                    state: s,
                    detail: format!(
                        "argmax {:?} at gamma {} vs {:?} at gamma {}",
                        sol.optimal_actions[s], sol.gamma, blackwell[s], top[2].gamma
                    ),
                });
            }
        }
        if let Some(a) = blackwell[s].iter().find(|a| !trap_free[s].contains(a)) {
            return Err(DrlError::BlackwellUnstable {
                state: s,
                detail: format!("argmax action {a} is not trap-free; sweep has not reached the Blackwell regime"),
            });
        }
    }

    let mut first_stable = solutions.len() - 3;
    while first_stable > 0 && solutions[first_stable - 1].optimal_actions == blackwell {
        first_stable -= 1;
    }
    let gamma_threshold = sweep[first_stable];
    let tau = tau_bound(m, gamma_threshold.min(1.0 - 1e-4))?;

    Ok(LimitSolution {
        v0,
        q0,
        trap_free,
        blackwell,
        gamma_threshold,
        tau,
        sweep,
    })
}

/// Grid estimate of `τ_M(γ) = max_s sup_{θ∈(γ,1)} |dV(s,θ)/dθ|`.
///
/// `1−θ` runs over a log-spaced grid in `(1e-5, 1−γ)`. At each grid point the
/// central difference `(V(θ+h) − V(θ−h)) / 2h` with `h = 0.01·(1−θ)` is taken.
/// When the optimal policy is the same at both ends, the secant slope is
/// evaluated through the resolvent identity
/// `ΔV/Δθ = (I − θ₊P)⁻¹ (V(θ₋) − R) / θ₋`, which avoids cancellation.
/// Slopes below `1e-9` are reported as zero.
pub fn tau_bound(m: &FiniteMdp, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_mdp(m)?;
    let alpha_hi = 1.0 - gamma;
    if alpha_hi < 10.0 * TAU_ALPHA_MIN {
        return Err(DrlError::TauGrid(format!(
            "1 - gamma = {alpha_hi:e} leaves no room for a grid above 1 - theta = {TAU_ALPHA_MIN:e}; \
             use gamma <= {}",
            1.0 - 10.0 * TAU_ALPHA_MIN
        )));
    }
    let ratio = TAU_ALPHA_MIN / alpha_hi;
    let mut tau: f64 = 0.0;
    for i in 0..TAU_GRID_POINTS {
        let alpha = alpha_hi * ratio.powf((i as f64 + 0.5) / TAU_GRID_POINTS as f64);
        let theta = 1.0 - alpha;
        let h = TAU_REL_STEP * alpha;
        let lo = solve_discounted(m, theta - h)?;
        let hi = solve_discounted(m, theta + h)?;
        let slopes: Vec<f64> = if lo.policy == hi.policy {
            let chain: Vec<Vec<f64>> = (0..m.n_states).map(|s| m.transition[s][hi.policy[s]].clone()).collect();
            let rhs: Vec<f64> = lo
                .v
                .iter()
                .zip(&m.reward)
                .map(|(v, r)| (v - r) / (theta - h))
                .collect();
            // solve_chain scales its right-hand side by (1−θ₊); undo that.
            let scale = 1.0 - (theta + h);
            solve_chain(&chain, &rhs, theta + h)?
                .into_iter()
                .map(|x| x / scale)
                .collect()
        } else {
            hi.v.iter().zip(&lo.v).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        };
        for d in slopes {
            tau = tau.max(d.abs());
        }
    }
    Ok(if tau < TAU_NOISE_FLOOR { 0.0 } else { tau })
}
