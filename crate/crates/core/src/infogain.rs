//! Entropy, KL divergence, mutual information, and exact-summation oracles
//! for the information inequalities that drive the delegation bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};

const MASS_TOL: f64 = 1e-12;
/// Slack allowed on the right-hand side of the checked inequalities.
pub const ORACLE_SLACK: f64 = 1e-12;

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `KL(p ‖ q)` in nats; `f64::INFINITY` when `p` is not absolutely continuous
/// with respect to `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total.max(0.0)
}

/// Joint distribution of `(K, X)` as `table[k][x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub table: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let width = table.first().map_or(0, Vec::len);
        if table.is_empty() || width == 0 || table.iter().any(|r| r.len() != width) {
            return Err(DrlError::DimensionMismatch("joint table must be a non-empty rectangle".into()));
        }
        if table.iter().flatten().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(DrlError::InvalidArgument("joint table has a negative or non-finite entry".into()));
        }
        let total: f64 = table.iter().flatten().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(DrlError::InvalidArgument(format!("joint table sums to {total}")));
        }
        Ok(DiscreteJoint { table })
    }

    /// Product of two marginals.
    pub fn independent(pk: &[f64], px: &[f64]) -> Result<Self> {
        DiscreteJoint::new(pk.iter().map(|a| px.iter().map(|b| a * b).collect()).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.table.len()
    }

    pub fn n_cols(&self) -> usize {
        self.table[0].len()
    }

    pub fn marginal_row(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_col(&self) -> Vec<f64> {
        (0..self.n_cols())
            .map(|x| self.table.iter().map(|r| r[x]).sum())
            .collect()
    }

    /// `P(X = · | K = k)`, or `None` when `P(K = k) = 0`.
    pub fn conditional(&self, k: usize) -> Option<Vec<f64>> {
        let mass: f64 = self.table[k].iter().sum();
        (mass > 0.0).then(|| self.table[k].iter().map(|x| x / mass).collect())
    }

    pub fn transpose(&self) -> DiscreteJoint {
        DiscreteJoint {
            table: (0..self.n_cols())
                .map(|x| self.table.iter().map(|r| r[x]).collect())
                .collect(),
        }
    }
}

/// `I(K; X) = Σ_k P(k) KL(P(X|k) ‖ P(X))`.
pub fn mutual_information(j: &DiscreteJoint) -> f64 {
    let px = j.marginal_col();
    let pk = j.marginal_row();
    (0..j.n_rows())
        .filter_map(|k| j.conditional(k).map(|c| pk[k] * kl_divergence(&c, &px)))
        .sum::<f64>()
        .max(0.0)
}

/// `ln(1 + ε(1−ε)^{1/ε−1})`: information gained per unit of hypothesis
/// mass that disagrees with the advisor.
pub fn delegation_info_floor(epsilon: f64) -> f64 {
    (epsilon * (1.0 - epsilon).powf(1.0 / epsilon - 1.0)).ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelegationInfoCheck {
    pub hypothesis_holds: bool,
    pub bound_holds: bool,
    pub mutual_information: f64,
    /// `η · delegation_info_floor(ε)`.
    pub bound: f64,
}

/// Exact check of: if for every `a`,
/// `P[P(X=a|K) > 0 ∧ (a = a★ ∨ P(X=a★|K) ≤ ε)] ≤ 1 − η`,
/// then `I(K;X) ≥ η·ln(1+ε(1−ε)^{1/ε−1})`. Requires `ε < 1/|A|`.
pub fn check_prop_delegation_information(
    j: &DiscreteJoint,
    a_star: usize,
    epsilon: f64,
    eta: f64,
) -> Result<DelegationInfoCheck> {
    let n_actions = j.n_cols();
    if a_star >= n_actions {
        return Err(DrlError::InvalidArgument(format!("a_star = {a_star} out of range")));
    }
    if !(epsilon > 0.0 && epsilon * (n_actions as f64) < 1.0) {
        return Err(DrlError::InvalidArgument(format!("epsilon = {epsilon} must lie in (0, 1/|A|)")));
    }
    let hypothesis_holds = hypothesis_mass(j, a_star, epsilon)
        .iter()
        .all(|&m| m <= 1.0 - eta);
    let mi = mutual_information(j);
    let bound = eta * delegation_info_floor(epsilon);
    Ok(DelegationInfoCheck {
        hypothesis_holds,
        bound_holds: mi >= bound - ORACLE_SLACK,
        mutual_information: mi,
        bound,
    })
}

/// Per action `a`, the probability of the event in the hypothesis.
fn hypothesis_mass(j: &DiscreteJoint, a_star: usize, epsilon: f64) -> Vec<f64> {
    let pk = j.marginal_row();
    (0..j.n_cols())
        .map(|a| {
            (0..j.n_rows())
                .filter_map(|k| j.conditional(k).map(|c| (k, c)))
                .filter(|(_, c)| c[a] > 0.0 && (a == a_star || c[a_star] <= epsilon))
                .map(|(k, _)| pk[k])
                .sum()
        })
        .collect()
}

/// Largest `η` for which the hypothesis of
/// [`check_prop_delegation_information`] holds (may be ≤ 0).
pub fn max_admissible_eta(j: &DiscreteJoint, a_star: usize, epsilon: f64) -> f64 {
    1.0 - hypothesis_mass(j, a_star, epsilon).into_iter().fold(0.0, f64::max)
}

/// Joint of `(K, J, U)` with `U` supported on `u_values ⊆ [0,1]`:
/// `table[k][j][i] = P(K=k, J=j, U=u_values[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThompsonJoint {
    pub u_values: Vec<f64>,
    pub table: Vec<Vec<Vec<f64>>>,
}

impl ThompsonJoint {
    pub fn new(u_values: Vec<f64>, table: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = table.len();
        if n == 0 || u_values.is_empty() {
            return Err(DrlError::DimensionMismatch("empty Thompson joint".into()));
        }
        if u_values.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(DrlError::InvalidArgument("U support must lie in [0,1]".into()));
        }
        if table
            .iter()
            .any(|r| r.len() != n || r.iter().any(|c| c.len() != u_values.len()))
        {
            return Err(DrlError::DimensionMismatch("Thompson table must be N×N×|U|".into()));
        }
        if table.iter().flatten().flatten().any(|&x| !(x >= 0.0)) {
            return Err(DrlError::InvalidArgument("negative probability".into()));
        }
        let total: f64 = table.iter().flatten().flatten().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(DrlError::InvalidArgument(format!("Thompson table sums to {total}")));
        }
        Ok(ThompsonJoint { u_values, table })
    }

    fn n(&self) -> usize {
        self.table.len()
    }

    fn kj(&self, k: usize, j: usize) -> f64 {
        self.table[k][j].iter().sum()
    }

    pub fn marginal_k(&self) -> Vec<f64> {
        (0..self.n()).map(|k| (0..self.n()).map(|j| self.kj(k, j)).sum()).collect()
    }

    pub fn marginal_j(&self) -> Vec<f64> {
        (0..self.n()).map(|j| (0..self.n()).map(|k| self.kj(k, j)).sum()).collect()
    }

    /// Joint of `K` against the pair `(J, U)`.
    pub fn k_vs_ju(&self) -> DiscreteJoint {
        DiscreteJoint {
            table: self.table.iter().map(|r| r.iter().flatten().copied().collect()).collect(),
        }
    }

    pub fn k_vs_j(&self) -> DiscreteJoint {
        DiscreteJoint {
            table: (0..self.n())
                .map(|k| (0..self.n()).map(|j| self.kj(k, j)).collect())
                .collect(),
        }
    }

    pub fn mean_u(&self) -> f64 {
        self.table
            .iter()
            .flatten()
            .map(|c| c.iter().zip(&self.u_values).map(|(p, u)| p * u).sum::<f64>())
            .sum()
    }

    /// `Σ_k ζ(k) E[U | K=k, J=k]`: the mean of `U` when the sample matches.
    pub fn matched_mean_u(&self) -> f64 {
        let zeta = self.marginal_k();
        (0..self.n())
            .filter(|&k| self.kj(k, k) > 0.0)
            .map(|k| {
                let cond: f64 = self.table[k][k].iter().zip(&self.u_values).map(|(p, u)| p * u).sum();
                zeta[k] * cond / self.kj(k, k)
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThompsonCheck {
    pub hypotheses_hold: bool,
    pub bound_holds: bool,
    pub mutual_information: f64,
    /// `2η (Σ_k ζ(k) E[U|K=k,J=k] − E[U])²`.
    pub bound: f64,
}

/// Exact check of: if `K` and `J` share the marginal `ζ`, are independent,
/// and `ζ(k) ≥ η` wherever positive, then
/// `I(K; J,U) ≥ 2η (E[U | K, J=K] − E[U])²`.
pub fn check_prop_thompson(joint: &ThompsonJoint, eta: f64) -> ThompsonCheck {
    let zk = joint.marginal_k();
    let zj = joint.marginal_j();
    let same = zk.iter().zip(&zj).all(|(a, b)| (a - b).abs() <= MASS_TOL);
    let independent = mutual_information(&joint.k_vs_j()) <= MASS_TOL;
    let floor = zk.iter().all(|&z| z == 0.0 || z >= eta);
    let mi = mutual_information(&joint.k_vs_ju());
    let gap = joint.matched_mean_u() - joint.mean_u();
    let bound = 2.0 * eta * gap * gap;
    ThompsonCheck {
        hypotheses_hold: same && independent && floor,
        bound_holds: mi >= bound - ORACLE_SLACK,
        mutual_information: mi,
        bound,
    }
}

/// Result of a randomized oracle sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub instances: usize,
    /// Instances whose hypotheses held (the ones that test the bound).
    pub admissible: usize,
    pub violations: usize,
    /// Largest `bound − MI` among admissible instances.
    pub worst_gap: f64,
}

fn sparse_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, zero_prob: f64) -> Vec<f64> {
    crate::fixtures::random_distribution(rng, n, zero_prob)
}

/// Random `(joint, a★, ε, η)` for the delegation-information check. About
/// half of the draws pick `η` below the admissible maximum.
pub fn random_delegation_instance<R: Rng + ?Sized>(rng: &mut R) -> (DiscreteJoint, usize, f64, f64) {
    let n = rng.gen_range(1..=4);
    let n_actions = rng.gen_range(2..=4);
    let zeta = sparse_simplex(rng, n, 0.2);
    let table = zeta
        .iter()
        .map(|&z| {
            let zero_prob = rng.gen_range(0.0..0.7);
            sparse_simplex(rng, n_actions, zero_prob)
                .into_iter()
                .map(|p| z * p)
                .collect()
        })
        .collect();
    let j = DiscreteJoint { table };
    let a_star = rng.gen_range(0..n_actions);
    let epsilon = rng.gen_range(0.001..1.0) / n_actions as f64;
    let eta_max = max_admissible_eta(&j, a_star, epsilon);
    let eta = if eta_max > 0.0 && rng.gen_bool(0.5) {
        eta_max * rng.gen_range(0.0..=1.0)
    } else {
        rng.gen_range(0.0..1.0)
    };
    (j, a_star, epsilon, eta)
}

/// Random admissible `(K, J, U)` joint and `η`: `K, J` i.i.d. from `ζ` with
/// `min ζ ≥ η`, `U | K, J` arbitrary on up to three points of `[0,1]`.
pub fn random_thompson_instance<R: Rng + ?Sized>(rng: &mut R) -> (ThompsonJoint, f64) {
    let n = rng.gen_range(1..=3);
    let n_u = rng.gen_range(1..=3);
    let eta = rng.gen_range(0.0..1.0) / n as f64;
    let spread = sparse_simplex(rng, n, 0.0);
    let zeta: Vec<f64> = spread.iter().map(|s| eta + (1.0 - n as f64 * eta) * s).collect();
    let u_values: Vec<f64> = (0..n_u)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen(),
        })
        .collect();
    let table = (0..n)
        .map(|k| {
            (0..n)
                .map(|j| {
                    let zero_prob = rng.gen_range(0.0..0.6);
                    sparse_simplex(rng, n_u, zero_prob)
                        .into_iter()
                        .map(|p| zeta[k] * zeta[j] * p)
                        .collect()
                })
                .collect()
        })
        .collect();
    (ThompsonJoint { u_values, table }, eta)
}

const MAX_DRAWS_PER_INSTANCE: usize = 100;

/// Draws random instances until `admissible` of them satisfy the hypotheses
/// (or the draw budget runs out).
pub fn sweep_delegation_information<R: Rng + ?Sized>(rng: &mut R, admissible: usize) -> SweepSummary {
    let mut s = SweepSummary {
        worst_gap: f64::NEG_INFINITY,
        ..Default::default()
    };
    while s.admissible < admissible && s.instances < admissible.saturating_mul(MAX_DRAWS_PER_INSTANCE) {
        let (j, a_star, eps, eta) = random_delegation_instance(rng);
        let c = check_prop_delegation_information(&j, a_star, eps, eta).expect("instance respects preconditions");
        s.instances += 1;
        if c.hypothesis_holds {
            s.admissible += 1;
            s.worst_gap = s.worst_gap.max(c.bound - c.mutual_information);
            if !c.bound_holds {
                s.violations += 1;
            }
        }
    }
    s
}

pub fn sweep_thompson<R: Rng + ?Sized>(rng: &mut R, admissible: usize) -> SweepSummary {
    let mut s = SweepSummary {
        worst_gap: f64::NEG_INFINITY,
        ..Default::default()
    };
    while s.admissible < admissible && s.instances < admissible.saturating_mul(MAX_DRAWS_PER_INSTANCE) {
        let (joint, eta) = random_thompson_instance(rng);
        let c = check_prop_thompson(&joint, eta);
        s.instances += 1;
        if c.hypotheses_hold {
            s.admissible += 1;
            s.worst_gap = s.worst_gap.max(c.bound - c.mutual_information);
            if !c.bound_holds {
                s.violations += 1;
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn diag_uniform_binary() -> DiscreteJoint {
        DiscreteJoint::new(vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - LN2).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]), LN2);
        // closed form for two Bernoullis
        let (a, b): (f64, f64) = (0.3, 0.6);
        let exact = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        assert!((kl_divergence(&[a, 1.0 - a], &[b, 1.0 - b]) - exact).abs() < 1e-15);
    }

    #[test]
    fn pinsker_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let n = rng.gen_range(2..6);
            let p = sparse_simplex(&mut rng, n, 0.3);
            let q = sparse_simplex(&mut rng, n, 0.0);
            let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(kl_divergence(&p, &q) >= 2.0 * tv * tv - 1e-12);
        }
    }

    #[test]
    fn mutual_information_examples() {
        let ind = DiscreteJoint::independent(&[0.3, 0.7], &[0.1, 0.5, 0.4]).unwrap();
        assert!(mutual_information(&ind).abs() < 1e-15);
        assert!((mutual_information(&diag_uniform_binary()) - LN2).abs() < 1e-15);
    }

    #[test]
    fn joint_validation() {
        assert!(DiscreteJoint::new(vec![vec![0.5, 0.4]]).is_err());
        assert!(DiscreteJoint::new(vec![vec![0.5, 0.5], vec![0.0]]).is_err());
        assert!(DiscreteJoint::new(vec![vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn mutual_information_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (j, ..) = random_delegation_instance(&mut rng);
            let mi = mutual_information(&j);
            let mt = mutual_information(&j.transpose());
            assert!(mi >= 0.0);
            assert!((mi - mt).abs() < 1e-12);
            let hk = entropy(&j.marginal_row());
            let hx = entropy(&j.marginal_col());
            assert!(mi <= hk.min(hx) + 1e-12);
            // I = H(K) + H(X) − H(K,X)
            let flat: Vec<f64> = j.table.iter().flatten().copied().collect();
            assert!((mi - (hk + hx - entropy(&flat))).abs() < 1e-12);
        }
    }

    #[test]
    fn floor_hand_values() {
        assert!((delegation_info_floor(0.5) - 1.25f64.ln()).abs() < 1e-12);
        let hand = (1.0 + 0.1 * 0.9f64.powi(9)).ln();
        assert!((delegation_info_floor(0.1) - hand).abs() < 1e-15);
        assert!((delegation_info_floor(0.1) - 0.0380104).abs() < 1e-6);
        let small: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&e| delegation_info_floor(e)).collect();
        assert!(small[0] > small[1] && small[1] > small[2] && small[2] > 0.0);
        // ε(1−ε)^{1/ε−1} ≈ ε/e for small ε
        assert!((small[2] / (1e-4 / std::f64::consts::E) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn floor_increasing_up_to_one_half() {
        let grid: Vec<f64> = (1..=500).map(|i| i as f64 / 1000.0).collect();
        for w in grid.windows(2) {
            assert!(delegation_info_floor(w[1]) > delegation_info_floor(w[0]), "{w:?}");
        }
    }

    #[test]
    fn delegation_information_examples() {
        let c = check_prop_delegation_information(&diag_uniform_binary(), 0, 0.4, 0.5).unwrap();
        assert!(c.hypothesis_holds);
        assert!(c.bound_holds);
        assert!((c.mutual_information - LN2).abs() < 1e-15);
        assert!((c.bound - 0.5 * (1.0 + 0.4 * 0.6f64.powf(1.5)).ln()).abs() < 1e-15);

        let ind = DiscreteJoint::independent(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let c = check_prop_delegation_information(&ind, 0, 0.4, 0.5).unwrap();
        assert!(!c.hypothesis_holds);

        assert!(check_prop_delegation_information(&ind, 0, 0.5, 0.1).is_err());
        assert!(check_prop_delegation_information(&ind, 2, 0.1, 0.1).is_err());
    }

    #[test]
    fn delegation_information_sweep() {
        let s = sweep_delegation_information(&mut ChaCha8Rng::seed_from_u64(5), 10_000);
        assert_eq!(s.violations, 0, "{s:?}");
        assert_eq!(s.admissible, 10_000, "{s:?}");
    }

    #[test]
    fn thompson_examples() {
        // K, J independent uniform bits, U = [K = J]
        let mut table = vec![vec![vec![0.0; 2]; 2]; 2];
        for k in 0..2 {
            for j in 0..2 {
                table[k][j][usize::from(k == j)] = 0.25;
            }
        }
        let joint = ThompsonJoint::new(vec![0.0, 1.0], table).unwrap();
        assert!((joint.matched_mean_u() - 1.0).abs() < 1e-15);
        assert!((joint.mean_u() - 0.5).abs() < 1e-15);
        let c = check_prop_thompson(&joint, 0.5);
        assert!(c.hypotheses_hold);
        assert!((c.bound - 0.25).abs() < 1e-15);
        // K is uniform given (J, U), U reveals K exactly: I = ln 2
        assert!((c.mutual_information - LN2).abs() < 1e-15);
        assert!(c.bound_holds);

        let constant = ThompsonJoint::new(vec![0.7], vec![vec![vec![0.25]; 2]; 2]).unwrap();
        let c = check_prop_thompson(&constant, 0.5);
        assert!(c.hypotheses_hold && c.bound_holds);
        assert!(c.bound.abs() < 1e-15);
    }

    #[test]
    fn thompson_conditions_detect_dependence() {
        let table = vec![vec![vec![0.5], vec![0.0]], vec![vec![0.0], vec![0.5]]];
        let joint = ThompsonJoint::new(vec![0.5], table).unwrap();
        assert!(!check_prop_thompson(&joint, 0.1).hypotheses_hold);
        let ind = ThompsonJoint::new(vec![0.5], vec![vec![vec![0.25]; 2]; 2]).unwrap();
        assert!(!check_prop_thompson(&ind, 0.6).hypotheses_hold);
    }

    #[test]
    fn thompson_sweep() {
        let s = sweep_thompson(&mut ChaCha8Rng::seed_from_u64(6), 10_000);
        assert_eq!(s.violations, 0, "{s:?}");
        assert_eq!(s.admissible, s.instances);
    }
}
