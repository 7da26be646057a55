//! Exact likelihood-side quantities: the discounted log-likelihood in both
//! forms, its gradient, the saddle objective, policy gaps, concavity and
//! projected Bellman error. Everything here is a linear-algebra expectation;
//! nothing is sampled except the parameter pairs of the concavity probe.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{expected_visitation, occupancy_measure, FeatureMap, Mdp, TabularPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::net::{flat_norm, value_table, weighted_gradient_sum, NetFunction};
use crate::soft::{soft_bellman_optimality_operator, soft_v_of_policy, solve_soft_optimal, SoftQTable, SoftSolution};

/// Tolerance for the exact lower-level solves behind every diagnostic.
pub const ORACLE_TOL: f64 = 1e-12;

/// Relative eigenvalue cutoff of the weighted feature kernel in [`mspbe`].
pub const MSPBE_RIDGE: f64 = 1e-10;

/// Discounted state-action visitation weights `c(s, a)` of the expert data,
/// the only way demonstrations enter the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertVisitation {
    weights: Array2<f64>,
}

impl ExpertVisitation {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract(
                "visitation weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { weights })
    }

    /// Sample average of `sum_t gamma^t 1{(s_t, a_t) = (s, a)}` over trajectories.
    pub fn from_trajectories(
        trajectories: &[Trajectory],
        discount: f64,
        n_states: usize,
        n_actions: usize,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Config("demonstration set is empty".into()));
        }
        let mut weights = Array2::<f64>::zeros((n_states, n_actions));
        for traj in trajectories {
            let mut w = 1.0;
            for (s, a) in traj.steps() {
                if s >= n_states || a >= n_actions {
                    return Err(Error::Contract(format!("pair ({s}, {a}) out of range")));
                }
                weights[[s, a]] += w;
                w *= discount;
            }
        }
        weights /= trajectories.len() as f64;
        Ok(Self { weights })
    }

    /// Expected `H`-step discounted visitation of `policy`.
    pub fn exact(mdp: &Mdp, policy: &TabularPolicy, horizon: usize) -> Self {
        Self {
            weights: expected_visitation(mdp, policy, horizon),
        }
    }

    /// Infinite-horizon limit `d_pi / (1 - gamma)`.
    pub fn infinite_horizon(mdp: &Mdp, policy: &TabularPolicy) -> Result<Self> {
        let d = occupancy_measure(mdp, policy)?;
        Ok(Self {
            weights: d / (1.0 - mdp.discount()),
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// `sum c(s, a)`; `(1 - gamma^H) / (1 - gamma)` for length-`H` data.
    pub fn total_mass(&self) -> f64 {
        self.weights.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMethod {
    /// `E_D[sum_t gamma^t log pi_theta(a_t | s_t)]`.
    Direct,
    /// `E_D[sum_t gamma^t r(s_t, a_t)] - E_{mu_0}[V^soft_{pi_theta}]`.
    Reformulated,
}

/// The exactly solved lower level for one reward.
#[derive(Debug, Clone)]
pub struct LowerLevel {
    pub reward: Array2<f64>,
    pub solution: SoftSolution,
}

impl LowerLevel {
    pub fn solve(mdp: &Mdp, features: &FeatureMap, reward_net: &impl NetFunction) -> Result<Self> {
        check_features(mdp, features)?;
        let reward = value_table(reward_net, features);
        Self::from_table(mdp, reward)
    }

    pub fn from_table(mdp: &Mdp, reward: Array2<f64>) -> Result<Self> {
        let solution = solve_soft_optimal(mdp, &reward, ORACLE_TOL)?;
        Ok(Self { reward, solution })
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.solution.policy
    }

    pub fn likelihood(&self, mdp: &Mdp, visitation: &ExpertVisitation, method: LikelihoodMethod) -> Result<f64> {
        match method {
            LikelihoodMethod::Direct => Ok(direct_likelihood(visitation, self.policy())),
            LikelihoodMethod::Reformulated => saddle_value_from_table(mdp, visitation, &self.reward, self.policy()),
        }
    }

    /// `sum c grad r - (1 / (1 - gamma)) sum d_theta grad r`.
    pub fn gradient(
        &self,
        mdp: &Mdp,
        features: &FeatureMap,
        visitation: &ExpertVisitation,
        reward_net: &impl NetFunction,
    ) -> Result<Array2<f64>> {
        let d = occupancy_measure(mdp, self.policy())?;
        let weight = visitation.weights() - &(d / (1.0 - mdp.discount()));
        Ok(weighted_gradient_sum(reward_net, features, &weight))
    }
}

fn check_features(mdp: &Mdp, features: &FeatureMap) -> Result<()> {
    if !features.matches(mdp) {
        return Err(Error::Contract("feature map does not match the MDP".into()));
    }
    Ok(())
}

fn check_visitation(mdp: &Mdp, visitation: &ExpertVisitation) -> Result<()> {
    if visitation.weights().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Contract("visitation shape does not match the MDP".into()));
    }
    Ok(())
}

fn direct_likelihood(visitation: &ExpertVisitation, policy: &TabularPolicy) -> f64 {
    let mut total = 0.0;
    for ((s, a), &c) in visitation.weights().indexed_iter() {
        if c != 0.0 {
            total += c * policy.prob(s, a).ln();
        }
    }
    total
}

fn saddle_value_from_table(
    mdp: &Mdp,
    visitation: &ExpertVisitation,
    reward: &Array2<f64>,
    policy: &TabularPolicy,
) -> Result<f64> {
    check_visitation(mdp, visitation)?;
    let expert = (visitation.weights() * reward).sum();
    let v = soft_v_of_policy(mdp, reward, policy)?;
    Ok(expert - mdp.initial_dist().dot(&v.values))
}

/// Empirical discounted log-likelihood of the expert data under `pi_theta`.
pub fn empirical_likelihood(
    mdp: &Mdp,
    features: &FeatureMap,
    visitation: &ExpertVisitation,
    reward_net: &impl NetFunction,
    method: LikelihoodMethod,
) -> Result<f64> {
    check_visitation(mdp, visitation)?;
    LowerLevel::solve(mdp, features, reward_net)?.likelihood(mdp, visitation, method)
}

/// Exact likelihood gradient with respect to the reward weights.
pub fn likelihood_gradient_exact(
    mdp: &Mdp,
    features: &FeatureMap,
    visitation: &ExpertVisitation,
    reward_net: &impl NetFunction,
) -> Result<Array2<f64>> {
    check_visitation(mdp, visitation)?;
    LowerLevel::solve(mdp, features, reward_net)?.gradient(mdp, features, visitation, reward_net)
}

/// `L(theta, pi) = sum c r_theta - E_{mu_0}[V^soft_{r_theta, pi}]`.
pub fn saddle_objective(
    mdp: &Mdp,
    features: &FeatureMap,
    visitation: &ExpertVisitation,
    reward_net: &impl NetFunction,
    policy: &TabularPolicy,
) -> Result<f64> {
    check_features(mdp, features)?;
    saddle_value_from_table(mdp, visitation, &value_table(reward_net, features), policy)
}

fn check_log_inputs(p1: &TabularPolicy, p2: &TabularPolicy) -> Result<()> {
    if p1.probs().dim() != p2.probs().dim() {
        return Err(Error::Contract("policy shapes differ".into()));
    }
    for p in [p1, p2] {
        if let Some((s, a)) = p.first_zero() {
            return Err(Error::Contract(format!("log of zero probability at ({s}, {a})")));
        }
    }
    Ok(())
}

/// `max_{s,a} |log p1(a|s) - log p2(a|s)|`.
pub fn policy_log_gap(p1: &TabularPolicy, p2: &TabularPolicy) -> Result<f64> {
    check_log_inputs(p1, p2)?;
    Ok(p1
        .probs()
        .iter()
        .zip(p2.probs())
        .map(|(a, b)| (a.ln() - b.ln()).abs())
        .fold(0.0, f64::max))
}

/// `(1/|S|) sum_s KL(p(.|s) || q(.|s))`.
pub fn state_averaged_kl(p: &TabularPolicy, q: &TabularPolicy) -> Result<f64> {
    if p.probs().dim() != q.probs().dim() {
        return Err(Error::Contract("policy shapes differ".into()));
    }
    let mut total = 0.0;
    for (&a, &b) in p.probs().iter().zip(q.probs()) {
        if a > 0.0 {
            if b == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total / p.n_states() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub n_pairs: usize,
    pub radius: f64,
    pub n_positive: usize,
    pub max_violation: f64,
    /// Median of the strictly positive violations, 0 if there are none.
    pub median_positive_violation: f64,
    pub mean_positive_part: f64,
}

/// Probe `L(theta', pi) - L(theta, pi) - grad_theta L(theta, pi)^T (theta' - theta)`
/// at `n_pairs` random pairs drawn uniformly from the ball of `radius`
/// around the current reward weights, with `pi` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn concavity_diagnostic<N: NetFunction>(
    mdp: &Mdp,
    features: &FeatureMap,
    visitation: &ExpertVisitation,
    reward_net: &N,
    policy: &TabularPolicy,
    n_pairs: usize,
    radius: f64,
    rng: &mut impl rand::Rng,
) -> Result<ConcavityReport> {
    if n_pairs == 0 {
        return Err(Error::Config("concavity probe needs at least one pair".into()));
    }
    check_features(mdp, features)?;
    // L(., pi) is affine in the reward table with these weights
    let occupancy = occupancy_measure(mdp, policy)?;
    let weight = visitation.weights() - &(occupancy / (1.0 - mdp.discount()));
    let centre = reward_net.weights();
    let mut violations = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let theta = sample_in_ball(centre, radius, rng);
        let theta_prime = sample_in_ball(centre, radius, rng);
        let at = reward_net.with_weights(theta.clone());
        let at_prime = reward_net.with_weights(theta_prime.clone());
        let l = saddle_value_from_table(mdp, visitation, &value_table(&at, features), policy)?;
        let l_prime = saddle_value_from_table(mdp, visitation, &value_table(&at_prime, features), policy)?;
        let grad = weighted_gradient_sum(&at, features, &weight);
        let linear = (&grad * &(&theta_prime - &theta)).sum();
        violations.push(l_prime - l - linear);
    }
    let mut positive: Vec<f64> = violations.iter().copied().filter(|&v| v > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    let median = match positive.len() {
        0 => 0.0,
        n if n % 2 == 1 => positive[n / 2],
        n => 0.5 * (positive[n / 2 - 1] + positive[n / 2]),
    };
    Ok(ConcavityReport {
        n_pairs,
        radius,
        n_positive: positive.len(),
        max_violation: violations.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_positive_violation: median,
        mean_positive_part: positive.iter().sum::<f64>() / n_pairs as f64,
    })
}

fn sample_in_ball(centre: &Array2<f64>, radius: f64, rng: &mut impl rand::Rng) -> Array2<f64> {
    let dir = Array2::<f64>::from_shape_simple_fn(centre.raw_dim(), || StandardNormal.sample(rng));
    let r = radius * rng.random::<f64>().powf(1.0 / dir.len() as f64);
    centre + &(&dir * (r / flat_norm(&dir)))
}

/// Smallest `|D|` with `|D| >= 2 ln(2/delta) / (eps^2 m^2 (1 - gamma)^2)`.
pub fn hoeffding_sample_bound(epsilon: f64, delta: f64, width: usize, discount: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Contract(format!(
            "epsilon {epsilon} and delta {delta} must lie in (0, 1)"
        )));
    }
    if width == 0 || !(discount > 0.0 && discount < 1.0) {
        return Err(Error::Contract("width must be positive and discount in (0, 1)".into()));
    }
    let m = width as f64;
    let raw = 2.0 * (2.0 / delta).ln() / (epsilon * epsilon * m * m * (1.0 - discount).powi(2));
    Ok((raw.ceil() as u64).max(1))
}

/// Mean squared projected Bellman error of `q_net` under `distribution`,
/// projecting onto the linear class anchored at `q_net`'s initialization.
pub fn mspbe<N: NetFunction>(
    mdp: &Mdp,
    features: &FeatureMap,
    distribution: &Array2<f64>,
    q_net: &N,
    reward_net: &impl NetFunction,
) -> Result<f64> {
    check_features(mdp, features)?;
    mspbe_with_reward(mdp, features, distribution, q_net, &value_table(reward_net, features))
}

/// [`mspbe`] with the reward given as a table.
pub fn mspbe_with_reward<N: NetFunction>(
    mdp: &Mdp,
    features: &FeatureMap,
    distribution: &Array2<f64>,
    q_net: &N,
    reward: &Array2<f64>,
) -> Result<f64> {
    if distribution.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Contract("distribution shape does not match the MDP".into()));
    }
    if distribution.iter().any(|&p| p < 0.0) || (distribution.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("distribution must be a probability vector".into()));
    }
    let q = SoftQTable::new(value_table(q_net, features))?;
    let tq = soft_bellman_optimality_operator(mdp, reward, &q)?;
    let n = features.n_pairs();
    let m = q_net.width() as f64;
    let sqrt_mu: Vec<f64> = distribution.iter().map(|p| p.sqrt()).collect();

    // Gram of the anchored features: <Phi_i, Phi_k> = (x_i . x_k) |active_i & active_k| / m^2
    let x = features.table();
    let active = x
        .dot(&q_net.anchor_weights().t())
        .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let overlap = active.dot(&active.t());
    let inner = x.dot(&x.t());
    let kernel = DMatrix::from_fn(n, n, |i, k| {
        sqrt_mu[i] * sqrt_mu[k] * overlap[[i, k]] * inner[[i, k]] / (m * m)
    });

    let eig = SymmetricEigen::new(kernel);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = MSPBE_RIDGE * top.max(f64::MIN_POSITIVE);
    let dropped = eig.eigenvalues.iter().filter(|&&l| l > 0.0 && l <= cutoff).count();
    if dropped > 0 {
        log::debug!("feature kernel is near-singular: {dropped} eigenvalues below ridge {cutoff:e} treated as zero");
    }
    let target = nalgebra::DVector::from_iterator(n, tq.values.iter().zip(&sqrt_mu).map(|(t, s)| t * s));
    let mut projected = nalgebra::DVector::zeros(n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(i);
            projected += v * v.dot(&target);
        }
    }
    Ok(q.values
        .iter()
        .zip(&sqrt_mu)
        .zip(projected.iter())
        .map(|((q, s), p)| (s * q - p).powi(2))
        .sum())
}
