use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{random_unit_vector, FeatureMap, Mdp, TabularPolicy, Trajectory};
use crate::error::{Error, Result};

fn check_shapes(mdp: &Mdp, policy: &TabularPolicy) -> Result<()> {
    if !policy.matches(mdp) {
        return Err(Error::Contract(format!(
            "policy shape ({}, {}) does not match MDP ({}, {})",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// State-to-state kernel `P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)`.
pub fn state_chain(mdp: &Mdp, policy: &TabularPolicy) -> Array2<f64> {
    let n = mdp.n_states();
    let mut chain = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            chain.row_mut(s).scaled_add(p, &mdp.next_state_dist(s, a));
        }
    }
    chain
}

/// Communicating classes of a chain, split into closed classes and the
/// remaining transient states.
fn communicating_classes(chain: &Array2<f64>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = chain.nrows();
    let mut reach = vec![vec![false; n]; n];
    for (start, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![start];
        row[start] = true;
        while let Some(s) = stack.pop() {
            for t in 0..n {
                if chain[[s, t]] > 0.0 && !row[t] {
                    row[t] = true;
                    stack.push(t);
                }
            }
        }
    }
    let mut assigned = vec![false; n];
    let mut closed = Vec::new();
    let mut transient = Vec::new();
    for s in 0..n {
        if assigned[s] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&t| reach[s][t] && reach[t][s]).collect();
        class.iter().for_each(|&t| assigned[t] = true);
        let is_closed = class
            .iter()
            .all(|&u| (0..n).all(|t| !reach[u][t] || class.contains(&t)));
        if is_closed {
            closed.push(class);
        } else {
            transient.extend(class);
        }
    }
    transient.sort_unstable();
    (closed, transient)
}

/// Stationary state-action distribution `mu(s, a) = mu(s) pi(a|s)` of the
/// chain induced by `policy`, by direct linear solve of `mu (I - P_pi) = 0`
/// with the normalization replacing one equation.
pub fn stationary_distribution(mdp: &Mdp, policy: &TabularPolicy) -> Result<Array2<f64>> {
    check_shapes(mdp, policy)?;
    let chain = state_chain(mdp, policy);
    let n = chain.nrows();
    let (closed, transient) = communicating_classes(&chain);
    if closed.len() != 1 || !transient.is_empty() {
        return Err(Error::Reducible {
            closed_classes: closed,
            transient,
        });
    }
    // (I - P)^T mu = 0, last row replaced by 1^T mu = 1
    let mut a = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - chain[[j, i]]
    });
    let mut b = DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let mu = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular stationary system".into()))?;
    let mut state: Array1<f64> = mu.iter().map(|v| v.max(0.0)).collect();
    let total = state.sum();
    state.mapv_inplace(|v| v / total);
    Ok(joint(&state, policy))
}

fn joint(state: &Array1<f64>, policy: &TabularPolicy) -> Array2<f64> {
    let mut out = policy.probs().clone();
    for (s, mut row) in out.outer_iter_mut().enumerate() {
        row.mapv_inplace(|p| p * state[s]);
    }
    out
}

/// Normalized discounted occupancy `d(s, a; pi) = (1 - gamma) pi(a|s) sum_t gamma^t P(s_t = s)`,
/// from `(I - gamma P_pi)^T rho = (1 - gamma) mu_0`.
pub fn occupancy_measure(mdp: &Mdp, policy: &TabularPolicy) -> Result<Array2<f64>> {
    check_shapes(mdp, policy)?;
    let chain = state_chain(mdp, policy);
    let n = chain.nrows();
    let gamma = mdp.discount();
    let a = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - gamma * chain[[j, i]]
    });
    let b = DVector::<f64>::from_iterator(n, mdp.initial_dist().iter().map(|p| (1.0 - gamma) * p));
    let rho = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular occupancy system".into()))?;
    let state: Array1<f64> = rho.iter().map(|v| v.max(0.0)).collect();
    Ok(joint(&state, policy))
}

/// Exact state distribution after `t` steps from `mu_0`.
pub fn state_distribution_at(mdp: &Mdp, policy: &TabularPolicy, t: usize) -> Array1<f64> {
    let chain = state_chain(mdp, policy);
    let mut dist = mdp.initial_dist().clone();
    for _ in 0..t {
        dist = dist.dot(&chain);
    }
    dist
}

/// Exact finite-horizon discounted visitation `sum_{t<H} gamma^t P(s_t = s, a_t = a)`.
pub fn expected_visitation(mdp: &Mdp, policy: &TabularPolicy, horizon: usize) -> Array2<f64> {
    let chain = state_chain(mdp, policy);
    let gamma = mdp.discount();
    let mut dist = mdp.initial_dist().clone();
    let mut acc = Array1::<f64>::zeros(mdp.n_states());
    let mut weight = 1.0;
    for _ in 0..horizon {
        acc.scaled_add(weight, &dist);
        dist = dist.dot(&chain);
        weight *= gamma;
    }
    joint(&acc, policy)
}

/// Inverse-CDF draw from a finite distribution.
pub fn sample_categorical<I>(probs: I, rng: &mut impl rand::Rng) -> usize
where
    I: IntoIterator<Item = f64>,
{
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

/// `s_0 ~ mu_0`, `a_t ~ pi(.|s_t)`, `s_{t+1} ~ P(.|s_t, a_t)` for exactly `horizon` steps.
pub fn sample_trajectory(
    mdp: &Mdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng: &mut impl rand::Rng,
) -> Result<Trajectory> {
    check_shapes(mdp, policy)?;
    if horizon == 0 {
        return Err(Error::Contract("trajectory horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = sample_categorical(mdp.initial_dist().iter().copied(), rng);
    for t in 0..horizon {
        let a = sample_categorical(policy.row(s).iter().copied(), rng);
        states.push(s);
        actions.push(a);
        if t + 1 < horizon {
            s = sample_categorical(mdp.next_state_dist(s, a).iter().copied(), rng);
        }
    }
    Ok(Trajectory { states, actions })
}

/// Smallest `H >= 1` with `gamma^H / (1 - gamma) <= tail_tol`.
pub fn horizon_for_tail(discount: f64, tail_tol: f64) -> usize {
    assert!(discount > 0.0 && discount < 1.0 && tail_tol > 0.0);
    let mut h = 1usize;
    let mut tail = discount / (1.0 - discount);
    while tail > tail_tol {
        h += 1;
        tail *= discount;
    }
    h
}

/// Mixing audit of the induced state chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Second-largest eigenvalue modulus.
    pub slem: f64,
    pub spectral_gap: f64,
}

pub fn spectral_report(mdp: &Mdp, policy: &TabularPolicy) -> Result<SpectralReport> {
    check_shapes(mdp, policy)?;
    let chain = state_chain(mdp, policy);
    let n = chain.nrows();
    if n == 1 {
        return Ok(SpectralReport {
            slem: 0.0,
            spectral_gap: 1.0,
        });
    }
    let m = DMatrix::<f64>::from_fn(n, n, |i, j| chain[[i, j]]);
    let mut moduli: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let slem = moduli[1];
    Ok(SpectralReport {
        slem,
        spectral_gap: 1.0 - slem,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMarginReport {
    pub directions: usize,
    /// min over directions w and states s of max_a |w^T psi(s, a)|
    pub min_state_margin: f64,
    /// min over directions w and pairs (s, a) of |w^T psi(s, a)|
    pub min_pair_margin: f64,
}

/// Empirical margin of the embedding against random unit directions.
pub fn feature_margin_report(
    features: &FeatureMap,
    directions: usize,
    rng: &mut impl rand::Rng,
) -> FeatureMarginReport {
    let mut min_state = f64::INFINITY;
    let mut min_pair = f64::INFINITY;
    for _ in 0..directions {
        let w = random_unit_vector(features.dim(), rng);
        for s in 0..features.n_states() {
            let mut best = 0.0f64;
            for a in 0..features.n_actions() {
                let v = w.dot(&features.get(s, a)).abs();
                best = best.max(v);
                min_pair = min_pair.min(v);
            }
            min_state = min_state.min(best);
        }
    }
    FeatureMarginReport {
        directions,
        min_state_margin: min_state,
        min_pair_margin: min_pair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_gridworld, build_random_mdp, GridworldSpec, RandomMdpSpec};
    use crate::rng::rng_from_seed;
    use ndarray::{array, Array3};

    fn coin_flip_mdp() -> Mdp {
        let transition = Array3::from_elem((2, 2, 2), 0.5);
        Mdp::new(transition, array![0.5, 0.5], 0.9, Array2::zeros((2, 2))).unwrap()
    }

    fn single_state_mdp(n_actions: usize, gamma: f64) -> Mdp {
        Mdp::new(
            Array3::from_elem((1, n_actions, 1), 1.0),
            array![1.0],
            gamma,
            Array2::zeros((1, n_actions)),
        )
        .unwrap()
    }

    /// Stationary vector of the state-action chain by plain power iteration.
    fn power_iteration_oracle(mdp: &Mdp, policy: &TabularPolicy) -> Array1<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let n = ns * na;
        let mut m = Array2::<f64>::zeros((n, n));
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    for a2 in 0..na {
                        m[[s * na + a, s2 * na + a2]] = mdp.transition()[[s, a, s2]] * policy.prob(s2, a2);
                    }
                }
            }
        }
        let mut v = Array1::from_elem(n, 1.0 / n as f64);
        for _ in 0..10_000 {
            v = v.dot(&m);
        }
        v
    }

    #[test]
    fn coin_flip_stationary_is_uniform() {
        let mdp = coin_flip_mdp();
        let mu = stationary_distribution(&mdp, &TabularPolicy::uniform(2, 2)).unwrap();
        for v in mu.iter() {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn single_state_stationary_is_policy() {
        let mdp = single_state_mdp(3, 0.9);
        let pi = TabularPolicy::new(array![[0.2, 0.3, 0.5]]).unwrap();
        let mu = stationary_distribution(&mdp, &pi).unwrap();
        assert_eq!(mu, *pi.probs());
        let d = occupancy_measure(&mdp, &pi).unwrap();
        for (x, y) in d.iter().zip(pi.probs().iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(5, 3, 4, 1.0, 11)).unwrap();
        let pi = TabularPolicy::uniform(5, 3);
        let mu = stationary_distribution(&mdp, &pi).unwrap();
        let oracle = power_iteration_oracle(&mdp, &pi);
        for (x, y) in mu.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn stationary_is_unique_on_dirichlet_instance() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(10, 4, 16, 0.5, 9)).unwrap();
        let pi = TabularPolicy::uniform(10, 4);
        let chain = state_chain(&mdp, &pi);
        let (closed, transient) = communicating_classes(&chain);
        assert_eq!(closed.len(), 1);
        assert!(transient.is_empty());
        // eigenvalue 1 is simple
        let report = spectral_report(&mdp, &pi).unwrap();
        assert!(report.slem < 1.0 - 1e-6);
        let mu = stationary_distribution(&mdp, &pi).unwrap();
        let oracle = power_iteration_oracle(&mdp, &pi);
        for (x, y) in mu.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_chain_names_classes() {
        // two absorbing states
        let mut t = Array3::<f64>::zeros((3, 1, 3));
        t[[0, 0, 0]] = 1.0;
        t[[1, 0, 1]] = 1.0;
        t[[2, 0, 0]] = 0.5;
        t[[2, 0, 1]] = 0.5;
        let mdp = Mdp::new(t, array![0.0, 0.0, 1.0], 0.9, Array2::zeros((3, 1))).unwrap();
        match stationary_distribution(&mdp, &TabularPolicy::uniform(3, 1)) {
            Err(Error::Reducible {
                closed_classes,
                transient,
            }) => {
                assert_eq!(closed_classes, vec![vec![0], vec![1]]);
                assert_eq!(transient, vec![2]);
            }
            other => panic!("expected reducible error, got {other:?}"),
        }
    }

    #[test]
    fn occupancy_in_small_discount_limit() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(4, 2, 4, 1.0, 5).with_discount(1e-9)).unwrap();
        let pi = TabularPolicy::uniform(4, 2);
        let d = occupancy_measure(&mdp, &pi).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                let expect = mdp.initial_dist()[s] * 0.5;
                assert!((d[[s, a]] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn occupancy_matches_partial_sums() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(6, 3, 4, 1.0, 2)).unwrap();
        let pi = TabularPolicy::uniform(6, 3);
        let d = occupancy_measure(&mdp, &pi).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-10);
        let gamma = mdp.discount();
        for horizon in [1usize, 5, 20, 80] {
            let partial = expected_visitation(&mdp, &pi, horizon) * (1.0 - gamma);
            let tail = gamma.powi(horizon as i32);
            let gap = &d - &partial;
            assert!(gap.iter().all(|&g| g >= -1e-12));
            assert!((gap.sum() - tail).abs() < 1e-10, "tail mismatch at T={horizon}");
        }
    }

    #[test]
    fn occupancy_matches_monte_carlo_on_two_cell_grid() {
        let spec = GridworldSpec {
            rows: 1,
            cols: 2,
            slip_prob: 0.0,
            discount: 0.9,
            dim: 4,
            goal_reward: 1.0,
            seed: 7,
        };
        let (mdp, _) = build_gridworld(&spec).unwrap();
        // always "right"
        let pi = TabularPolicy::new(array![[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let d = occupancy_measure(&mdp, &pi).unwrap();
        // geometric stopping time T ~ Geom(1 - gamma); d is the law of s_T
        let mut rng = rng_from_seed(99);
        let n = 1_000_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            let mut s = sample_categorical(mdp.initial_dist().iter().copied(), &mut rng);
            loop {
                let stop: f64 = rand::Rng::random(&mut rng);
                if stop < 1.0 - mdp.discount() {
                    break;
                }
                s = sample_categorical(mdp.next_state_dist(s, 1).iter().copied(), &mut rng);
            }
            counts[s] += 1;
        }
        for s in 0..2 {
            let mc = counts[s] as f64 / n as f64;
            assert!((d[[s, 1]] - mc).abs() < 1e-3, "state {s}: {} vs {mc}", d[[s, 1]]);
        }
    }

    #[test]
    fn deterministic_rollout_ignores_rng() {
        let spec = GridworldSpec {
            rows: 1,
            cols: 2,
            slip_prob: 0.0,
            discount: 0.9,
            dim: 4,
            goal_reward: 1.0,
            seed: 7,
        };
        let (mut mdp, _) = build_gridworld(&spec).unwrap();
        mdp = Mdp::new(
            mdp.transition().clone(),
            array![1.0, 0.0],
            0.9,
            mdp.true_reward().clone(),
        )
        .unwrap();
        let pi = TabularPolicy::new(array![[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let a = sample_trajectory(&mdp, &pi, 6, &mut rng_from_seed(1)).unwrap();
        let b = sample_trajectory(&mdp, &pi, 6, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states, vec![0, 1, 0, 1, 0, 1]);
        let one = sample_trajectory(&mdp, &pi, 1, &mut rng_from_seed(3)).unwrap();
        assert_eq!(one.horizon(), 1);
    }

    #[test]
    fn one_step_visits_match_exact_distribution() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(5, 3, 4, 1.0, 8)).unwrap();
        let pi = TabularPolicy::uniform(5, 3);
        let exact = state_distribution_at(&mdp, &pi, 1);
        let mut rng = rng_from_seed(4);
        let n = 100_000;
        let mut counts = Array1::<f64>::zeros(5);
        for _ in 0..n {
            let tr = sample_trajectory(&mdp, &pi, 2, &mut rng).unwrap();
            counts[tr.states[1]] += 1.0;
        }
        let tv: f64 = 0.5 * (counts / n as f64 - &exact).mapv(f64::abs).sum();
        assert!(tv < 1e-2, "total variation {tv}");
    }

    #[test]
    fn horizon_rule() {
        let h = horizon_for_tail(0.9, 1e-3);
        assert!(0.9f64.powi(h as i32) / 0.1 <= 1e-3);
        assert!(0.9f64.powi(h as i32 - 1) / 0.1 > 1e-3);
        assert_eq!(h, 88);
    }

    #[test]
    fn margin_report_is_bounded() {
        let (_, psi) = build_random_mdp(&RandomMdpSpec::new(4, 2, 8, 1.0, 1)).unwrap();
        let r = feature_margin_report(&psi, 50, &mut rng_from_seed(0));
        assert!(r.min_pair_margin <= r.min_state_margin);
        assert!(r.min_state_margin <= 1.0);
    }
}
