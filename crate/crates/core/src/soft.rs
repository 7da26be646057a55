//! Exact entropy-regularized RL on tabular MDPs (temperature 1).
//!
//! These routines are the ground truth every learned quantity is measured
//! against: the soft Bellman optimality operator, its fixed point by value
//! iteration, exact soft policy evaluation by linear solve, and soft policy
//! iteration.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::env::{state_chain, Mdp, TabularPolicy};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftQTable {
    pub values: Array2<f64>,
}

impl SoftQTable {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("soft Q table has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            values: Array2::zeros((n_states, n_actions)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn max_abs_diff(&self, other: &SoftQTable) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftVTable {
    pub values: Array1<f64>,
}

/// Stable `log sum_i exp(x_i)`.
pub fn logsumexp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `V(s) = log sum_a exp Q(s, a)`.
pub fn logsumexp_value(q: &SoftQTable) -> SoftVTable {
    SoftVTable {
        values: q.values.map_axis(Axis(1), logsumexp),
    }
}

/// `pi(a|s) = exp(Q(s, a) - V(s))`.
pub fn boltzmann_policy(q: &SoftQTable) -> TabularPolicy {
    boltzmann_from_values(&q.values)
}

pub(crate) fn boltzmann_from_values(values: &Array2<f64>) -> TabularPolicy {
    let mut probs = values.clone();
    for mut row in probs.outer_iter_mut() {
        let v = logsumexp(row.view());
        row.mapv_inplace(|q| (q - v).exp());
        // exp(Q - V) sums to 1 up to rounding; fold the residue back in
        let total = row.sum();
        row.mapv_inplace(|p| p / total);
    }
    TabularPolicy::new(probs).expect("Boltzmann rows are stochastic")
}

/// `H(pi(.|s)) = -sum_a pi(a|s) log pi(a|s)`, with `0 log 0 = 0`.
pub fn entropy(policy: &TabularPolicy, state: usize) -> f64 {
    row_entropy(policy.row(state))
}

fn row_entropy(row: ArrayView1<'_, f64>) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn check_reward(mdp: &Mdp, reward: &Array2<f64>) -> Result<()> {
    if reward.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Contract(format!(
            "reward shape {:?} does not match MDP ({}, {})",
            reward.dim(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `(TQ)(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) log sum_a' exp Q(s', a')`.
pub fn soft_bellman_optimality_operator(mdp: &Mdp, reward: &Array2<f64>, q: &SoftQTable) -> Result<SoftQTable> {
    check_reward(mdp, reward)?;
    if q.values.dim() != reward.dim() {
        return Err(Error::Contract("Q table shape does not match MDP".into()));
    }
    Ok(SoftQTable {
        values: apply_operator(mdp, reward, &logsumexp_value(q).values),
    })
}

fn apply_operator(mdp: &Mdp, reward: &Array2<f64>, next_value: &Array1<f64>) -> Array2<f64> {
    let gamma = mdp.discount();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let flat = mdp
        .transition()
        .view()
        .into_shape_with_order((ns * na, ns))
        .expect("transition tensor is contiguous");
    let expected = flat
        .dot(next_value)
        .into_shape_with_order((ns, na))
        .expect("shape preserved");
    reward + &(expected * gamma)
}

#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q: SoftQTable,
    pub v: SoftVTable,
    pub policy: TabularPolicy,
    pub iterations: usize,
    /// Final `||TQ - Q||_inf`.
    pub residual: f64,
}

/// Soft value iteration until `||TQ - Q||_inf <= tol (1 - gamma) / gamma`,
/// which bounds the distance to the fixed point by `tol`.
pub fn solve_soft_optimal(mdp: &Mdp, reward: &Array2<f64>, tol: f64) -> Result<SoftSolution> {
    solve_soft_optimal_from(mdp, reward, tol, None, DEFAULT_MAX_ITERATIONS)
}

/// As [`solve_soft_optimal`], optionally warm-started and with an explicit iteration cap.
pub fn solve_soft_optimal_from(
    mdp: &Mdp,
    reward: &Array2<f64>,
    tol: f64,
    init: Option<&SoftQTable>,
    max_iterations: usize,
) -> Result<SoftSolution> {
    check_reward(mdp, reward)?;
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance {tol} must be positive")));
    }
    let gamma = mdp.discount();
    let threshold = tol * (1.0 - gamma) / gamma;
    let mut q = match init {
        Some(q0) if q0.values.dim() == reward.dim() => q0.values.clone(),
        _ => reward.clone(),
    };
    let mut residual = f64::INFINITY;
    for it in 1..=max_iterations {
        let v = q.map_axis(Axis(1), logsumexp);
        let next = apply_operator(mdp, reward, &v);
        residual = next.iter().zip(q.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if residual <= threshold {
            let q = SoftQTable::new(q)?;
            let v = logsumexp_value(&q);
            let policy = boltzmann_policy(&q);
            return Ok(SoftSolution {
                q,
                v,
                policy,
                iterations: it,
                residual,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::Convergence {
        iterations: max_iterations,
        residual,
    })
}

fn check_positive(policy: &TabularPolicy) -> Result<()> {
    match policy.first_zero() {
        Some((state, action)) => Err(Error::EntropyUndefined { state, action }),
        None => Ok(()),
    }
}

/// Exact `V^soft_{r, pi}` from `(I - gamma P_pi) V = r_pi + H(pi)`.
pub fn soft_v_of_policy(mdp: &Mdp, reward: &Array2<f64>, policy: &TabularPolicy) -> Result<SoftVTable> {
    check_reward(mdp, reward)?;
    if !policy.matches(mdp) {
        return Err(Error::Contract("policy shape does not match MDP".into()));
    }
    check_positive(policy)?;
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let chain = state_chain(mdp, policy);
    let a = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - gamma * chain[[i, j]]
    });
    let b = DVector::<f64>::from_fn(n, |s, _| policy.row(s).dot(&reward.row(s)) + row_entropy(policy.row(s)));
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular policy evaluation system".into()))?;
    Ok(SoftVTable {
        values: v.iter().copied().collect(),
    })
}

/// Exact `Q^soft_{r, pi}(s, a) = r(s, a) + gamma E[V^soft_{r, pi}(s')]`.
pub fn soft_q_of_policy(mdp: &Mdp, reward: &Array2<f64>, policy: &TabularPolicy) -> Result<SoftQTable> {
    let v = soft_v_of_policy(mdp, reward, policy)?;
    SoftQTable::new(apply_operator(mdp, reward, &v.values))
}

/// `E_{s0 ~ mu0}[V^soft_{r, pi}(s0)]`.
pub fn entropy_regularized_return(mdp: &Mdp, reward: &Array2<f64>, policy: &TabularPolicy) -> Result<f64> {
    let v = soft_v_of_policy(mdp, reward, policy)?;
    Ok(mdp.initial_dist().dot(&v.values))
}

/// One round of soft policy iteration: Boltzmann policy of the exact soft Q of `policy`.
pub fn soft_policy_iteration_step(mdp: &Mdp, reward: &Array2<f64>, policy: &TabularPolicy) -> Result<TabularPolicy> {
    Ok(boltzmann_policy(&soft_q_of_policy(mdp, reward, policy)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_random_mdp, RandomMdpSpec};
    use crate::rng::rng_from_seed;
    use ndarray::{array, Array3};
    use rand::Rng;

    fn single_state(n_actions: usize, gamma: f64, r: f64) -> Mdp {
        Mdp::new(
            Array3::from_elem((1, n_actions, 1), 1.0),
            array![1.0],
            gamma,
            Array2::from_elem((1, n_actions), r),
        )
        .unwrap()
    }

    fn q(values: Array2<f64>) -> SoftQTable {
        SoftQTable::new(values).unwrap()
    }

    #[test]
    fn logsumexp_closed_forms() {
        let v = logsumexp_value(&q(array![[0.0, 0.0], [1.0, 1.0], [0.0, 3f64.ln()]]));
        assert!((v.values[0] - 2f64.ln()).abs() < 1e-15);
        assert!((v.values[1] - 2.0f64.ln() - 1.0).abs() < 1e-15);
        assert!((v.values[2] - 4f64.ln()).abs() < 1e-15);
        let v3 = logsumexp_value(&q(array![[1.0, 1.0, 1.0]]));
        assert!((v3.values[0] - (1.0 + 3f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_survives_large_values() {
        let v = logsumexp_value(&q(array![[1000.0, 1000.0]]));
        assert!((v.values[0] - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn boltzmann_closed_forms() {
        let p = boltzmann_policy(&q(array![[0.0, 0.0], [3f64.ln(), 0.0]]));
        assert!((p.prob(0, 0) - 0.5).abs() < 1e-15);
        assert!((p.prob(1, 0) - 0.75).abs() < 1e-15);
        assert!((p.prob(1, 1) - 0.25).abs() < 1e-15);
        let c = 1.7;
        let a = boltzmann_policy(&q(array![[5.0, 5.0 + c, 5.0]]));
        let b = boltzmann_policy(&q(array![[0.0, c, 0.0]]));
        for (x, y) in a.probs().iter().zip(b.probs().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_closed_forms() {
        let mdp = single_state(1, 0.9, 1.0);
        let t = soft_bellman_optimality_operator(&mdp, mdp.true_reward(), &SoftQTable::zeros(1, 1)).unwrap();
        assert!((t.values[[0, 0]] - 1.0).abs() < 1e-15);

        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(3, 2, 4, 1.0, 0)).unwrap();
        let zero = Array2::zeros((3, 2));
        let t = soft_bellman_optimality_operator(&mdp, &zero, &SoftQTable::zeros(3, 2)).unwrap();
        for v in t.values.iter() {
            assert!((v - 0.9 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_is_shift_covariant() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(4, 3, 4, 1.0, 2)).unwrap();
        let mut rng = rng_from_seed(1);
        let base = q(Array2::from_shape_fn((4, 3), |_| rng.random_range(-3.0..3.0)));
        let c = 2.5;
        let shifted = q(&base.values + c);
        let t1 = soft_bellman_optimality_operator(&mdp, mdp.true_reward(), &base).unwrap();
        let t2 = soft_bellman_optimality_operator(&mdp, mdp.true_reward(), &shifted).unwrap();
        for (a, b) in t1.values.iter().zip(t2.values.iter()) {
            assert!((b - a - 0.9 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_fixed_points() {
        let sol = solve_soft_optimal(&single_state(1, 0.9, 1.0), &array![[1.0]], 1e-10).unwrap();
        assert!((sol.q.values[[0, 0]] - 10.0).abs() < 1e-9);

        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(3, 2, 4, 1.0, 0)).unwrap();
        let sol = solve_soft_optimal(&mdp, &Array2::zeros((3, 2)), 1e-10).unwrap();
        let expect_q = 0.9 * 2f64.ln() / 0.1;
        for v in sol.q.values.iter() {
            assert!((v - expect_q).abs() < 1e-9);
        }
        for v in sol.v.values.iter() {
            assert!((v - 2f64.ln() / 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(3, 2, 4, 1.0, 0)).unwrap();
        match solve_soft_optimal_from(&mdp, mdp.true_reward(), 1e-12, None, 3) {
            Err(Error::Convergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn optimal_policy_beats_random_policies() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(3, 3, 4, 1.0, 4)).unwrap();
        let r = mdp.true_reward();
        let sol = solve_soft_optimal(&mdp, r, 1e-10).unwrap();
        let best = entropy_regularized_return(&mdp, r, &sol.policy).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..10_000 {
            let raw = Array2::from_shape_fn((3, 3), |_| rng.random_range(1e-3..1.0f64));
            let sums = raw.sum_axis(Axis(1));
            let probs = Array2::from_shape_fn((3, 3), |(s, a)| raw[[s, a]] / sums[s]);
            let Ok(pi) = TabularPolicy::new(probs) else { continue };
            let ret = entropy_regularized_return(&mdp, r, &pi).unwrap();
            assert!(ret <= best + 1e-10);
        }
    }

    #[test]
    fn policy_evaluation_closed_forms() {
        let mdp = single_state(1, 0.9, 2.0);
        let qv = soft_q_of_policy(&mdp, mdp.true_reward(), &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((qv.values[[0, 0]] - 20.0).abs() < 1e-12);

        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(4, 2, 4, 1.0, 6)).unwrap();
        let qv = soft_q_of_policy(&mdp, &Array2::zeros((4, 2)), &TabularPolicy::uniform(4, 2)).unwrap();
        for v in qv.values.iter() {
            assert!((v - 0.9 * 2f64.ln() / 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn near_deterministic_policy_has_vanishing_entropy_bonus() {
        let mdp = Mdp::new(Array3::from_elem((1, 2, 1), 1.0), array![1.0], 0.9, array![[3.0, 3.0]]).unwrap();
        let eps = 1e-12;
        let pi = TabularPolicy::new(array![[1.0 - eps, eps]]).unwrap();
        let qv = soft_q_of_policy(&mdp, mdp.true_reward(), &pi).unwrap();
        assert!((qv.values[[0, 0]] - 30.0).abs() < 1e-8);
    }

    #[test]
    fn evaluation_of_optimal_policy_recovers_optimal_q() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(5, 3, 4, 1.0, 7)).unwrap();
        let tol = 1e-10;
        let sol = solve_soft_optimal(&mdp, mdp.true_reward(), tol).unwrap();
        let qv = soft_q_of_policy(&mdp, mdp.true_reward(), &sol.policy).unwrap();
        assert!(qv.max_abs_diff(&sol.q) <= 10.0 * tol);
    }

    #[test]
    fn zero_probability_action_is_rejected() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(2, 2, 4, 1.0, 7)).unwrap();
        let pi = TabularPolicy::new(array![[1.0, 0.0], [0.5, 0.5]]).unwrap();
        assert!(matches!(
            soft_q_of_policy(&mdp, mdp.true_reward(), &pi),
            Err(Error::EntropyUndefined { state: 0, action: 1 })
        ));
    }

    #[test]
    fn policy_iteration_fixed_point_and_convergence() {
        let (mdp, _) = build_random_mdp(&RandomMdpSpec::new(4, 3, 4, 1.0, 8)).unwrap();
        let r = mdp.true_reward();
        let sol = solve_soft_optimal(&mdp, r, 1e-12).unwrap();
        let again = soft_policy_iteration_step(&mdp, r, &sol.policy).unwrap();
        for (a, b) in again.probs().iter().zip(sol.policy.probs().iter()) {
            assert!((a - b).abs() < 1e-10);
        }

        let mut pi = TabularPolicy::uniform(4, 3);
        for _ in 0..20 {
            let before = soft_v_of_policy(&mdp, r, &pi).unwrap();
            pi = soft_policy_iteration_step(&mdp, r, &pi).unwrap();
            let after = soft_v_of_policy(&mdp, r, &pi).unwrap();
            for (b, a) in before.values.iter().zip(after.values.iter()) {
                assert!(a >= &(b - 1e-10));
            }
        }
        for (a, b) in pi.probs().iter().zip(sol.policy.probs().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn entropy_values() {
        let p = TabularPolicy::new(array![[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]).unwrap();
        assert!((entropy(&p, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((entropy(&p, 1) - 4f64.ln()).abs() < 1e-15);
        let d = TabularPolicy::new(array![[1.0 - 1e-12, 1e-12]]).unwrap();
        assert!(entropy(&d, 0) < 1e-10);
    }
}
