//! Finite MDPs with unit-sphere state-action embeddings.
//!
//! States and actions are plain indices. Learners only ever see a pair
//! through its embedding row in [`FeatureMap`], so a tabular instance
//! exercises the same interface as a continuous one.

mod io;
mod markov;

pub use io::{read_trajectories_jsonl, write_trajectories_jsonl, MdpDocument, MDP_SCHEMA};
pub use markov::{
    expected_visitation, feature_margin_report, horizon_for_tail, occupancy_measure, sample_categorical,
    sample_trajectory, spectral_report, state_chain, state_distribution_at, stationary_distribution,
    FeatureMarginReport, SpectralReport,
};

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[[s, a, s']] = P(s' | s, a)`
    transition: Array3<f64>,
    initial_dist: Array1<f64>,
    discount: f64,
    true_reward: Array2<f64>,
}

impl Mdp {
    pub fn new(
        transition: Array3<f64>,
        initial_dist: Array1<f64>,
        discount: f64,
        true_reward: Array2<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config("MDP needs at least one state and one action".into()));
        }
        if n_next != n_states {
            return Err(Error::Config(format!(
                "transition tensor has shape ({n_states}, {n_actions}, {n_next})"
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::Config("initial distribution length mismatch".into()));
        }
        if true_reward.dim() != (n_states, n_actions) {
            return Err(Error::Config("reward shape mismatch".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Config(format!("discount {discount} outside (0, 1)")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_probability_row(row, &format!("P(.|{s},{a})"))?;
            }
        }
        check_probability_row(initial_dist.view(), "initial distribution")?;
        if true_reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("reward has non-finite entries".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            initial_dist,
            discount,
            true_reward,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn next_state_dist(&self, state: usize, action: usize) -> ArrayView1<'_, f64> {
        self.transition.slice(ndarray::s![state, action, ..])
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn true_reward(&self) -> &Array2<f64> {
        &self.true_reward
    }

    /// Same dynamics under a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.initial_dist.clone(),
            discount,
            self.true_reward.clone(),
        )
    }

    /// Same dynamics under a different ground-truth reward.
    pub fn with_true_reward(&self, reward: Array2<f64>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.initial_dist.clone(),
            self.discount,
            reward,
        )
    }
}

fn check_probability_row(row: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = row.sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Injective embedding of state-action pairs into the unit sphere of R^d.
///
/// Row `s * n_actions + a` holds psi(s, a).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_actions: usize,
    table: Array2<f64>,
}

impl FeatureMap {
    pub fn new(n_actions: usize, table: Array2<f64>) -> Result<Self> {
        let (rows, dim) = table.dim();
        if dim <= 2 {
            return Err(Error::Config(format!("feature dimension {dim} must exceed 2")));
        }
        if n_actions == 0 || rows % n_actions != 0 {
            return Err(Error::Config("feature table rows not a multiple of n_actions".into()));
        }
        for (i, row) in table.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > PROB_TOL {
                return Err(Error::Config(format!("feature row {i} has norm {norm}")));
            }
        }
        for i in 0..rows {
            for j in (i + 1)..rows {
                if table.row(i) == table.row(j) {
                    return Err(Error::Config(format!("feature rows {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { n_actions, table })
    }

    /// Rows drawn i.i.d. standard Gaussian, then normalized.
    pub fn random_unit(n_pairs: usize, n_actions: usize, dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut table = Array2::<f64>::zeros((n_pairs, dim));
        for mut row in table.outer_iter_mut() {
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-8 {
                    row.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        Self::new(n_actions, table)
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn n_pairs(&self) -> usize {
        self.table.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.table.nrows() / self.n_actions
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        state * self.n_actions + action
    }

    pub fn get(&self, state: usize, action: usize) -> ArrayView1<'_, f64> {
        self.table.row(self.index(state, action))
    }

    pub fn row(&self, pair: usize) -> ArrayView1<'_, f64> {
        self.table.row(pair)
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn matches(&self, mdp: &Mdp) -> bool {
        self.n_actions == mdp.n_actions() && self.n_states() == mdp.n_states()
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::Config("empty policy".into()));
        }
        for (s, row) in probs.outer_iter().enumerate() {
            check_probability_row(row, &format!("pi(.|{s})"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[[state, action]]
    }

    pub fn row(&self, state: usize) -> ArrayView1<'_, f64> {
        self.probs.row(state)
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// First (state, action) with zero probability, if any.
    pub fn first_zero(&self) -> Option<(usize, usize)> {
        self.probs.indexed_iter().find(|(_, &p)| p <= 0.0).map(|(ix, _)| ix)
    }

    pub fn matches(&self, mdp: &Mdp) -> bool {
        self.n_states() == mdp.n_states() && self.n_actions() == mdp.n_actions()
    }
}

/// A finite run of (state, action) pairs from one chain.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != actions.len() {
            return Err(Error::Format(format!(
                "trajectory has {} states but {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self { states, actions })
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }

    pub fn check_bounds(&self, mdp: &Mdp) -> Result<()> {
        for (t, (s, a)) in self.steps().enumerate() {
            if s >= mdp.n_states() || a >= mdp.n_actions() {
                return Err(Error::Format(format!("step {t}: ({s}, {a}) out of range")));
            }
        }
        Ok(())
    }
}

pub const ACTION_NAMES: [&str; 4] = ["up", "right", "down", "left"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridworldSpec {
    pub rows: usize,
    pub cols: usize,
    pub slip_prob: f64,
    pub discount: f64,
    pub dim: usize,
    /// Reward collected in the bottom-right cell, for every action.
    pub goal_reward: f64,
    pub seed: u64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            slip_prob: 0.1,
            discount: 0.9,
            dim: 32,
            goal_reward: 1.0,
            seed: 0,
        }
    }
}

/// Four-action gridworld (up, right, down, left). Moves off the grid stay put.
/// The intended move happens with probability `1 - slip_prob`; otherwise one
/// of the three other directions is taken uniformly.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<(Mdp, FeatureMap)> {
    let GridworldSpec {
        rows,
        cols,
        slip_prob,
        discount,
        dim,
        goal_reward,
        seed,
    } = *spec;
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::Config(format!("gridworld {rows}x{cols} needs at least 2 cells")));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(Error::Config(format!("slip probability {slip_prob} outside [0, 1)")));
    }
    let n = rows * cols;
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let target = |s: usize, dir: usize| -> usize {
        let (r, c) = ((s / cols) as isize, (s % cols) as isize);
        let (nr, nc) = (r + moves[dir].0, c + moves[dir].1);
        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
            s
        } else {
            nr as usize * cols + nc as usize
        }
    };
    let mut transition = Array3::<f64>::zeros((n, 4, n));
    for s in 0..n {
        for a in 0..4 {
            for dir in 0..4 {
                let p = if dir == a { 1.0 - slip_prob } else { slip_prob / 3.0 };
                transition[[s, a, target(s, dir)]] += p;
            }
        }
    }
    let initial = Array1::from_elem(n, 1.0 / n as f64);
    let mut reward = Array2::<f64>::zeros((n, 4));
    reward.row_mut(n - 1).fill(goal_reward);
    let mdp = Mdp::new(transition, initial, discount, reward)?;
    let mut rng = rng_from_seed(seed);
    let features = FeatureMap::random_unit(n * 4, 4, dim, &mut rng)?;
    Ok((mdp, features))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub concentration: f64,
    pub discount: f64,
    pub seed: u64,
}

impl RandomMdpSpec {
    pub fn new(n_states: usize, n_actions: usize, dim: usize, concentration: f64, seed: u64) -> Self {
        Self {
            n_states,
            n_actions,
            dim,
            concentration,
            discount: 0.9,
            seed,
        }
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }
}

/// Dirichlet transition rows with full support, Dirichlet initial
/// distribution, standard-normal ground-truth reward.
pub fn build_random_mdp(spec: &RandomMdpSpec) -> Result<(Mdp, FeatureMap)> {
    let RandomMdpSpec {
        n_states,
        n_actions,
        dim,
        concentration,
        discount,
        seed,
    } = *spec;
    if n_states < 2 || n_actions < 2 {
        return Err(Error::Config("random MDP needs at least 2 states and 2 actions".into()));
    }
    if dim <= 2 {
        return Err(Error::Config(format!("feature dimension {dim} must exceed 2")));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Config(format!("concentration {concentration} must be positive")));
    }
    let mut rng = rng_from_seed(seed);
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut dirichlet = |len: usize| -> Array1<f64> {
        let draws: Array1<f64> = (0..len)
            .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
            .collect();
        let total = draws.sum();
        let mut p = draws / total;
        // renormalize once more so the row sums to 1 to the last ulp
        let total = p.sum();
        p.mapv_inplace(|v| v / total);
        p
    };
    let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = dirichlet(n_states);
            transition.slice_mut(ndarray::s![s, a, ..]).assign(&row);
        }
    }
    let initial = dirichlet(n_states);
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| StandardNormal.sample(&mut rng));
    let mdp = Mdp::new(transition, initial, discount, reward)?;
    let features = FeatureMap::random_unit(n_states * n_actions, n_actions, dim, &mut rng)?;
    Ok((mdp, features))
}

/// Uniform random direction on the unit sphere of R^d.
pub fn random_unit_vector(dim: usize, rng: &mut impl rand::Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            return v / n;
        }
    }
}
