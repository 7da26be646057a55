//! Neural soft Q-learning under a frozen reward.
//!
//! One learner step draws a single `(s, a, r, s')` tuple, takes a projected
//! semi-gradient TD step on the soft Bellman residual and folds the new
//! iterate into a running average. The averaged weights are the output.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, stationary_distribution, FeatureMap, Mdp, TabularPolicy};
use crate::error::{Error, Result};
use crate::net::{value_table, NetFunction, TwoLayerNet};
use crate::soft::logsumexp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdSample {
    pub state: usize,
    pub action: usize,
    /// `r_theta(s, a)`, frozen when the tuple is drawn.
    pub reward_value: f64,
    pub next_state: usize,
}

impl TdSample {
    /// Tuple whose reward is read off `reward_net` at `psi(s, a)`.
    pub fn with_reward_net(
        state: usize,
        action: usize,
        next_state: usize,
        reward_net: &impl NetFunction,
        features: &FeatureMap,
    ) -> Self {
        let reward_value = reward_net.value(features.get(state, action));
        Self {
            state,
            action,
            reward_value,
            next_state,
        }
    }
}

/// `delta = Q(s, a) - r - gamma * logsumexp_a' Q(s', a')`.
pub fn bellman_residual(q_net: &impl NetFunction, sample: &TdSample, discount: f64, features: &FeatureMap) -> f64 {
    let q_sa = q_net.value(features.get(sample.state, sample.action));
    let next: Vec<f64> = (0..features.n_actions())
        .map(|a| q_net.value(features.get(sample.next_state, a)))
        .collect();
    q_sa - sample.reward_value - discount * logsumexp(ndarray::aview1(&next))
}

/// How TD tuples are drawn from the sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplingMode {
    /// i.i.d. `(s, a)` from the exact stationary distribution, then `s' ~ P(.|s, a)`.
    #[default]
    ExactStationary,
    /// Consecutive transitions of one long chain, after `burn_in` discarded steps.
    ChainRollout { burn_in: usize },
}

/// Stateful TD tuple source. Caches the stationary distribution of the last
/// policy it saw; in chain mode it remembers the current state.
#[derive(Debug, Clone)]
pub struct TdSampler {
    mode: SamplingMode,
    chain_state: Option<usize>,
    cached: Option<(TabularPolicy, Vec<f64>)>,
}

impl TdSampler {
    pub fn new(mode: SamplingMode) -> Self {
        Self {
            mode,
            chain_state: None,
            cached: None,
        }
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn chain_state(&self) -> Option<usize> {
        self.chain_state
    }

    pub fn set_chain_state(&mut self, state: Option<usize>) {
        self.chain_state = state;
    }

    fn pair_distribution(&mut self, mdp: &Mdp, policy: &TabularPolicy) -> Result<&[f64]> {
        let stale = match &self.cached {
            Some((cached, _)) => cached != policy,
            None => true,
        };
        if stale {
            let mu = stationary_distribution(mdp, policy)?;
            self.cached = Some((policy.clone(), mu.iter().copied().collect()));
        }
        Ok(&self.cached.as_ref().expect("just filled").1)
    }

    /// Draw one tuple under `policy`, with rewards from the frozen `reward` table.
    pub fn draw(
        &mut self,
        mdp: &Mdp,
        policy: &TabularPolicy,
        reward: &Array2<f64>,
        rng: &mut impl rand::Rng,
    ) -> Result<TdSample> {
        if let Some((s, a)) = policy.first_zero() {
            return Err(Error::Contract(format!(
                "sampling policy must be strictly positive, pi({a}|{s}) = 0"
            )));
        }
        let n_actions = mdp.n_actions();
        let (state, action) = match self.mode {
            SamplingMode::ExactStationary => {
                let mu = self.pair_distribution(mdp, policy)?;
                let pair = sample_categorical(mu.iter().copied(), rng);
                (pair / n_actions, pair % n_actions)
            }
            SamplingMode::ChainRollout { burn_in } => {
                let s = match self.chain_state {
                    Some(s) => s,
                    None => {
                        let mut s = sample_categorical(mdp.initial_dist().iter().copied(), rng);
                        for _ in 0..burn_in {
                            let a = sample_categorical(policy.row(s).iter().copied(), rng);
                            s = sample_categorical(mdp.next_state_dist(s, a).iter().copied(), rng);
                        }
                        s
                    }
                };
                (s, sample_categorical(policy.row(s).iter().copied(), rng))
            }
        };
        let next_state = sample_categorical(mdp.next_state_dist(state, action).iter().copied(), rng);
        if matches!(self.mode, SamplingMode::ChainRollout { .. }) {
            self.chain_state = Some(next_state);
        }
        Ok(TdSample {
            state,
            action,
            reward_value: reward[[state, action]],
            next_state,
        })
    }
}

/// Current iterate `W_t`, the running average of `W_0..W_t`, and `t`.
#[derive(Debug, Clone)]
pub struct SoftQLearnerState {
    q_net: TwoLayerNet,
    avg_weights: Array2<f64>,
    step_count: u64,
    #[cfg(debug_assertions)]
    weight_sum: Array2<f64>,
}

impl SoftQLearnerState {
    /// Start from `q_init`'s current weights with the average equal to them.
    pub fn new(q_init: TwoLayerNet) -> Self {
        let avg = q_init.weights().clone();
        Self::restore(q_init, avg, 0)
    }

    /// Rebuild from checkpointed parts.
    pub fn restore(q_net: TwoLayerNet, avg_weights: Array2<f64>, step_count: u64) -> Self {
        Self {
            #[cfg(debug_assertions)]
            weight_sum: &avg_weights * (step_count as f64 + 1.0),
            q_net,
            avg_weights,
            step_count,
        }
    }

    pub fn q_net(&self) -> &TwoLayerNet {
        &self.q_net
    }

    pub fn avg_weights(&self) -> &Array2<f64> {
        &self.avg_weights
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// The output network `Q(.; W_bar)`.
    pub fn averaged_net(&self) -> TwoLayerNet {
        self.q_net.with_weights(self.avg_weights.clone())
    }

    /// Restart averaging from `weights` (projected), keeping the anchor.
    pub fn restart_from(&mut self, weights: Array2<f64>) {
        let mut net = self.q_net.clone();
        net.set_weights_projected(weights);
        *self = Self::new(net);
    }

    /// One projected TD step. Returns the Bellman residual `delta`.
    pub fn td_step(&mut self, sample: &TdSample, stepsize: f64, discount: f64, features: &FeatureMap) -> Result<f64> {
        if !(stepsize >= 0.0) {
            return Err(Error::Contract(format!("TD stepsize {stepsize} must be nonnegative")));
        }
        let delta = bellman_residual(&self.q_net, sample, discount, features);
        if !delta.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite Bellman residual at step {}",
                self.step_count
            )));
        }
        let mut candidate = self.q_net.weights().clone();
        self.q_net.accumulate_gradient(
            features.get(sample.state, sample.action),
            -stepsize * delta,
            &mut candidate,
        );
        self.q_net.set_weights_projected(candidate);

        // W_bar += (W_{t+1} - W_bar) / (t + 2)
        let denom = self.step_count as f64 + 2.0;
        ndarray::Zip::from(&mut self.avg_weights)
            .and(self.q_net.weights())
            .for_each(|avg, &w| *avg += (w - *avg) / denom);
        self.step_count += 1;

        #[cfg(debug_assertions)]
        {
            self.weight_sum += self.q_net.weights();
            let mean = &self.weight_sum / (self.step_count as f64 + 1.0);
            let scale = 1.0 + crate::net::flat_norm(&mean);
            debug_assert!(
                crate::net::flat_distance(&mean, &self.avg_weights) <= 1e-10 * scale,
                "running average drifted from the explicit mean"
            );
        }
        Ok(delta)
    }
}

/// Default standalone stepsize `T^{-1/2}`.
pub fn default_stepsize(iterations: usize) -> f64 {
    1.0 / (iterations.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftQConfig {
    pub iterations: usize,
    pub stepsize: f64,
    pub sampling: SamplingMode,
}

impl SoftQConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            stepsize: default_stepsize(iterations),
            sampling: SamplingMode::default(),
        }
    }

    pub fn with_stepsize(mut self, stepsize: f64) -> Self {
        self.stepsize = stepsize;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingMode) -> Self {
        self.sampling = sampling;
        self
    }
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub delta: f64,
    pub distance_from_init: f64,
    /// `NaN` on steps where it was not evaluated.
    pub mspbe_estimate: f64,
}

/// Run `T` TD steps from `q_init` and return the averaged network.
pub fn run_soft_q_learning(
    mdp: &Mdp,
    features: &FeatureMap,
    exploration: &TabularPolicy,
    reward_net: &impl NetFunction,
    q_init: TwoLayerNet,
    config: &SoftQConfig,
    rng: &mut impl rand::Rng,
) -> Result<TwoLayerNet> {
    run_soft_q_learning_traced(mdp, features, exploration, reward_net, q_init, config, rng, 0, |_| {
        Ok(())
    })
}

/// As [`run_soft_q_learning`], reporting every step to `trace`. When
/// `mspbe_every > 0` the exact MSPBE under the sampling distribution is
/// evaluated every `mspbe_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_soft_q_learning_traced(
    mdp: &Mdp,
    features: &FeatureMap,
    exploration: &TabularPolicy,
    reward_net: &impl NetFunction,
    q_init: TwoLayerNet,
    config: &SoftQConfig,
    rng: &mut impl rand::Rng,
    mspbe_every: usize,
    mut trace: impl FnMut(&TraceRow) -> Result<()>,
) -> Result<TwoLayerNet> {
    if config.iterations == 0 {
        return Err(Error::Config("soft Q-learning needs at least one iteration".into()));
    }
    if !features.matches(mdp) {
        return Err(Error::Contract("feature map does not match the MDP".into()));
    }
    if !exploration.is_strictly_positive() {
        let (s, a) = exploration.first_zero().expect("has a zero");
        return Err(Error::Contract(format!("exploration policy has pi({a}|{s}) = 0")));
    }
    let reward = value_table(reward_net, features);
    let mu = match mspbe_every {
        0 => None,
        _ => Some(stationary_distribution(mdp, exploration)?),
    };
    let mut sampler = TdSampler::new(config.sampling);
    let mut learner = SoftQLearnerState::new(q_init);
    for _ in 0..config.iterations {
        let sample = sampler.draw(mdp, exploration, &reward, rng)?;
        let delta = learner.td_step(&sample, config.stepsize, mdp.discount(), features)?;
        let t = learner.step_count();
        let mspbe_estimate = match &mu {
            Some(mu) if t.is_multiple_of(mspbe_every as u64) => {
                crate::diag::mspbe_with_reward(mdp, features, mu, learner.q_net(), &reward)?
            }
            _ => f64::NAN,
        };
        trace(&TraceRow {
            t,
            delta,
            distance_from_init: learner.q_net().distance_from_init(),
            mspbe_estimate,
        })?;
    }
    Ok(learner.averaged_net())
}
