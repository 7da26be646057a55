//! Reward learning by maximum likelihood: the nested loop with dynamically
//! truncated inner soft Q-learning and the two-timescale single loop.
//!
//! Both variants run through [`IrlRunner`], a resumable state machine whose
//! checkpoint captures every random stream, so an interrupted run continues
//! exactly where it stopped.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diag::{policy_log_gap, saddle_objective, ExpertVisitation, LikelihoodMethod, LowerLevel};
use crate::env::{horizon_for_tail, sample_trajectory, FeatureMap, Mdp, TabularPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::net::{discounted_feature_sum, value_table, NetDocument, NetFunction, TwoLayerNet};
use crate::rng::{Rng, SeedStreams, Stream};
use crate::soft::{boltzmann_policy, solve_soft_optimal, SoftQTable};
use crate::soft_q::{SamplingMode, SoftQLearnerState, TdSampler};

pub const CHECKPOINT_SCHEMA: &str = "irl-checkpoint/v1";
pub const EXPERT_SCHEMA: &str = "expert/v1";
const EXPERT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Inner soft Q-learning for `k + 2` steps per outer round.
    Nested,
    /// One TD step per outer round.
    #[default]
    SingleLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrlConfig {
    /// Outer iterations `K`.
    pub iterations: usize,
    pub alpha0: f64,
    /// Reward stepsize exponent, `alpha = alpha0 / K^sigma`.
    pub sigma: f64,
    pub width: usize,
    /// Radius `B` of the Q-network ball.
    pub radius: f64,
    /// Agent trajectory horizon `H`.
    pub horizon: usize,
    pub seed: u64,
    pub variant: Variant,
    pub sampling: SamplingMode,
    pub diagnostics_interval: usize,
    /// Nested variant: restart each round from `W_0` instead of the previous average.
    pub reset_inner: bool,
    /// Nested variant: fixed inner length instead of `k + 2`.
    pub inner_steps_override: Option<usize>,
    pub alpha_override: Option<f64>,
    pub eta_override: Option<f64>,
}

impl IrlConfig {
    /// Defaults for a given discount; the horizon follows the `1e-3` tail rule.
    pub fn new(iterations: usize, discount: f64) -> Self {
        Self {
            iterations,
            alpha0: 1.0,
            sigma: 0.5,
            width: 512,
            radius: 10.0,
            horizon: horizon_for_tail(discount, 1e-3),
            seed: 0,
            variant: Variant::default(),
            sampling: SamplingMode::default(),
            diagnostics_interval: 10,
            reset_inner: false,
            inner_steps_override: None,
            alpha_override: None,
            eta_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 {
            return fail("K must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return fail(format!("sigma {} must lie in (0, 1)", self.sigma));
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return fail(format!("radius {} must be positive", self.radius));
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return fail(format!("alpha0 {} must be nonnegative", self.alpha0));
        }
        if self.diagnostics_interval == 0 {
            return fail("diagnostics interval must be at least 1".into());
        }
        if self.inner_steps_override == Some(0) {
            return fail("inner step override must be at least 1".into());
        }
        for (name, v) in [("alpha", self.alpha_override), ("eta", self.eta_override)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return fail(format!("{name} override {v} must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stepsizes {
    /// Reward ascent stepsize.
    pub alpha: f64,
    /// TD stepsize.
    pub eta: f64,
}

/// `alpha = alpha0 / K^sigma`; `eta = min{K^{-1/2}, (1 - gamma)/8}` nested,
/// `min{K^{-3/4}, (1 - gamma)/8}` single loop. Overrides win.
pub fn stepsize_schedule(config: &IrlConfig, discount: f64) -> Stepsizes {
    let k = config.iterations as f64;
    let cap = (1.0 - discount) / 8.0;
    let eta = match config.variant {
        Variant::Nested => k.powf(-0.5).min(cap),
        Variant::SingleLoop => k.powf(-0.75).min(cap),
    };
    Stepsizes {
        alpha: config.alpha_override.unwrap_or(config.alpha0 / k.powf(config.sigma)),
        eta: config.eta_override.unwrap_or(eta),
    }
}

/// `g = h(theta; tau_E) - h(theta; tau_A)`.
pub fn reward_gradient_estimate(
    reward_net: &impl NetFunction,
    expert: &Trajectory,
    agent: &Trajectory,
    discount: f64,
    features: &FeatureMap,
) -> Result<Array2<f64>> {
    let e = discounted_feature_sum(reward_net, expert, discount, features)?;
    let a = discounted_feature_sum(reward_net, agent, discount, features)?;
    Ok(e - a)
}

/// Expert trajectories together with the oracle that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory>,
    pub expert_policy: TabularPolicy,
    pub expert_q: SoftQTable,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn visitation(&self, mdp: &Mdp) -> Result<ExpertVisitation> {
        ExpertVisitation::from_trajectories(&self.trajectories, mdp.discount(), mdp.n_states(), mdp.n_actions())
    }

    pub fn sidecar(&self) -> ExpertDocument {
        ExpertDocument {
            schema: EXPERT_SCHEMA.to_string(),
            policy: rows(self.expert_policy.probs()),
            q: rows(&self.expert_q.values),
        }
    }

    pub fn from_parts(trajectories: Vec<Trajectory>, sidecar: ExpertDocument, mdp: &Mdp) -> Result<Self> {
        if sidecar.schema != EXPERT_SCHEMA {
            return Err(Error::Format(format!("unsupported schema {:?}", sidecar.schema)));
        }
        for t in &trajectories {
            t.check_bounds(mdp)?;
        }
        let shape = (mdp.n_states(), mdp.n_actions());
        let expert_policy = TabularPolicy::new(from_rows(sidecar.policy, shape)?)?;
        let expert_q = SoftQTable::new(from_rows(sidecar.q, shape)?)?;
        Ok(Self {
            trajectories,
            expert_policy,
            expert_q,
        })
    }
}

/// `expert/v1` sidecar: the oracle policy and soft Q-table behind a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDocument {
    pub schema: String,
    pub policy: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, shape: (usize, usize)) -> Result<Array2<f64>> {
    Array2::from_shape_vec(shape, rows.into_iter().flatten().collect())
        .map_err(|e| Error::Format(format!("table shape: {e}")))
}

/// Solve the MDP under its true reward and roll out `n_traj` expert trajectories.
pub fn demo_dataset_generate(
    mdp: &Mdp,
    n_traj: usize,
    horizon: usize,
    rng: &mut impl rand::Rng,
) -> Result<DemoDataset> {
    if n_traj == 0 {
        return Err(Error::Config("need at least one expert trajectory".into()));
    }
    let expert = solve_soft_optimal(mdp, mdp.true_reward(), EXPERT_TOL)?;
    let trajectories = (0..n_traj)
        .map(|_| sample_trajectory(mdp, &expert.policy, horizon, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoDataset {
        trajectories,
        expert_policy: expert.policy,
        expert_q: expert.q,
    })
}

/// Convergence metrics at one outer iteration, evaluated at `theta_k` and `pi_{k+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub k: usize,
    /// `||log pi_{k+1} - log pi_{theta_k}||_inf`.
    pub policy_log_gap: f64,
    /// `||grad L(theta_k)||^2`.
    pub grad_norm_sq: f64,
    /// `L(theta_k)`, direct form on the demonstrations.
    pub likelihood: f64,
    /// `L(theta_k, pi_{k+1})`.
    pub saddle_value: f64,
    /// `L(theta_k, pi_{k+1}) - min_pi L(theta_k, pi)`.
    pub saddle_gap: f64,
    /// `|delta|` of the last TD step of the iteration.
    pub td_residual: f64,
    pub eta: f64,
    pub alpha: f64,
}

/// Serializable snapshot of a run between two outer iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlCheckpoint {
    pub schema: String,
    pub config: IrlConfig,
    pub iteration: usize,
    pub inner_td_steps: u64,
    pub reward_net: NetDocument,
    pub q_net: NetDocument,
    pub avg_weights: Vec<Vec<f64>>,
    pub q_steps: u64,
    pub policy: Vec<Vec<f64>>,
    pub td_rng: Rng,
    pub trajectory_rng: Rng,
    pub demo_rng: Rng,
    pub chain_state: Option<usize>,
}

/// Outer-loop state: `theta_k`, the Q-learner, `pi_k` and the random streams.
#[derive(Debug, Clone)]
pub struct IrlState {
    pub reward_net: TwoLayerNet,
    pub learner: SoftQLearnerState,
    pub policy: TabularPolicy,
    pub iteration: usize,
    pub inner_td_steps: u64,
    td_rng: Rng,
    trajectory_rng: Rng,
    demo_rng: Rng,
    sampler: TdSampler,
}

pub struct IrlRunner<'a> {
    mdp: &'a Mdp,
    features: &'a FeatureMap,
    demos: &'a DemoDataset,
    visitation: ExpertVisitation,
    config: IrlConfig,
    steps: Stepsizes,
    exploration: TabularPolicy,
    state: IrlState,
}

impl<'a> IrlRunner<'a> {
    pub fn new(mdp: &'a Mdp, features: &'a FeatureMap, demos: &'a DemoDataset, config: IrlConfig) -> Result<Self> {
        Self::check_inputs(mdp, features, demos, &config)?;
        let streams = SeedStreams::new(config.seed);
        let mut init = streams.rng(Stream::Init);
        let q_net = TwoLayerNet::init(config.width, features.dim(), config.radius, &mut init)?;
        let reward_net = TwoLayerNet::init(config.width, features.dim(), config.radius, &mut init)?;
        let state = IrlState {
            reward_net,
            learner: SoftQLearnerState::new(q_net),
            policy: TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
            iteration: 0,
            inner_td_steps: 0,
            td_rng: streams.rng(Stream::TdSampling),
            trajectory_rng: streams.rng(Stream::Trajectory),
            demo_rng: streams.rng(Stream::Demo),
            sampler: TdSampler::new(config.sampling),
        };
        Self::assemble(mdp, features, demos, config, state)
    }

    pub fn resume(
        mdp: &'a Mdp,
        features: &'a FeatureMap,
        demos: &'a DemoDataset,
        checkpoint: IrlCheckpoint,
    ) -> Result<Self> {
        if checkpoint.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!("unsupported schema {:?}", checkpoint.schema)));
        }
        let config = checkpoint.config;
        Self::check_inputs(mdp, features, demos, &config)?;
        let q_net = checkpoint.q_net.into_net()?;
        let avg = from_rows(checkpoint.avg_weights, q_net.weights().dim())?;
        let mut sampler = TdSampler::new(config.sampling);
        sampler.set_chain_state(checkpoint.chain_state);
        let state = IrlState {
            reward_net: checkpoint.reward_net.into_net()?,
            learner: SoftQLearnerState::restore(q_net, avg, checkpoint.q_steps),
            policy: TabularPolicy::new(from_rows(checkpoint.policy, (mdp.n_states(), mdp.n_actions()))?)?,
            iteration: checkpoint.iteration,
            inner_td_steps: checkpoint.inner_td_steps,
            td_rng: checkpoint.td_rng,
            trajectory_rng: checkpoint.trajectory_rng,
            demo_rng: checkpoint.demo_rng,
            sampler,
        };
        if state.reward_net.dim() != features.dim() || state.learner.q_net().dim() != features.dim() {
            return Err(Error::Format(
                "checkpoint network dimension does not match the features".into(),
            ));
        }
        Self::assemble(mdp, features, demos, config, state)
    }

    fn check_inputs(mdp: &Mdp, features: &FeatureMap, demos: &DemoDataset, config: &IrlConfig) -> Result<()> {
        config.validate()?;
        if demos.is_empty() {
            return Err(Error::Config("demonstration set is empty".into()));
        }
        if !features.matches(mdp) {
            return Err(Error::Contract("feature map does not match the MDP".into()));
        }
        for t in &demos.trajectories {
            t.check_bounds(mdp)?;
        }
        Ok(())
    }

    fn assemble(
        mdp: &'a Mdp,
        features: &'a FeatureMap,
        demos: &'a DemoDataset,
        config: IrlConfig,
        state: IrlState,
    ) -> Result<Self> {
        Ok(Self {
            visitation: demos.visitation(mdp)?,
            steps: stepsize_schedule(&config, mdp.discount()),
            exploration: TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
            mdp,
            features,
            demos,
            config,
            state,
        })
    }

    pub fn config(&self) -> &IrlConfig {
        &self.config
    }

    pub fn stepsizes(&self) -> Stepsizes {
        self.steps
    }

    pub fn state(&self) -> &IrlState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn inner_td_steps(&self) -> u64 {
        self.state.inner_td_steps
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    pub fn checkpoint(&self) -> IrlCheckpoint {
        let s = &self.state;
        IrlCheckpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config: self.config.clone(),
            iteration: s.iteration,
            inner_td_steps: s.inner_td_steps,
            reward_net: s.reward_net.to_document(),
            q_net: s.learner.q_net().to_document(),
            avg_weights: rows(s.learner.avg_weights()),
            q_steps: s.learner.step_count(),
            policy: rows(s.policy.probs()),
            td_rng: s.td_rng.clone(),
            trajectory_rng: s.trajectory_rng.clone(),
            demo_rng: s.demo_rng.clone(),
            chain_state: s.sampler.chain_state(),
        }
    }

    fn td_steps(&mut self, count: usize, sampling_policy: &TabularPolicy, reward: &Array2<f64>) -> Result<f64> {
        let s = &mut self.state;
        let mut last = 0.0;
        for _ in 0..count {
            let sample = s.sampler.draw(self.mdp, sampling_policy, reward, &mut s.td_rng)?;
            last = s
                .learner
                .td_step(&sample, self.steps.eta, self.mdp.discount(), self.features)?;
            s.inner_td_steps += 1;
        }
        Ok(last)
    }

    /// Advance one outer iteration. Returns the diagnostics record when `k`
    /// falls on the diagnostics interval or is the last iteration.
    pub fn step(&mut self) -> Result<Option<DiagnosticsRecord>> {
        if self.is_finished() {
            return Err(Error::Contract("run already finished".into()));
        }
        let k = self.state.iteration;
        let reward = value_table(&self.state.reward_net, self.features);

        let td_residual = match self.config.variant {
            Variant::Nested => {
                if k > 0 {
                    let start = if self.config.reset_inner {
                        self.state.learner.q_net().init_weights().clone()
                    } else {
                        self.state.learner.avg_weights().clone()
                    };
                    self.state.learner.restart_from(start);
                }
                let inner = self.config.inner_steps_override.unwrap_or(k + 2);
                let exploration = self.exploration.clone();
                self.td_steps(inner, &exploration, &reward)?
            }
            Variant::SingleLoop => {
                let current = self.state.policy.clone();
                self.td_steps(1, &current, &reward)?
            }
        };

        let q_avg = value_table(&self.state.learner.averaged_net(), self.features);
        let next_policy = boltzmann_policy(&SoftQTable::new(q_avg)?);

        let s = &mut self.state;
        let expert = &self.demos.trajectories[s.demo_rng.random_range(0..self.demos.len())];
        let agent = sample_trajectory(self.mdp, &next_policy, self.config.horizon, &mut s.trajectory_rng)?;
        let g = reward_gradient_estimate(&s.reward_net, expert, &agent, self.mdp.discount(), self.features)?;

        let record = if k.is_multiple_of(self.config.diagnostics_interval) || k + 1 == self.config.iterations {
            Some(self.diagnostics(k, reward, &next_policy, td_residual)?)
        } else {
            None
        };

        let s = &mut self.state;
        if self.steps.alpha != 0.0 {
            let theta = s.reward_net.weights() + &(g * self.steps.alpha);
            s.reward_net.set_weights(theta);
        }
        s.policy = next_policy;
        s.iteration += 1;
        Ok(record)
    }

    fn diagnostics(
        &self,
        k: usize,
        reward: Array2<f64>,
        next_policy: &TabularPolicy,
        td_residual: f64,
    ) -> Result<DiagnosticsRecord> {
        let lower = LowerLevel::from_table(self.mdp, reward)?;
        let grad = lower.gradient(self.mdp, self.features, &self.visitation, &self.state.reward_net)?;
        let optimum = lower.likelihood(self.mdp, &self.visitation, LikelihoodMethod::Reformulated)?;
        let saddle_value = saddle_objective(
            self.mdp,
            self.features,
            &self.visitation,
            &self.state.reward_net,
            next_policy,
        )?;
        Ok(DiagnosticsRecord {
            k,
            policy_log_gap: policy_log_gap(next_policy, lower.policy())?,
            grad_norm_sq: grad.iter().map(|g| g * g).sum(),
            likelihood: lower.likelihood(self.mdp, &self.visitation, LikelihoodMethod::Direct)?,
            saddle_value,
            saddle_gap: saddle_value - optimum,
            td_residual: td_residual.abs(),
            eta: self.steps.eta,
            alpha: self.steps.alpha,
        })
    }

    /// Run to completion, handing each record to `observer`.
    pub fn run(&mut self, mut observer: impl FnMut(&DiagnosticsRecord) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            if let Some(record) = self.step()? {
                observer(&record)?;
            }
        }
        Ok(())
    }

    pub fn into_outcome(self, records: Vec<DiagnosticsRecord>) -> IrlOutcome {
        IrlOutcome {
            policy: self.state.policy,
            reward_net: self.state.reward_net,
            inner_td_steps: self.state.inner_td_steps,
            records,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IrlOutcome {
    /// `pi_K`.
    pub policy: TabularPolicy,
    /// `theta_K`.
    pub reward_net: TwoLayerNet,
    pub inner_td_steps: u64,
    pub records: Vec<DiagnosticsRecord>,
}

/// Run either variant to completion.
pub fn run_mlirl(mdp: &Mdp, features: &FeatureMap, demos: &DemoDataset, config: &IrlConfig) -> Result<IrlOutcome> {
    let mut runner = IrlRunner::new(mdp, features, demos, config.clone())?;
    let mut records = Vec::new();
    runner.run(|r| {
        records.push(*r);
        Ok(())
    })?;
    Ok(runner.into_outcome(records))
}

pub fn run_mlirl_nested(
    mdp: &Mdp,
    features: &FeatureMap,
    demos: &DemoDataset,
    config: &IrlConfig,
) -> Result<IrlOutcome> {
    if config.variant != Variant::Nested {
        return Err(Error::Config("expected the nested variant".into()));
    }
    run_mlirl(mdp, features, demos, config)
}

pub fn run_mlirl_single_loop(
    mdp: &Mdp,
    features: &FeatureMap,
    demos: &DemoDataset,
    config: &IrlConfig,
) -> Result<IrlOutcome> {
    if config.variant != Variant::SingleLoop {
        return Err(Error::Config("expected the single-loop variant".into()));
    }
    run_mlirl(mdp, features, demos, config)
}
