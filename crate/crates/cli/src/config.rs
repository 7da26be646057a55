//! Experiment configuration, read from and written back as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use mlirl_core::env::{
    build_gridworld, build_random_mdp, horizon_for_tail, FeatureMap, GridworldSpec, Mdp, RandomMdpSpec,
};
use mlirl_core::irl::{IrlConfig, Variant};
use mlirl_core::rng::{SeedStreams, Stream};
use mlirl_core::soft_q::SamplingMode;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};
use crate::output::check_relative;

pub const CONFIG_SCHEMA: &str = "experiment/v1";
/// Discounted mass left beyond the default demonstration horizon.
const HORIZON_TAIL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Master seed; every random component draws from a named substream of it.
    #[serde(default)]
    pub seed: u64,
    /// Relative to the output root.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Gridworld(GridworldParams),
    Random(RandomParams),
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self::Gridworld(GridworldParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldParams {
    pub rows: usize,
    pub cols: usize,
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub discount: f64,
}

impl Default for GridworldParams {
    fn default() -> Self {
        let g = GridworldSpec::default();
        Self {
            rows: g.rows,
            cols: g.cols,
            slip_prob: g.slip_prob,
            goal_reward: g.goal_reward,
            discount: g.discount,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomParams {
    pub n_states: usize,
    pub n_actions: usize,
    /// Dirichlet concentration of the transition rows.
    pub concentration: f64,
    pub discount: f64,
}

impl Default for RandomParams {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_actions: 3,
            concentration: 1.0,
            discount: 0.9,
        }
    }
}

impl EnvironmentSpec {
    pub fn discount(&self) -> f64 {
        match self {
            Self::Gridworld(g) => g.discount,
            Self::Random(r) => r.discount,
        }
    }

    /// Builds the MDP and its features. Randomness comes from the env substream.
    pub fn build(&self, dim: usize, streams: &SeedStreams) -> Result<(Mdp, FeatureMap)> {
        let seed: u64 = streams.rng(Stream::Env).random();
        let built = match *self {
            Self::Gridworld(g) => build_gridworld(&GridworldSpec {
                rows: g.rows,
                cols: g.cols,
                slip_prob: g.slip_prob,
                discount: g.discount,
                dim,
                goal_reward: g.goal_reward,
                seed,
            }),
            Self::Random(r) => build_random_mdp(
                &RandomMdpSpec::new(r.n_states, r.n_actions, dim, r.concentration, seed).with_discount(r.discount),
            ),
        };
        Ok(built?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Hidden width `m`.
    pub width: usize,
    /// Feature dimension `d`.
    pub dim: usize,
    /// Q-network ball radius `B`.
    pub radius: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            width: 512,
            dim: 32,
            radius: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub variant: Variant,
    pub iterations: usize,
    pub alpha0: f64,
    pub sigma: f64,
    pub sampling: SamplingMode,
    pub diagnostics_interval: usize,
    /// Outer iterations between checkpoints.
    pub checkpoint_interval: usize,
    pub reset_inner: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        let base = IrlConfig::new(1000, 0.9);
        Self {
            variant: base.variant,
            iterations: base.iterations,
            alpha0: base.alpha0,
            sigma: base.sigma,
            sampling: base.sampling,
            diagnostics_interval: base.diagnostics_interval,
            checkpoint_interval: 100,
            reset_inner: base.reset_inner,
            inner_steps: None,
            alpha: None,
            eta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_traj: usize,
    /// Trajectory length, shared by expert and agent rollouts. Filled in from
    /// the discount when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_traj: 50,
            horizon: None,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 0,
            output_dir: default_output_dir(),
            environment: EnvironmentSpec::default(),
            network: NetworkSpec::default(),
            algorithm: AlgorithmSpec::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses without filling derived defaults; call [`Self::resolved`] once
    /// all overrides are applied.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| CliError::Toml {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::parse(text, origin)?.resolved()
    }

    /// Reads a file; the result is unresolved, as with [`Self::parse`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks the schema and fills every derived default, so that the written
    /// form fully describes the experiment.
    pub fn resolved(mut self) -> Result<Self> {
        if self.schema != CONFIG_SCHEMA {
            return Err(CliError::Config(format!(
                "unsupported schema {:?}, expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        check_relative(&self.output_dir)?;
        let discount = self.environment.discount();
        if !(0.0..1.0).contains(&discount) {
            return Err(CliError::Config(format!("discount {discount} outside [0, 1)")));
        }
        if self.dataset.n_traj == 0 {
            return Err(CliError::Config("dataset.n_traj must be at least 1".into()));
        }
        if self.algorithm.checkpoint_interval == 0 {
            return Err(CliError::Config(
                "algorithm.checkpoint_interval must be at least 1".into(),
            ));
        }
        self.dataset
            .horizon
            .get_or_insert_with(|| horizon_for_tail(discount, HORIZON_TAIL));
        self.irl_config().validate()?;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.dataset
            .horizon
            .unwrap_or_else(|| horizon_for_tail(self.environment.discount(), HORIZON_TAIL))
    }

    pub fn streams(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    pub fn irl_config(&self) -> IrlConfig {
        let a = &self.algorithm;
        IrlConfig {
            iterations: a.iterations,
            alpha0: a.alpha0,
            sigma: a.sigma,
            width: self.network.width,
            radius: self.network.radius,
            horizon: self.horizon(),
            seed: self.seed,
            variant: a.variant,
            sampling: a.sampling,
            diagnostics_interval: a.diagnostics_interval,
            reset_inner: a.reset_inner,
            inner_steps_override: a.inner_steps,
            alpha_override: a.alpha,
            eta_override: a.eta,
        }
    }
}
