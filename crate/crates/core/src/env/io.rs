use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Mdp, Trajectory};
use crate::error::{Error, Result};

pub const MDP_SCHEMA: &str = "mdp/v1";

/// On-disk form of an [`Mdp`] together with its [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub schema: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    pub true_reward: Vec<Vec<f64>>,
    pub feature_dim: usize,
    /// Row per pair, ordered `s * n_actions + a`.
    pub features: Vec<Vec<f64>>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl MdpDocument {
    pub fn from_parts(mdp: &Mdp, features: &FeatureMap, metadata: serde_json::Value) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        Self {
            schema: MDP_SCHEMA.to_string(),
            n_states: ns,
            n_actions: na,
            discount: mdp.discount(),
            initial_dist: mdp.initial_dist().to_vec(),
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.next_state_dist(s, a).to_vec()).collect())
                .collect(),
            true_reward: mdp.true_reward().outer_iter().map(|r| r.to_vec()).collect(),
            feature_dim: features.dim(),
            features: features.table().outer_iter().map(|r| r.to_vec()).collect(),
            metadata,
        }
    }

    pub fn into_parts(self) -> Result<(Mdp, FeatureMap)> {
        if self.schema != MDP_SCHEMA {
            return Err(Error::Format(format!("unsupported schema {:?}", self.schema)));
        }
        let (ns, na) = (self.n_states, self.n_actions);
        let flat: Vec<f64> = self.transition.into_iter().flatten().flatten().collect();
        let transition =
            Array3::from_shape_vec((ns, na, ns), flat).map_err(|e| Error::Format(format!("transition: {e}")))?;
        let reward = Array2::from_shape_vec((ns, na), self.true_reward.into_iter().flatten().collect())
            .map_err(|e| Error::Format(format!("true_reward: {e}")))?;
        let table = Array2::from_shape_vec(
            (ns * na, self.feature_dim),
            self.features.into_iter().flatten().collect(),
        )
        .map_err(|e| Error::Format(format!("features: {e}")))?;
        let mdp = Mdp::new(transition, Array1::from(self.initial_dist), self.discount, reward)?;
        let features = FeatureMap::new(na, table)?;
        Ok((mdp, features))
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    states: Vec<usize>,
    actions: Vec<usize>,
}

/// One trajectory per line: `{"states":[...],"actions":[...]}`.
pub fn write_trajectories_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for tr in trajectories {
        let line = TrajectoryLine {
            states: tr.states.clone(),
            actions: tr.actions.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(Trajectory::new(parsed.states, parsed.actions)?);
    }
    Ok(out)
}
