//! The `gen-env`, `gen-demos` and `run` verbs.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use mlirl_core::env::{read_trajectories_jsonl, write_trajectories_jsonl, FeatureMap, Mdp, MdpDocument};
use mlirl_core::irl::{
    demo_dataset_generate, DemoDataset, DiagnosticsRecord, ExpertDocument, IrlCheckpoint, IrlRunner, Variant,
};
use mlirl_core::rng::Stream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, Result};
use crate::output::OutputDir;

pub const CONFIG_FILE: &str = "config.toml";
pub const ENV_FILE: &str = "env.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const EXPERT_FILE: &str = "expert.json";
pub const RUN_DIR: &str = "run";
pub const SWEEP_DIR: &str = "sweep";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REWARD_NET_FILE: &str = "reward_net.json";
pub const Q_NET_FILE: &str = "q_net.json";
pub const RUN_STATUS_FILE: &str = "run.json";

/// Diagnostics CSV header, in `DiagnosticsRecord` field order.
pub const DIAGNOSTICS_HEADER: [&str; 9] = [
    "k",
    "policy_log_gap",
    "grad_norm_sq",
    "likelihood",
    "saddle_value",
    "saddle_gap",
    "td_residual",
    "eta",
    "alpha",
];

/// The experiment directory `root/config.output_dir`, with the resolved
/// configuration written into it.
pub fn experiment_dir(config: &ExperimentConfig, root: &Path) -> Result<OutputDir> {
    let dir = OutputDir::create(root, &config.output_dir)?;
    dir.write_atomic(CONFIG_FILE, config.to_toml_string()?.as_bytes())?;
    Ok(dir)
}

pub fn cmd_gen_env(config: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let dir = experiment_dir(config, root)?;
    let (mdp, features) = config.environment.build(config.network.dim, &config.streams())?;
    let metadata = serde_json::json!({
        "environment": config.environment,
        "seed": config.seed,
    });
    let doc = MdpDocument::from_parts(&mdp, &features, metadata);
    let path = dir.write_json(ENV_FILE, &doc)?;
    info!(
        "wrote {} ({} states, {} actions)",
        path.display(),
        mdp.n_states(),
        mdp.n_actions()
    );
    Ok(path)
}

pub fn load_env(path: &Path) -> Result<(Mdp, FeatureMap)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let doc: MdpDocument = serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(doc.into_parts()?)
}

/// Writes the demonstrations and the expert sidecar; returns both paths.
pub fn cmd_gen_demos(config: &ExperimentConfig, root: &Path, env: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = experiment_dir(config, root)?;
    let env_path = env.map_or_else(|| dir.file(ENV_FILE), |p| Ok(p.to_path_buf()))?;
    let (mdp, _) = load_env(&env_path)?;
    let mut rng = config.streams().rng(Stream::Dataset);
    let demos = demo_dataset_generate(&mdp, config.dataset.n_traj, config.horizon(), &mut rng)?;
    let mut lines = Vec::new();
    write_trajectories_jsonl(&mut lines, &demos.trajectories)?;
    let demos_path = dir.write_atomic(DEMOS_FILE, &lines)?;
    let expert_path = dir.write_json(EXPERT_FILE, &demos.sidecar())?;
    info!(
        "wrote {} trajectories of length {} to {}",
        demos.len(),
        config.horizon(),
        demos_path.display()
    );
    Ok((demos_path, expert_path))
}

pub fn load_demos(demos: &Path, expert: &Path, mdp: &Mdp) -> Result<DemoDataset> {
    let file = fs::File::open(demos).map_err(io_err(demos))?;
    let trajectories = read_trajectories_jsonl(BufReader::new(file)).map_err(|e| CliError::Input {
        path: demos.to_path_buf(),
        reason: e.to_string(),
    })?;
    let file = fs::File::open(expert).map_err(io_err(expert))?;
    let sidecar: ExpertDocument = serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Json {
        path: expert.to_path_buf(),
        source,
    })?;
    DemoDataset::from_parts(trajectories, sidecar, mdp).map_err(|e| CliError::Input {
        path: demos.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Defaults to the experiment's `env.json`.
    pub env: Option<PathBuf>,
    /// Defaults to the experiment's `demos.jsonl`.
    pub demos: Option<PathBuf>,
    /// Defaults to `expert.json` next to the demonstrations.
    pub expert: Option<PathBuf>,
    /// Continue from the run directory's checkpoint.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many outer iterations are done.
    pub stop_after: Option<usize>,
    /// Run one independent copy per seed, concurrently.
    pub sweep_seeds: Vec<u64>,
}

/// Progress written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed: u64,
    pub variant: Variant,
    pub iterations: usize,
    pub completed: usize,
    pub inner_td_steps: u64,
    pub finished: bool,
}

/// Runs the configured algorithm, or one run per sweep seed. Returns the
/// status of each run in seed order.
pub fn cmd_run(config: &ExperimentConfig, root: &Path, options: &RunOptions) -> Result<Vec<RunStatus>> {
    let dir = experiment_dir(config, root)?;
    let env_path = options.env.clone().map_or_else(|| dir.file(ENV_FILE), Ok)?;
    let demos_path = options.demos.clone().map_or_else(|| dir.file(DEMOS_FILE), Ok)?;
    let expert_path = options
        .expert
        .clone()
        .unwrap_or_else(|| demos_path.with_file_name(EXPERT_FILE));
    let (mdp, features) = load_env(&env_path)?;
    if features.dim() != config.network.dim {
        return Err(CliError::Input {
            path: env_path,
            reason: format!(
                "feature dimension {} but network.dim is {}",
                features.dim(),
                config.network.dim
            ),
        });
    }
    let demos = load_demos(&demos_path, &expert_path, &mdp)?;

    if options.sweep_seeds.is_empty() {
        let run_dir = dir.subdir(RUN_DIR)?;
        return Ok(vec![run_single(config, &run_dir, &mdp, &features, &demos, options)?]);
    }
    let sweep = dir.subdir(SWEEP_DIR)?;
    options
        .sweep_seeds
        .par_iter()
        .map(|&seed| {
            let run_config = ExperimentConfig { seed, ..config.clone() };
            let run_dir = sweep.subdir(format!("seed-{seed}"))?;
            run_single(&run_config, &run_dir, &mdp, &features, &demos, options)
        })
        .collect()
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != DIAGNOSTICS_HEADER {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            reason: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err(path))
}

fn diagnostics_bytes(records: &[DiagnosticsRecord]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let sink = Path::new(DIAGNOSTICS_FILE);
    writer.write_record(DIAGNOSTICS_HEADER).map_err(csv_err(sink))?;
    for r in records {
        writer.serialize(r).map_err(csv_err(sink))?;
    }
    writer.into_inner().map_err(|e| CliError::Io {
        path: sink.to_path_buf(),
        source: e.into_error(),
    })
}

fn write_checkpoint(run_dir: &OutputDir, runner: &IrlRunner<'_>, config: &ExperimentConfig) -> Result<RunStatus> {
    let state = runner.state();
    run_dir.write_json(CHECKPOINT_FILE, &runner.checkpoint())?;
    run_dir.write_json(REWARD_NET_FILE, &state.reward_net.to_document())?;
    run_dir.write_json(Q_NET_FILE, &state.learner.q_net().to_document())?;
    let status = RunStatus {
        seed: config.seed,
        variant: config.algorithm.variant,
        iterations: config.algorithm.iterations,
        completed: runner.iteration(),
        inner_td_steps: runner.inner_td_steps(),
        finished: runner.is_finished(),
    };
    run_dir.write_json(RUN_STATUS_FILE, &status)?;
    Ok(status)
}

fn run_single(
    config: &ExperimentConfig,
    run_dir: &OutputDir,
    mdp: &Mdp,
    features: &FeatureMap,
    demos: &DemoDataset,
    options: &RunOptions,
) -> Result<RunStatus> {
    run_dir.write_atomic(CONFIG_FILE, config.to_toml_string()?.as_bytes())?;
    let csv_path = run_dir.file(DIAGNOSTICS_FILE)?;
    let irl_config = config.irl_config();
    let mut runner = if options.resume {
        let ckpt_path = run_dir.file(CHECKPOINT_FILE)?;
        let file = fs::File::open(&ckpt_path).map_err(io_err(&ckpt_path))?;
        let checkpoint: IrlCheckpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Json {
                path: ckpt_path.clone(),
                source,
            })?;
        if checkpoint.config != irl_config {
            return Err(CliError::Input {
                path: ckpt_path,
                reason: "checkpoint was written under a different configuration".into(),
            });
        }
        // Drop rows past the checkpoint so the continuation appends cleanly.
        let kept: Vec<_> = read_diagnostics(&csv_path)?
            .into_iter()
            .filter(|r| r.k < checkpoint.iteration)
            .collect();
        run_dir.write_atomic(DIAGNOSTICS_FILE, &diagnostics_bytes(&kept)?)?;
        info!("{}: resuming at k = {}", run_dir.path().display(), checkpoint.iteration);
        IrlRunner::resume(mdp, features, demos, checkpoint)?
    } else {
        run_dir.write_atomic(DIAGNOSTICS_FILE, &diagnostics_bytes(&[])?)?;
        IrlRunner::new(mdp, features, demos, irl_config)?
    };

    let file = fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(io_err(&csv_path))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let stop = options.stop_after.unwrap_or(usize::MAX);
    let every = config.algorithm.checkpoint_interval;
    while !runner.is_finished() && runner.iteration() < stop {
        if let Some(record) = runner.step()? {
            writer.serialize(record).map_err(csv_err(&csv_path))?;
            writer.flush().map_err(io_err(&csv_path))?;
        }
        if runner.iteration().is_multiple_of(every) {
            write_checkpoint(run_dir, &runner, config)?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Io {
            path: csv_path.clone(),
            source: e.into_error(),
        })?
        .flush()
        .map_err(io_err(&csv_path))?;
    let status = write_checkpoint(run_dir, &runner, config)?;
    if status.finished {
        info!(
            "{}: finished K = {} outer iterations, {} inner TD steps",
            run_dir.path().display(),
            status.iterations,
            status.inner_td_steps
        );
    } else {
        info!(
            "{}: stopped after {} of {} outer iterations, {} inner TD steps",
            run_dir.path().display(),
            status.completed,
            status.iterations,
            status.inner_td_steps
        );
    }
    Ok(status)
}
