use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlirl_cli::commands::{cmd_gen_demos, cmd_gen_env, cmd_run, RunOptions};
use mlirl_cli::config::ExperimentConfig;
use mlirl_cli::output::{check_relative, OutputDir, OUTPUT_ROOT_ENV};
use mlirl_cli::report::{summarize, write_report};
use mlirl_cli::Result;
use mlirl_core::irl::Variant;

#[derive(Parser)]
#[command(name = "mlirl", version, about = "Maximum-likelihood inverse RL experiments")]
struct Cli {
    /// Directory all outputs are written under.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = ".")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the environment and write `env.json`.
    GenEnv(ConfigArgs),
    /// Roll out the soft-optimal expert and write `demos.jsonl` plus `expert.json`.
    GenDemos {
        #[command(flatten)]
        config: ConfigArgs,
        /// Environment file; defaults to the experiment's `env.json`.
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Run the configured algorithm.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Expert sidecar; defaults to `expert.json` next to the demonstrations.
        #[arg(long)]
        expert: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit once this many outer iterations are done.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Comma-separated seeds, run concurrently into `sweep/seed-N`.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<u64>,
    },
    /// Summarize run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write summary files into this directory below the output root.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Configuration file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    diagnostics_interval: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "nested" => Ok(Variant::Nested),
        "single_loop" | "single-loop" => Ok(Variant::SingleLoop),
        other => Err(format!("unknown variant {other:?}")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.discount {
            use mlirl_cli::config::EnvironmentSpec::*;
            match &mut c.environment {
                Gridworld(g) => g.discount = v,
                Random(r) => r.discount = v,
            }
        }
        if let Some(v) = self.width {
            c.network.width = v;
        }
        if let Some(v) = self.dim {
            c.network.dim = v;
        }
        if let Some(v) = self.radius {
            c.network.radius = v;
        }
        if let Some(v) = self.variant {
            c.algorithm.variant = v;
        }
        if let Some(v) = self.iterations {
            c.algorithm.iterations = v;
        }
        if let Some(v) = self.alpha0 {
            c.algorithm.alpha0 = v;
        }
        if let Some(v) = self.sigma {
            c.algorithm.sigma = v;
        }
        if let Some(v) = self.diagnostics_interval {
            c.algorithm.diagnostics_interval = v;
        }
        if let Some(v) = self.checkpoint_interval {
            c.algorithm.checkpoint_interval = v;
        }
        if let Some(v) = self.n_traj {
            c.dataset.n_traj = v;
        }
        if self.horizon.is_some() {
            c.dataset.horizon = self.horizon;
        }
        c.resolved()
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = &cli.output_root;
    match cli.command {
        Command::GenEnv(args) => {
            cmd_gen_env(&args.resolve()?, root)?;
        }
        Command::GenDemos { config, env } => {
            cmd_gen_demos(&config.resolve()?, root, env.as_deref())?;
        }
        Command::Run {
            config,
            env,
            demos,
            expert,
            resume,
            stop_after,
            sweep,
        } => {
            let options = RunOptions {
                env,
                demos,
                expert,
                resume,
                stop_after,
                sweep_seeds: sweep,
            };
            cmd_run(&config.resolve()?, root, &options)?;
        }
        Command::Report { runs, output } => {
            if let Some(rel) = &output {
                check_relative(rel)?;
            }
            let report = summarize(&runs)?;
            if let Some(rel) = output {
                write_report(&report, &OutputDir::create(root, &rel)?)?;
            }
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
