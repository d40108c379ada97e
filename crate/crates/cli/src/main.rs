use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use branchgen_cli::pipeline::{CANDIDATES_FILE, DATASET_FILE, MANIFEST_FILE};
use branchgen_cli::{plot, report, Pipeline, RunConfig, Stage};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "branchgen", version, about = "Diffusion-based trajectory branch generation for decision transformers")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use this seed for every stage run by this invocation.
    #[arg(long, global = true)]
    stage_seed_override: Option<u64>,
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Train or evaluate the DT on the unexpanded dataset.
    #[arg(long, global = true)]
    baseline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted routes into an offline dataset.
    Collect,
    /// Train the trajectory value function.
    TrainTvf,
    /// Train the conditional diffusion model.
    TrainDiffusion,
    /// Generate, score and filter branch candidates.
    GenBranches,
    /// Append accepted branches to the dataset.
    Expand,
    /// Train the decision transformer.
    TrainDt,
    /// Evaluate the decision transformer in the maze.
    Eval,
    /// Every stage in order, then the paired baseline.
    All,
    /// Draw the dataset and accepted branches as SVG.
    Plot {
        /// Output file; defaults to branches.svg in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize a finished run.
    Report,
}

fn run(cli: Cli, config: RunConfig) -> anyhow::Result<()> {
    let stage = match &cli.command {
        Command::Collect => Some(Stage::Collect),
        Command::TrainTvf => Some(Stage::TrainTvf),
        Command::TrainDiffusion => Some(Stage::TrainDiffusion),
        Command::GenBranches => Some(Stage::GenBranches),
        Command::Expand => Some(Stage::Expand),
        Command::TrainDt => Some(Stage::TrainDt),
        Command::Eval => Some(Stage::Eval),
        Command::All | Command::Plot { .. } | Command::Report => None,
    };
    match cli.command {
        Command::Plot { output } => {
            let spec = config.maze_spec()?;
            let out = output.unwrap_or_else(|| cli.out_dir.join("branches.svg"));
            plot::plot_branches(&spec, &cli.out_dir.join(DATASET_FILE), &cli.out_dir.join(CANDIDATES_FILE), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Report => {
            let pipeline = Pipeline::open(config, &cli.out_dir, None)?;
            print!("{}", report::report(&pipeline.out_dir().join(MANIFEST_FILE))?);
        }
        Command::All => {
            let mut pipeline = Pipeline::open(config, &cli.out_dir, cli.stage_seed_override)?;
            pipeline.run_all()?;
            print!("{}", report::report(&pipeline.out_dir().join(MANIFEST_FILE))?);
        }
        _ => {
            let stage = stage.expect("every remaining command is a stage");
            let mut pipeline = Pipeline::open(config, &cli.out_dir, cli.stage_seed_override)?;
            pipeline.run(stage, cli.baseline)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config <PATH> is required");
        return ExitCode::from(1);
    };
    let config = match RunConfig::load(&config_path).with_context(|| format!("loading {}", config_path.display())) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
