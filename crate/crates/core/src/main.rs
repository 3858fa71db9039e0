//! `navwm` — the navigation world-model pipeline as subcommands.
//!
//! Every subcommand resolves one [`RunConfig`] from defaults, an optional
//! `--config` key=value file, repeatable `--set KEY=VALUE` overrides, and
//! its dedicated flags (most specific wins), then writes artifacts plus
//! `config.resolved` and a hashed manifest into `--out`. Exit codes: 0 on
//! success, 1 on runtime failure, 2 on flag errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use navwm::cli::{
    cmd_bench, cmd_eval_gen, cmd_eval_nav, cmd_gen_data, cmd_plan, cmd_train, parse_goal,
    parse_seed_list, CliError, RunConfig,
};
use navwm::evalkit::GoalKind;
use navwm::navsim::Family;

#[derive(Parser)]
#[command(name = "navwm", version, about = "Train, evaluate, and plan with a one-step navigation world model")]
struct Cli {
    /// Key=value config file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.width=32 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset with rendered frames.
    GenData {
        /// World family: empty or sparse.
        #[arg(long)]
        family: Option<Family>,
        /// Comma-separated world seeds; default is world_seed..world_seed+worlds.
        #[arg(long)]
        seeds: Option<String>,
        /// Trajectories collected per world.
        #[arg(long)]
        traj_per_world: Option<usize>,
        /// Steps per trajectory.
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the world model on a dataset, from scratch or a checkpoint.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to fine-tune from; its architecture must match the config.
        #[arg(long)]
        pretrain_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one-step generation (PSNR/SSIM) on held-out trajectories.
    EvalGen {
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a closed-loop navigation suite and report SR/SPL.
    EvalNav {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        /// Plan against ground-truth renders instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
        /// Goal modality for every episode: point, image, or language.
        #[arg(long)]
        suite: GoalKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one planning call and dump frames, candidates, and scores.
    Plan {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        /// Plan against ground-truth renders instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
        #[arg(long)]
        world_seed: u64,
        /// point:X,Y (robot-relative), image:X,Y,PHI (world pose), or language:PHRASE.
        #[arg(long)]
        goal: String,
        /// External language scorer: program followed by its arguments.
        #[arg(long, num_args = 1.., value_name = "CMD")]
        scorer: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure batched vs sequential prediction latency and forward counts.
    Bench {
        /// Checkpoint to time; omitted means freshly initialized weights.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set '{s}' is not KEY=VALUE"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let resolve = |extra: Vec<(String, String)>| -> Result<RunConfig, CliError> {
        let mut all = overrides.clone();
        all.extend(extra);
        RunConfig::resolve(cli.config.as_deref(), &all)
    };
    match &cli.command {
        Command::GenData { family, seeds, traj_per_world, len, out } => {
            let mut extra = Vec::new();
            if let Some(f) = family {
                extra.push(("family".to_string(), f.to_string()));
            }
            if let Some(n) = traj_per_world {
                extra.push(("traj_per_world".to_string(), n.to_string()));
            }
            if let Some(n) = len {
                extra.push(("traj_len".to_string(), n.to_string()));
            }
            let cfg = resolve(extra)?;
            let seeds = seeds.as_deref().map(parse_seed_list).transpose()?;
            cmd_gen_data(&cfg, seeds.as_deref(), out)?;
        }
        Command::Train { data, pretrain_ckpt, out } => {
            let cfg = resolve(Vec::new())?;
            cmd_train(&cfg, data, pretrain_ckpt.as_deref(), out)?;
        }
        Command::EvalGen { ckpt, data, out } => {
            let cfg = resolve(Vec::new())?;
            cmd_eval_gen(&cfg, ckpt, data, out)?;
        }
        Command::EvalNav { ckpt, oracle: _, suite, out } => {
            let cfg = resolve(Vec::new())?;
            cmd_eval_nav(&cfg, ckpt.as_deref(), *suite, out)?;
        }
        Command::Plan { ckpt, oracle: _, world_seed, goal, scorer, out } => {
            let cfg = resolve(Vec::new())?;
            let goal = parse_goal(goal)?;
            cmd_plan(&cfg, ckpt.as_deref(), *world_seed, &goal, scorer.as_deref(), out)?;
        }
        Command::Bench { ckpt, out } => {
            let cfg = resolve(Vec::new())?;
            cmd_bench(&cfg, ckpt.as_deref(), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
