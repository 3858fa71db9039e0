//! Operator-facing command surface: data generation, training, evaluation,
//! planning, and benchmarking as reproducible subcommands.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional
//! key=value config file, and flag overrides (flags win), then writes its
//! artifacts plus the resolved config and a hashed [`Manifest`] into a
//! dedicated output directory guarded by an advisory lock file. A command
//! is a pure function of its resolved config and flags: running it twice
//! produces byte-identical artifacts, manifest timestamp aside.

mod commands;
mod config;
mod manifest;

use thiserror::Error;

use crate::evalkit::EvalError;
use crate::navsim::SimError;
use crate::planner::PlanError;
use crate::worldmodel::WmError;

pub use commands::{
    cmd_bench, cmd_eval_gen, cmd_eval_nav, cmd_gen_data, cmd_plan, cmd_train, parse_goal,
    parse_seed_list, GoalArg,
};
pub use config::RunConfig;
pub use manifest::{load_manifest, sha256_file, write_manifest, Manifest, OutDir};

/// Anything a subcommand can fail with. All variants map to exit code 1;
/// flag parsing (exit code 2) never reaches this type.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration: unknown key, unparsable value, invalid combination.
    #[error("config: {0}")]
    Config(String),
    /// The output directory is claimed by another (or a crashed) command.
    #[error("output directory '{dir}' is locked; remove '{lock}' if no other command is running")]
    Locked { dir: String, lock: String },
    /// An artifact hash does not match its manifest.
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] WmError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
