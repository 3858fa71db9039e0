//! The six subcommand bodies. Each claims its output directory, invokes
//! the pipeline modules, and leaves behind artifacts, `config.resolved`,
//! and a hashed manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::evalkit::{
    bench_latency, build_suite, run_closed_loop, run_open_loop, ClosedLoopSummary, GenEvalReport,
    GoalKind, LatencyReport,
};
use crate::navsim::{
    collect_trajectory, generate_world, observation_to_pgm, observation_to_ppm, render,
    sample_free_pose, save_dataset, OccupancyGrid, Pose, Trajectory, ROBOT_RADIUS,
};
use crate::planner::{
    cem_plan_with_scorer, ExternalScorer, GoalSpec, IterationStats, LanguageScorer, PlanResult,
    Predictor,
};
use crate::worldmodel::{load_model, params_hash, save_model, train, Model, TrainReport};
use crate::thread_budget;

use super::config::RunConfig;
use super::manifest::{manifest_id, sha256_file, OutDir};
use super::CliError;

/// Odd multiplier mixing an index into a seed stream.
const SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Parses `--seeds 0,1,7` into a list of distinct world seeds.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, CliError> {
    let mut seeds = Vec::new();
    for part in s.split(',') {
        let t = part.trim();
        let seed: u64 = t
            .parse()
            .map_err(|_| CliError::Config(format!("bad world seed '{t}' in '{s}'")))?;
        if seeds.contains(&seed) {
            return Err(CliError::Config(format!("duplicate world seed {seed}")));
        }
        seeds.push(seed);
    }
    Ok(seeds)
}

/// Generates worlds and collects trajectories into a dataset directory.
///
/// World seeds come from `seeds` when given, else from the config range
/// `world_seed .. world_seed + worlds`. Collection parallelizes across
/// trajectories up to the thread budget; output order and bytes are
/// independent of the worker count.
pub fn cmd_gen_data(cfg: &RunConfig, seeds: Option<&[u64]>, out: &Path) -> Result<usize, CliError> {
    let range: Vec<u64> = (0..cfg.worlds as u64).map(|i| cfg.world_seed + i).collect();
    let seeds = match seeds {
        Some(s) if s.is_empty() => {
            return Err(CliError::Config("world seed list is empty".into()));
        }
        Some(s) => s.to_vec(),
        None => range,
    };
    let dir = OutDir::claim(out)?;

    let mut tasks = Vec::new();
    for &ws in &seeds {
        let world = generate_world(cfg.family, ws)?;
        for t in 0..cfg.traj_per_world {
            let seed = ws ^ SEED_MIX.wrapping_mul(t as u64 + 1);
            tasks.push((world.clone(), seed));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget().min(tasks.len()))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let trajs: Vec<Trajectory> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(world, seed)| collect_trajectory(world, cfg.traj_len, *seed))
            .collect::<Result<_, _>>()
    })?;
    save_dataset(dir.path(), &trajs)?;
    let n = trajs.len();
    dir.finish(cfg, "gen-data", Vec::new())?;
    println!(
        "wrote {n} trajectories × {} steps ({} worlds, family {}) to {}",
        cfg.traj_len,
        seeds.len(),
        cfg.family,
        out.display()
    );
    Ok(n)
}

/// Lineage id for an input directory: verifies the manifest when one is
/// present (corrupt artifacts are a hard error) and returns `None` for
/// hand-assembled directories that never had one.
fn input_lineage(dir: &Path) -> Result<Option<String>, CliError> {
    if !dir.join(super::manifest::MANIFEST_FILE).is_file() {
        return Ok(None);
    }
    super::manifest::load_manifest(dir)?;
    Ok(Some(manifest_id(dir)?))
}

/// Loads a checkpoint and rejects it when its architecture disagrees with
/// the run config, so a finetune cannot silently change shape.
fn load_matching_model(ckpt: &Path, cfg: &RunConfig) -> Result<Model, CliError> {
    let model = load_model(ckpt)?;
    if model.config != cfg.model {
        return Err(CliError::Config(format!(
            "checkpoint '{}' was built with a different model config; \
             set the model.* keys to match ({:?})",
            ckpt.display(),
            model.config
        )));
    }
    Ok(model)
}

/// Everything `train` leaves behind besides the checkpoint itself.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub params_sha256: String,
    pub data_dir: String,
    pub pretrain_ckpt: Option<String>,
}

/// Trains a model on a dataset, from scratch or from a checkpoint, and
/// writes `model.nwm` plus a training report.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    pretrain: Option<&Path>,
    out: &Path,
) -> Result<TrainReport, CliError> {
    let mut parents = Vec::new();
    if let Some(id) = input_lineage(data)? {
        parents.push(id);
    }
    let trajs = crate::navsim::load_dataset(data)?;
    let mut model = match pretrain {
        Some(ckpt) => {
            parents.push(sha256_file(ckpt)?);
            load_matching_model(ckpt, cfg)?
        }
        None => Model::new(cfg.model.clone())?,
    };
    let dir = OutDir::claim(out)?;
    let train_cfg = cfg.train.to_train_config(Some(dir.path().to_path_buf()));
    let report = train(&mut model, &trajs, &train_cfg)?;
    save_model(&dir.join("model.nwm"), &model)?;
    let summary = TrainSummary {
        report: report.clone(),
        params_sha256: params_hash(&model)?,
        data_dir: data.display().to_string(),
        pretrain_ckpt: pretrain.map(|p| p.display().to_string()),
    };
    write_json(&dir.join("report.json"), &summary)?;
    dir.finish(cfg, "train", parents)?;
    println!(
        "trained {} steps on {} trajectories: train loss {:.4}, val loss {:?} -> {:?}",
        report.steps,
        trajs.len(),
        report.final_train_loss,
        report.initial_val_loss,
        report.final_val_loss
    );
    Ok(report)
}

/// Scores one-step generation on held-out trajectories and writes the
/// per-frame PSNR/SSIM report.
pub fn cmd_eval_gen(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
) -> Result<GenEvalReport, CliError> {
    let model = load_model(ckpt)?;
    let mut parents = vec![sha256_file(ckpt)?];
    if let Some(id) = input_lineage(data)? {
        parents.push(id);
    }
    let trajs = crate::navsim::load_dataset(data)?;
    let dir = OutDir::claim(out)?;
    let report = run_open_loop(&model, &trajs, cfg.eval_instances, cfg.seed)?;
    write_json(&dir.join("report.json"), &report)?;
    dir.finish(cfg, "eval-gen", parents)?;
    println!(
        "{} instances: mean PSNR {:.2} dB (copy-context baseline {:.2}), mean SSIM {:.4} (baseline {:.4})",
        report.instances.len(),
        report.mean_psnr,
        report.baseline_psnr,
        report.mean_ssim,
        report.baseline_ssim
    );
    Ok(report)
}

/// Runs a closed-loop navigation suite and writes the episode log and
/// summary. With no checkpoint the planner scores ground-truth renders
/// instead of model predictions, which benchmarks the planner alone.
pub fn cmd_eval_nav(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    suite: GoalKind,
    out: &Path,
) -> Result<ClosedLoopSummary, CliError> {
    let mut parents = Vec::new();
    let model = match ckpt {
        Some(p) => {
            parents.push(sha256_file(p)?);
            Some(load_model(p)?)
        }
        None => None,
    };
    let episodes = build_suite(
        cfg.family,
        suite,
        cfg.worlds,
        cfg.episodes_per_world,
        cfg.seed,
        cfg.plan.topo_stride,
    )?;
    let dir = OutDir::claim(out)?;
    let (_, summary) =
        run_closed_loop(&episodes, model.as_ref(), &cfg.plan, Some(&dir.join("episodes.jsonl")))?;
    write_json(&dir.join("summary.json"), &summary)?;
    dir.finish(cfg, "eval-nav", parents)?;
    println!(
        "{} {} episodes: SR {:.2}, SPL {:.2}, mean plan time {:.3} s ({} errors)",
        summary.episodes, suite, summary.sr, summary.spl, summary.mean_plan_time_s, summary.errors
    );
    Ok(summary)
}

/// Goal flag for one planning call: `point:X,Y` (meters ahead/left of the
/// robot), `image:X,Y,PHI` (render the view from that world pose as the
/// goal), or `language:PHRASE`.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalArg {
    Point { x: f32, y: f32 },
    Image { x: f32, y: f32, phi: f32 },
    Language(String),
}

pub fn parse_goal(s: &str) -> Result<GoalArg, CliError> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("goal '{s}' is not KIND:ARGS")))?;
    let nums = |expect: usize| -> Result<Vec<f32>, CliError> {
        let vals: Result<Vec<f32>, _> = rest.split(',').map(|p| p.trim().parse::<f32>()).collect();
        let vals =
            vals.map_err(|_| CliError::Config(format!("goal '{s}': expected {expect} numbers")))?;
        if vals.len() != expect {
            return Err(CliError::Config(format!(
                "goal '{s}': expected {expect} numbers, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    match kind {
        "point" => {
            let v = nums(2)?;
            Ok(GoalArg::Point { x: v[0], y: v[1] })
        }
        "image" => {
            let v = nums(3)?;
            Ok(GoalArg::Image { x: v[0], y: v[1], phi: v[2] })
        }
        "language" => {
            if rest.trim().is_empty() {
                return Err(CliError::Config("language goal has no phrase".into()));
            }
            Ok(GoalArg::Language(rest.trim().to_string()))
        }
        other => Err(CliError::Config(format!(
            "unknown goal kind '{other}' (expected point, image, or language)"
        ))),
    }
}

/// What one planning call saw and decided, for the dump.
#[derive(Debug, Clone, Serialize)]
pub struct PlanDump {
    pub world_seed: u64,
    pub family: String,
    pub start: [f32; 3],
    pub goal: String,
    pub best_score: f32,
    pub best_controls: Vec<(f32, f32)>,
    pub best_waypoints: Vec<[f32; 3]>,
    pub iterations: Vec<IterationStats>,
    pub scored_candidates: usize,
}

fn dump_observation(dir: &OutDir, stem: &str, obs: &crate::navsim::Observation) -> Result<(), CliError> {
    fs::write(dir.join(&format!("{stem}.ppm")), observation_to_ppm(obs))?;
    fs::write(dir.join(&format!("{stem}.pgm")), observation_to_pgm(obs))?;
    Ok(())
}

/// Runs one planning call from a sampled pose and dumps the predicted
/// frames (PPM color + PGM depth), every scored candidate, and the chosen
/// plan. With no checkpoint the ground-truth renderer predicts instead.
pub fn cmd_plan(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    world_seed: u64,
    goal: &GoalArg,
    scorer_cmd: Option<&[String]>,
    out: &Path,
) -> Result<PlanResult, CliError> {
    let mut parents = Vec::new();
    let model = match ckpt {
        Some(p) => {
            parents.push(sha256_file(p)?);
            Some(load_model(p)?)
        }
        None => None,
    };
    let world = generate_world(cfg.family, world_seed)?;
    let grid = OccupancyGrid::build(&world, ROBOT_RADIUS);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ SEED_MIX.wrapping_mul(world_seed + 1));
    let start = sample_free_pose(&world, &grid, &mut rng)?;
    let ctx = render(&world, &start)?;

    let dir = OutDir::claim(out)?;
    let (goal_spec, goal_desc) = match goal {
        GoalArg::Point { x, y } => (GoalSpec::Point { x: *x, y: *y }, format!("point:{x},{y}")),
        GoalArg::Image { x, y, phi } => {
            let view = render(&world, &Pose::new(*x, *y, *phi))?;
            dump_observation(&dir, "goal", &view)?;
            (GoalSpec::Image(view), format!("image:{x},{y},{phi}"))
        }
        GoalArg::Language(text) => {
            (GoalSpec::Language(text.clone()), format!("language:{text}"))
        }
    };
    let mut scorer = match scorer_cmd {
        Some(cmd) => {
            let (program, args) = cmd.split_first().expect("non-empty scorer command");
            LanguageScorer::External(ExternalScorer::spawn(
                program,
                args,
                Duration::from_secs(5),
            )?)
        }
        None => LanguageScorer::Builtin,
    };
    let predictor = match &model {
        Some(m) => Predictor::Learned(m),
        None => Predictor::Oracle { world: &world, pose: start },
    };
    let result = cem_plan_with_scorer(&ctx, &goal_spec, &predictor, &mut scorer, &cfg.plan, &mut rng)?;

    dump_observation(&dir, "context", &ctx)?;
    let frames = predictor
        .predict(&ctx, std::slice::from_ref(&result.best_waypoints), &mut rng)?
        .pop()
        .expect("one prediction per request");
    for (i, frame) in frames.iter().enumerate() {
        dump_observation(&dir, &format!("pred_{i:02}"), frame)?;
    }
    let mut log = BufWriter::new(File::create(dir.join("candidates.jsonl"))?);
    for cand in &result.scored {
        serde_json::to_writer(&mut log, cand)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    let dump = PlanDump {
        world_seed,
        family: cfg.family.to_string(),
        start: [start.x, start.y, start.phi],
        goal: goal_desc,
        best_score: result.best_score,
        best_controls: result.best.0.clone(),
        best_waypoints: result.best_waypoints.0.clone(),
        iterations: result.iterations.clone(),
        scored_candidates: result.scored.len(),
    };
    write_json(&dir.join("plan.json"), &dump)?;
    dir.finish(cfg, "plan", parents)?;
    println!(
        "planned {} candidates over {} iterations: best score {:.4}, dumped {} frames to {}",
        result.scored.len(),
        result.iterations.len(),
        result.best_score,
        frames.len(),
        out.display()
    );
    Ok(result)
}

/// Measures batched vs sequential prediction latency and the forward
/// counts behind the one-pass claims, writing the report as JSON.
pub fn cmd_bench(cfg: &RunConfig, ckpt: Option<&Path>, out: &Path) -> Result<LatencyReport, CliError> {
    let mut parents = Vec::new();
    let model = match ckpt {
        Some(p) => {
            parents.push(sha256_file(p)?);
            load_model(p)?
        }
        None => Model::new(cfg.model.clone())?,
    };
    let dir = OutDir::claim(out)?;
    let report = bench_latency(&model, cfg.plan.samples, cfg.bench_trials, cfg.seed)?;
    write_json(&dir.join("report.json"), &report)?;
    dir.finish(cfg, "bench", parents)?;
    println!(
        "batched {:.4} s vs sequential {:.4} s over {} candidates ({:.2}x); \
         {} forward per prediction, {} sequences per plan",
        report.batched_s,
        report.sequential_s,
        report.candidates,
        report.speedup,
        report.forwards_per_prediction,
        report.sequences_per_plan
    );
    Ok(report)
}
