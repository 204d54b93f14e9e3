//! Experiment driver behind the `lapo-lab` binary: demo generation, latent
//! precompute, warm-up, RL post-training, evaluation, sweeps and replay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lapo::config::{Baseline, ExperimentConfig, LengthMode, SuiteSel};
use lapo::demo::{read_demos, write_demos};
use lapo::env::{scripted_expert, ChunkGridEnv, DemoTrajectory, TaskSpec};
use lapo::eval::{evaluate_expert, evaluate_policy, tokens_to_chunk, EvalReport};
use lapo::lapo::{eval_latent_mode, split_holdout, train_rl, RlRun, RolloutBuffer};
use lapo::latent::LatentCache;
use lapo::metrics::{JsonlWriter, RlMetrics, RunManifest};
use lapo::net::candidate_positions;
use lapo::params::{Checkpoint, PolicyParams};
use lapo::sft::{train_sft, SftRun};
use lapo::{LapoError, Result};
use rayon::prelude::*;

#[derive(Debug, Parser)]
#[command(name = "lapo-lab", version, about = "Latent-reasoning policy experiments on a toy manipulation grid")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single rollout worker for bit-exact reproduction.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// reach, pickplace, sequence or all.
    #[arg(long, global = true)]
    pub suite: Option<SuiteSel>,
    #[arg(long, global = true)]
    pub holdout_variant: Option<u32>,
    /// lapo or ppo-action-only.
    #[arg(long, global = true)]
    pub baseline: Option<Baseline>,
    /// fixed:N or adaptive.
    #[arg(long, global = true)]
    pub latent_mode: Option<LengthMode>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub demos_per_task: Option<usize>,
    /// Output root.
    #[arg(long, global = true, env = "LAPO_LAB_DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Roll the scripted expert on every selected variant.
    GenDemos,
    /// Compute top-k latent targets for every demo step.
    PrecomputeLatents,
    /// Supervised warm-up from the demos and cached latents.
    Sft,
    /// RL post-training from a warm-up checkpoint.
    Rl {
        /// Starting checkpoint; defaults to this seed's warm-up checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Write the final rollout buffer here.
        #[arg(long)]
        dump_rollouts: Option<PathBuf>,
    },
    /// Greedy evaluation with a per-variant success table.
    Eval {
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
        /// Episodes per variant; defaults to the RL eval setting.
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Warm-up plus RL for every point of a parameter grid.
    Ablate {
        /// `key=v1,v2,...` with key in sigma, lambda1, lambda2, lambda3,
        /// beta, nz, m. Repeat for a product grid.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Re-simulate a dumped rollout and draw every decision step.
    Replay {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        traj: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenDemos => "gen-demos",
            Command::PrecomputeLatents => "precompute-latents",
            Command::Sft => "sft",
            Command::Rl { .. } => "rl",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Loads the config, applies flag overrides and the baseline mapping,
/// validates, and anchors every path under the output root.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(s) = common.suite {
        cfg.suite = s;
    }
    if common.holdout_variant.is_some() {
        cfg.holdout_variant = common.holdout_variant;
    }
    if let Some(b) = common.baseline {
        cfg.baseline = b;
    }
    if let Some(m) = common.latent_mode {
        cfg.latent_mode = m;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(n) = common.demos_per_task {
        cfg.demos_per_task = n;
    }
    if let Some(o) = &common.out_dir {
        cfg.paths.out_dir = o.clone();
    }
    if cfg.jobs == 0 {
        return Err(LapoError::Config("jobs must be positive".into()));
    }
    if cfg.demos_per_task == 0 {
        return Err(LapoError::Config("demos_per_task must be positive".into()));
    }
    cfg.apply_baseline();
    cfg.validate()?;
    let cwd = std::env::current_dir().map_err(|e| LapoError::io(Path::new("."), e))?;
    cfg.paths = cfg.paths.resolve(Some(&cwd));
    Ok(cfg)
}

/// Worker count for rollouts; one when deterministic.
fn workers(cfg: &ExperimentConfig) -> usize {
    if cfg.deterministic {
        1
    } else {
        cfg.jobs
    }
}

fn mode_tag(mode: LengthMode) -> String {
    match mode {
        LengthMode::Fixed(n) => format!("fixed{n}"),
        LengthMode::Adaptive => "adaptive".into(),
    }
}

pub fn sft_name(cfg: &ExperimentConfig) -> String {
    format!("sft-seed{}", cfg.seed)
}

pub fn rl_name(cfg: &ExperimentConfig) -> String {
    let base = match cfg.baseline {
        Baseline::Lapo => "lapo",
        Baseline::PpoActionOnly => "ppo",
    };
    format!("rl-{base}-{}-seed{}", mode_tag(cfg.latent_mode), cfg.seed)
}

fn stdout_err(e: std::io::Error) -> LapoError {
    LapoError::io(Path::new("<stdout>"), e)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

/// Runs one parsed command line.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenDemos => gen_demos(&cfg, out),
        Command::PrecomputeLatents => precompute_latents(&cfg, out),
        Command::Sft => {
            let (demos, cache) = load_training_data(&cfg)?;
            let path = run_sft(&cfg, &demos, &cache)?;
            say!(out, "warm-up checkpoint {}", path.display());
            Ok(())
        }
        Command::Rl { init, dump_rollouts } => {
            let init = init
                .clone()
                .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(format!("{}.ckpt", sft_name(&cfg))));
            let (path, metrics) = run_rl(&cfg, &init, dump_rollouts.clone())?;
            for m in metrics.iter().filter(|m| m.seen_success.is_some()) {
                say!(out, "{}", eval_line(m));
            }
            say!(out, "checkpoint {}", path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            expert,
            rollouts,
        } => eval(&cfg, checkpoint.as_deref(), *expert, *rollouts, out),
        Command::Ablate { grid } => ablate(&cfg, grid, out),
        Command::Replay { file, traj } => replay(file, *traj, cfg.horizon, out),
    }
}

fn manifest(cfg: &ExperimentConfig, command: &str, dir: &Path) -> Result<()> {
    RunManifest::new(command, cfg.seed, cfg.deterministic, cfg)?.write(dir)?;
    Ok(())
}

/// Demo tasks: the selected suites minus any held-out variant.
pub fn demo_tasks(cfg: &ExperimentConfig) -> Vec<TaskSpec> {
    split_holdout(&cfg.suite.tasks(), cfg.holdout_variant).0
}

pub fn gen_demos(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let mut demos = Vec::new();
    for task in demo_tasks(cfg) {
        for j in 0..cfg.demos_per_task {
            demos.push(scripted_expert(task, j as u64, cfg.horizon)?);
        }
    }
    write_demos(&cfg.paths.demos, &demos)?;
    manifest(cfg, "gen-demos", &cfg.paths.out_dir.join("gen-demos"))?;
    let steps: usize = demos.iter().map(|d| d.micro_steps()).sum();
    say!(
        out,
        "{} demos ({} micro-steps) written to {}",
        demos.len(),
        steps,
        cfg.paths.demos.display()
    );
    Ok(())
}

pub fn precompute_latents(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let demos = read_demos(&cfg.paths.demos, cfg.horizon)?;
    let cache = LatentCache::precompute(&demos, &cfg.latent)?;
    cache.write(&cfg.paths.cache)?;
    manifest(cfg, "precompute-latents", &cfg.paths.out_dir.join("precompute-latents"))?;
    say!(out, "{} latent targets written to {}", cache.len(), cfg.paths.cache.display());
    Ok(())
}

pub fn load_training_data(cfg: &ExperimentConfig) -> Result<(Vec<DemoTrajectory>, LatentCache)> {
    let demos = read_demos(&cfg.paths.demos, cfg.horizon)?;
    let cache = LatentCache::read(&cfg.paths.cache, cfg.latent.k)?;
    Ok((demos, cache))
}

/// Warm-up run; returns the checkpoint path.
pub fn run_sft(cfg: &ExperimentConfig, demos: &[DemoTrajectory], cache: &LatentCache) -> Result<PathBuf> {
    run_sft_named(cfg, demos, cache, &sft_name(cfg))
}

fn run_sft_named(cfg: &ExperimentConfig, demos: &[DemoTrajectory], cache: &LatentCache, name: &str) -> Result<PathBuf> {
    let dir = cfg.paths.metrics_dir.join(name);
    manifest(cfg, "sft", &dir)?;
    let mut writer = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
    let candidates = candidate_positions(cfg.model.n_max, cfg.rl.candidates)?;
    let run = SftRun {
        config: &cfg.sft,
        mode: cfg.latent_mode,
        candidates: &candidates,
        seed: cfg.seed,
    };
    let init = PolicyParams::init(cfg.model, cfg.seed)?;
    let outcome = train_sft(&run, demos, cache, init, |m| writer.write(m))?;
    let path = cfg.paths.checkpoint_dir.join(format!("{name}.ckpt"));
    Checkpoint {
        params: outcome.params,
        moments: Some(outcome.moments),
    }
    .write(&path)?;
    Ok(path)
}

/// RL run from `init`; returns the final checkpoint path and the metrics.
pub fn run_rl(cfg: &ExperimentConfig, init: &Path, dump: Option<PathBuf>) -> Result<(PathBuf, Vec<RlMetrics>)> {
    run_rl_named(cfg, init, dump, &rl_name(cfg), workers(cfg))
}

fn run_rl_named(
    cfg: &ExperimentConfig,
    init: &Path,
    dump: Option<PathBuf>,
    name: &str,
    jobs: usize,
) -> Result<(PathBuf, Vec<RlMetrics>)> {
    let start = Checkpoint::read(init)?;
    if start.params.dims() != &cfg.model {
        return Err(LapoError::Config(format!(
            "{} has model dims {:?}, config wants {:?}",
            init.display(),
            start.params.dims(),
            cfg.model
        )));
    }
    let (train, held) = split_holdout(&cfg.suite.tasks(), cfg.holdout_variant);
    let dir = cfg.paths.metrics_dir.join(name);
    manifest(cfg, "rl", &dir)?;
    let mut writer = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
    let run = RlRun {
        config: &cfg.rl,
        mode: cfg.latent_mode,
        baseline: cfg.baseline,
        train_tasks: &train,
        holdout_tasks: &held,
        seed: cfg.seed,
        jobs,
        checkpoint_dir: Some(cfg.paths.checkpoint_dir.join(name)),
        dump_rollouts: dump,
    };
    let outcome = train_rl(&run, start.params, |m, _| writer.write(m))?;
    let path = cfg.paths.checkpoint_dir.join(format!("{name}.ckpt"));
    Checkpoint {
        params: outcome.params,
        moments: Some(outcome.moments),
    }
    .write(&path)?;
    Ok((path, outcome.metrics))
}

fn eval_line(m: &RlMetrics) -> String {
    let held = m.holdout_success.map(|h| format!(" holdout {h:.3}")).unwrap_or_default();
    format!(
        "update {:>4}  seen {:.3}{held}  steps {:.2}",
        m.update,
        m.seen_success.unwrap_or(f64::NAN),
        m.mean_episode_steps.unwrap_or(f64::NAN)
    )
}

fn print_report(out: &mut dyn Write, suite: &str, r: &EvalReport) -> Result<()> {
    say!(out, "suite {suite}");
    write!(out, "{}", r.table()).map_err(stdout_err)?;
    let hist: Vec<String> = r
        .length_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(n, c)| format!("{n}:{c}"))
        .collect();
    if !hist.is_empty() {
        say!(out, "latent lengths {}", hist.join(" "));
    }
    Ok(())
}

pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    expert: bool,
    rollouts: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let n = rollouts.unwrap_or(cfg.rl.eval_rollouts);
    if n == 0 {
        return Err(LapoError::Config("rollouts must be positive".into()));
    }
    let params = match (expert, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(Checkpoint::read(p)?.params),
        (false, None) => return Err(LapoError::Config("eval needs --checkpoint or --expert".into())),
    };
    let candidates = candidate_positions(cfg.model.n_max, cfg.rl.candidates)?;
    let mode = eval_latent_mode(cfg.latent_mode, &cfg.rl);
    for suite in cfg.suite.suites() {
        let tasks = SuiteSel::One(suite).tasks();
        let report = match &params {
            None => evaluate_expert(&tasks, n, cfg.seed, cfg.horizon)?,
            Some(p) => evaluate_policy(p, mode, &candidates, &tasks, n, cfg.seed)?,
        };
        print_report(out, suite.name(), &report)?;
    }
    Ok(())
}

/// One sweep point: its tag and the config it runs.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub tag: String,
    pub config: ExperimentConfig,
}

fn apply_axis(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let bad = || LapoError::Config(format!("ablate: bad value {value:?} for {key}"));
    let float = || value.parse::<f64>().map_err(|_| bad());
    let int = || value.parse::<usize>().map_err(|_| bad());
    match key {
        "sigma" => cfg.rl.sigma = float()?,
        "lambda1" => cfg.rl.lambda1 = float()?,
        "lambda2" => cfg.rl.lambda2 = float()?,
        "lambda3" => cfg.rl.lambda3 = float()?,
        "beta" => cfg.rl.beta = float()?,
        "nz" => {
            let n = int()?;
            cfg.latent_mode = LengthMode::Fixed(n);
            cfg.sft.train_lengths = vec![n];
        }
        "m" => {
            cfg.rl.candidates = int()?;
            cfg.latent_mode = LengthMode::Adaptive;
            cfg.sft.train_lengths = candidate_positions(cfg.model.n_max, cfg.rl.candidates)?;
        }
        _ => {
            return Err(LapoError::Config(format!(
                "ablate: unknown axis {key:?} (sigma, lambda1, lambda2, lambda3, beta, nz, m)"
            )))
        }
    }
    Ok(())
}

/// Expands `key=v1,v2` specs into their product, first axis slowest.
pub fn expand_grid(base: &ExperimentConfig, specs: &[String]) -> Result<Vec<SweepPoint>> {
    let mut points = vec![SweepPoint {
        tag: String::new(),
        config: base.clone(),
    }];
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| LapoError::Config(format!("ablate: expected key=v1,v2,..., got {spec:?}")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(LapoError::Config(format!("ablate: no values for {key}")));
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in &values {
                let mut config = p.config.clone();
                apply_axis(&mut config, key.trim(), v)?;
                let sep = if p.tag.is_empty() { "" } else { "_" };
                next.push(SweepPoint {
                    tag: format!("{}{sep}{}={v}", p.tag, key.trim()),
                    config,
                });
            }
        }
        points = next;
    }
    for p in &points {
        let mut c = p.config.clone();
        c.apply_baseline();
        c.validate().map_err(|e| LapoError::Config(format!("ablate point {}: {e}", p.tag)))?;
    }
    Ok(points)
}

pub fn ablate(cfg: &ExperimentConfig, grid: &[String], out: &mut dyn Write) -> Result<()> {
    let points = expand_grid(cfg, grid)?;
    let (demos, cache) = load_training_data(cfg)?;
    let run_point = |p: &SweepPoint| -> Result<Vec<RlMetrics>> {
        let mut c = p.config.clone();
        c.apply_baseline();
        let name = format!("ablate-{}-seed{}", p.tag, c.seed);
        let init = run_sft_named(&c, &demos, &cache, &format!("{name}-sft"))?;
        let rl_jobs = if cfg.jobs > 1 { 1 } else { workers(&c) };
        Ok(run_rl_named(&c, &init, None, &name, rl_jobs)?.1)
    };
    let results: Vec<Result<Vec<RlMetrics>>> = if cfg.jobs > 1 && !cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| LapoError::Config(e.to_string()))?;
        pool.install(|| points.par_iter().map(run_point).collect())
    } else {
        points.iter().map(run_point).collect()
    };
    let mut summary = BTreeMap::new();
    for (p, r) in points.iter().zip(results) {
        let metrics = r?;
        let last = metrics.iter().rev().find(|m| m.seen_success.is_some());
        summary.insert(p.tag.clone(), last.map(eval_line).unwrap_or_default());
    }
    for p in &points {
        say!(out, "{:<28} {}", p.tag, summary[&p.tag]);
    }
    Ok(())
}

/// Replays trajectory `traj` of a dumped rollout through a fresh
/// environment and checks every recorded observation along the way.
pub fn replay(file: &Path, traj: usize, horizon: usize, out: &mut dyn Write) -> Result<()> {
    let buf = RolloutBuffer::read(file)?;
    let t = buf.trajectories.get(traj).ok_or_else(|| {
        LapoError::Invalid(format!(
            "trajectory {traj} out of range ({} in file)",
            buf.trajectories.len()
        ))
    })?;
    let mut env = ChunkGridEnv::reset(t.task, t.seed)?;
    say!(out, "{} seed {}", t.task, t.seed);
    say!(out, "{}", env.render());
    for (k, step) in t.steps.iter().filter(|s| s.valid).enumerate() {
        if env.observation() != step.obs {
            return Err(LapoError::Invalid(format!(
                "trajectory {traj} diverges from the recording at decision {k}"
            )));
        }
        let res = env.step_chunk(&tokens_to_chunk(&step.tokens, horizon)?)?;
        say!(
            out,
            "decision {k}: latents {} reward {} value {:.3}{}",
            step.n_z,
            res.reward,
            step.value,
            if res.done { " done" } else { "" }
        );
        say!(out, "{}", env.render());
    }
    say!(
        out,
        "{} after {} micro-steps",
        if t.success { "success" } else { "failure" },
        t.micro_steps
    );
    Ok(())
}
