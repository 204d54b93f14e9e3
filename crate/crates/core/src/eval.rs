//! Greedy evaluation over task variants with seeded start jitter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{value_of, ActionChunk};
use crate::env::{expert_action, ChunkGridEnv, TaskSpec, ACTION_DIMS};
use crate::error::Result;
use crate::net::{ActionSampling, DecideOptions, LatentMode, Session};
use crate::params::PolicyParams;

/// Seed of evaluation episode `r` on `task`; identical for every evaluation.
pub fn eval_seed(base: u64, task: TaskSpec, r: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((task.index() as u64) << 20)
        .wrapping_add(r as u64)
        ^ 0xe7a1
}

/// Produces one action chunk per decision step.
pub trait Controller {
    /// The chunk to execute and the latent count used (if any).
    fn chunk(&mut self, env: &ChunkGridEnv) -> Result<(ActionChunk, Option<usize>)>;
}

/// Plans `horizon` expert micro-steps on a copy of the environment.
pub struct ExpertController {
    pub horizon: usize,
}

impl Controller for ExpertController {
    fn chunk(&mut self, env: &ChunkGridEnv) -> Result<(ActionChunk, Option<usize>)> {
        let mut sim = env.clone();
        let mut values = Vec::with_capacity(self.horizon * ACTION_DIMS);
        let mut last = [0.0; ACTION_DIMS];
        for _ in 0..self.horizon {
            if !sim.is_done() {
                last = expert_action(sim.state());
                sim.step_micro(&last)?;
            }
            values.extend(last);
        }
        Ok((ActionChunk::new(self.horizon, ACTION_DIMS, values)?, None))
    }
}

pub struct PolicyController {
    session: Session,
    opts: DecideOptions,
    rng: ChaCha8Rng,
}

impl PolicyController {
    pub fn new(params: &PolicyParams, mode: LatentMode, candidates: Vec<usize>, seed: u64) -> Self {
        Self {
            session: Session::new(params),
            opts: DecideOptions {
                mode,
                candidates,
                sampling: ActionSampling::Greedy,
                sigma_explore: 0.0,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub fn tokens_to_chunk(tokens: &[u32], horizon: usize) -> Result<ActionChunk> {
    ActionChunk::new(horizon, ACTION_DIMS, tokens.iter().map(|&t| value_of(t)).collect())
}

impl Controller for PolicyController {
    fn chunk(&mut self, env: &ChunkGridEnv) -> Result<(ActionChunk, Option<usize>)> {
        let d = self
            .session
            .decide(&env.observation(), env.task().index(), &self.opts, &mut self.rng)?;
        let horizon = self.session.net().dims().horizon;
        Ok((tokens_to_chunk(&d.tokens, horizon)?, Some(d.n_z)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: TaskSpec,
    pub seed: u64,
    pub success: bool,
    pub micro_steps: u32,
    pub lengths: Vec<usize>,
}

pub fn run_episode(ctrl: &mut dyn Controller, task: TaskSpec, seed: u64) -> Result<Episode> {
    let mut env = ChunkGridEnv::reset(task, seed)?;
    let mut lengths = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let (chunk, n_z) = ctrl.chunk(&env)?;
        lengths.extend(n_z);
        success = env.step_chunk(&chunk)?.success;
    }
    Ok(Episode {
        task,
        seed,
        success,
        micro_steps: env.state().steps,
        lengths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: TaskSpec,
    pub episodes: usize,
    pub successes: usize,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
    pub success_rate: f64,
    pub mean_episode_steps: f64,
    /// Decision counts per latent length `0..=N_max`.
    pub length_counts: Vec<usize>,
}

impl EvalReport {
    pub fn from_episodes(tasks: &[TaskSpec], episodes: &[Episode], n_max: usize) -> Self {
        let mut per_task = Vec::new();
        for &task in tasks {
            let eps: Vec<&Episode> = episodes.iter().filter(|e| e.task == task).collect();
            let n = eps.len();
            per_task.push(TaskEval {
                task,
                episodes: n,
                successes: eps.iter().filter(|e| e.success).count(),
                mean_steps: eps.iter().map(|e| e.micro_steps as f64).sum::<f64>() / n.max(1) as f64,
            });
        }
        let total = episodes.len().max(1) as f64;
        let mut length_counts = vec![0; n_max + 1];
        for l in episodes.iter().flat_map(|e| &e.lengths) {
            if *l < length_counts.len() {
                length_counts[*l] += 1;
            }
        }
        Self {
            per_task,
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / total,
            mean_episode_steps: episodes.iter().map(|e| e.micro_steps as f64).sum::<f64>() / total,
            length_counts,
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::from("task            success  mean_steps\n");
        for t in &self.per_task {
            out.push_str(&format!(
                "{:<15} {:>3}/{:<3}  {:>10.2}\n",
                t.task.to_string(),
                t.successes,
                t.episodes,
                t.mean_steps
            ));
        }
        out.push_str(&format!(
            "overall SR {:.3}  mean episode micro-steps {:.2}\n",
            self.success_rate, self.mean_episode_steps
        ));
        out
    }
}

/// Greedy policy evaluation: `n_rollouts` seeded episodes per task.
pub fn evaluate_policy(
    params: &PolicyParams,
    mode: LatentMode,
    candidates: &[usize],
    tasks: &[TaskSpec],
    n_rollouts: usize,
    seed_base: u64,
) -> Result<EvalReport> {
    mode.validate(params.dims().n_max)?;
    let jobs: Vec<(TaskSpec, u64)> = tasks
        .iter()
        .flat_map(|&t| (0..n_rollouts).map(move |r| (t, eval_seed(seed_base, t, r))))
        .collect();
    let episodes = jobs
        .par_iter()
        .map_init(
            || PolicyController::new(params, mode, candidates.to_vec(), 0),
            |ctrl, &(task, seed)| {
                run_episode(ctrl, task, seed)
                    .map_err(|e| e.in_episode(format_args!("{task} seed {seed}")))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_episodes(tasks, &episodes, params.dims().n_max))
}

pub fn evaluate_expert(tasks: &[TaskSpec], n_rollouts: usize, seed_base: u64, horizon: usize) -> Result<EvalReport> {
    let mut episodes = Vec::new();
    let mut ctrl = ExpertController { horizon };
    for &t in tasks {
        for r in 0..n_rollouts {
            episodes.push(run_episode(&mut ctrl, t, eval_seed(seed_base, t, r))?);
        }
    }
    Ok(EvalReport::from_episodes(tasks, &episodes, 0))
}
