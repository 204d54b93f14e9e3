//! Python module `lapo`: the grid environment, action codec, policy
//! inference, warm-up and RL post-training.

use std::path::PathBuf;

use lapo::codec::{self, ActionChunk, ActionTokens};
use lapo::config::{Baseline, LengthMode, RlConfig, SftConfig, SuiteSel};
use lapo::env::{scripted_expert, ChunkGridEnv, TaskSpec, ACTION_DIMS};
use lapo::eval::evaluate_policy;
use lapo::lapo::{eval_latent_mode, gae as gae_core, split_holdout, train_rl, RlRun, RolloutStep};
use lapo::latent::{topk_select as topk_core, LatentCache, LatentConfig};
use lapo::net::{candidate_positions, ActionSampling, DecideOptions, LatentMode, Session};
use lapo::params::{Checkpoint, PolicyDims, PolicyParams};
use lapo::sft::{train_sft, SftRun};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(lapo, LapoError, PyException);

fn py_err(e: lapo::LapoError) -> PyErr {
    LapoError::new_err(e.to_string())
}

fn task_of(suite: &str, variant: u32) -> PyResult<TaskSpec> {
    let s: SuiteSel = suite.parse().map_err(py_err)?;
    match s {
        SuiteSel::One(s) => TaskSpec::new(s, variant).map_err(py_err),
        SuiteSel::All => Err(LapoError::new_err("a single suite is required here")),
    }
}

/// Latent mode from `"adaptive"` (confidence exit), `"sample"` or `"fixed:N"`.
fn latent_mode(spec: &str, rl: &RlConfig) -> PyResult<LatentMode> {
    if spec == "sample" {
        return Ok(LatentMode::AdaptiveSample { beta: rl.beta });
    }
    let m: LengthMode = spec.parse().map_err(py_err)?;
    Ok(eval_latent_mode(m, rl))
}

#[pyfunction]
fn token_of(a: f32) -> u32 {
    codec::token_of(a)
}

#[pyfunction]
fn value_of(token: u32) -> f32 {
    codec::value_of(token)
}

/// Flat action values (`horizon x 3`) to bin tokens.
#[pyfunction]
fn tokenize(values: Vec<f32>) -> PyResult<Vec<u32>> {
    if !values.len().is_multiple_of(ACTION_DIMS) {
        return Err(LapoError::new_err(format!("length must be a multiple of {ACTION_DIMS}")));
    }
    let chunk = ActionChunk::new(values.len() / ACTION_DIMS, ACTION_DIMS, values).map_err(py_err)?;
    Ok(codec::tokenize(&chunk).tokens().to_vec())
}

#[pyfunction]
fn detokenize(tokens: Vec<u32>) -> PyResult<Vec<f32>> {
    if !tokens.len().is_multiple_of(ACTION_DIMS) {
        return Err(LapoError::new_err(format!("length must be a multiple of {ACTION_DIMS}")));
    }
    let t = ActionTokens::new(tokens.len() / ACTION_DIMS, ACTION_DIMS, tokens).map_err(py_err)?;
    Ok(codec::detokenize(&t).values().to_vec())
}

#[pyfunction]
fn topk_select(v: Vec<f32>, k: usize) -> PyResult<Vec<f32>> {
    topk_core(&v, k).map_err(py_err)
}

/// Advantages and returns for one trajectory.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, gamma = 0.99, lam = 0.95))]
fn gae(rewards: Vec<f32>, values: Vec<f32>, dones: Vec<bool>, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(LapoError::new_err("rewards, values and dones must have equal length"));
    }
    let steps: Vec<RolloutStep> = rewards
        .iter()
        .zip(&values)
        .zip(&dones)
        .map(|((&reward, &value), &done)| RolloutStep {
            reward,
            value,
            done,
            valid: true,
            ..RolloutStep::padding(0)
        })
        .collect();
    let out = gae_core(&steps, gamma, lam);
    Ok((out.iter().map(|r| r.advantage).collect(), out.iter().map(|r| r.ret).collect()))
}

#[pyclass(name = "Env", module = "lapo")]
struct PyEnv {
    env: ChunkGridEnv,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (suite, variant, seed = 0))]
    fn new(suite: &str, variant: u32, seed: u64) -> PyResult<Self> {
        let env = ChunkGridEnv::reset(task_of(suite, variant)?, seed).map_err(py_err)?;
        Ok(Self { env })
    }

    fn observation(&self) -> Vec<f32> {
        self.env.observation()
    }

    #[getter]
    fn task_index(&self) -> usize {
        self.env.task().index()
    }

    #[getter]
    fn done(&self) -> bool {
        self.env.is_done()
    }

    #[getter]
    fn micro_steps(&self) -> u32 {
        self.env.state().steps
    }

    /// Executes a flat `horizon x 3` chunk; returns (obs, reward, done, success).
    fn step_chunk(&mut self, values: Vec<f32>) -> PyResult<(Vec<f32>, f32, bool, bool)> {
        if !values.len().is_multiple_of(ACTION_DIMS) {
            return Err(LapoError::new_err(format!("length must be a multiple of {ACTION_DIMS}")));
        }
        let chunk = ActionChunk::new(values.len() / ACTION_DIMS, ACTION_DIMS, values).map_err(py_err)?;
        let r = self.env.step_chunk(&chunk).map_err(py_err)?;
        Ok((r.observation, r.reward, r.done, r.success))
    }

    fn render(&self) -> String {
        self.env.render()
    }
}

#[pyclass(name = "Policy", module = "lapo")]
struct PyPolicy {
    params: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    /// Freshly initialized policy with default dimensions.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        let params = PolicyParams::init(PolicyDims::default(), seed).map_err(py_err)?;
        Ok(Self { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::read(&path).map_err(py_err)?;
        Ok(Self { params: ck.params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            params: self.params.clone(),
            moments: None,
        }
        .write(&path)
        .map_err(py_err)
    }

    /// Hex digest of the parameters.
    fn digest(&self) -> String {
        self.params.digest()
    }

    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// One decision step. `temperature=None` decodes greedily.
    #[pyo3(signature = (obs, task_index, mode = "adaptive", temperature = None, seed = 0))]
    fn decide<'py>(
        &self,
        py: Python<'py>,
        obs: Vec<f32>,
        task_index: usize,
        mode: &str,
        temperature: Option<f64>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let rl = RlConfig::default();
        let opts = DecideOptions {
            mode: latent_mode(mode, &rl)?,
            candidates: candidate_positions(self.params.dims().n_max, rl.candidates).map_err(py_err)?,
            sampling: temperature.map_or(ActionSampling::Greedy, ActionSampling::Temperature),
            sigma_explore: 0.0,
        };
        let mut session = Session::new(&self.params);
        let d = session
            .decide(&obs, task_index, &opts, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("n_z", d.n_z)?;
        out.set_item("length_index", d.length_index)?;
        out.set_item("length_logp", d.length_logp)?;
        out.set_item("tokens", d.tokens.clone())?;
        out.set_item("actions", d.tokens.iter().map(|&t| codec::value_of(t)).collect::<Vec<_>>())?;
        out.set_item("action_logp", d.action_logp)?;
        out.set_item("value", d.value)?;
        out.set_item("latents", d.latents)?;
        Ok(out)
    }

    /// Greedy success rate over every variant of `suite`.
    #[pyo3(signature = (suite = "reach", rollouts = 10, mode = "adaptive", seed = 0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        suite: &str,
        rollouts: usize,
        mode: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let rl = RlConfig::default();
        let tasks = suite.parse::<SuiteSel>().map_err(py_err)?.tasks();
        let cands = candidate_positions(self.params.dims().n_max, rl.candidates).map_err(py_err)?;
        let params = &self.params;
        let mode = latent_mode(mode, &rl)?;
        let r = py
            .detach(|| evaluate_policy(params, mode, &cands, &tasks, rollouts, seed))
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("success_rate", r.success_rate)?;
        out.set_item("mean_episode_steps", r.mean_episode_steps)?;
        out.set_item("length_counts", r.length_counts)?;
        let per: Vec<(String, usize, usize)> = r
            .per_task
            .iter()
            .map(|t| (t.task.to_string(), t.successes, t.episodes))
            .collect();
        out.set_item("per_task", per)?;
        Ok(out)
    }
}

fn demos_for(suite: &str, horizon: usize) -> PyResult<Vec<lapo::env::DemoTrajectory>> {
    let tasks = suite.parse::<SuiteSel>().map_err(py_err)?.tasks();
    tasks
        .iter()
        .map(|&t| scripted_expert(t, 0, horizon).map_err(py_err))
        .collect()
}

/// One expert demo per variant, latent precompute and warm-up. Returns the
/// policy and the per-step metrics as JSON strings.
#[pyfunction]
#[pyo3(signature = (suite = "reach", steps = 400, mode = "adaptive", seed = 0))]
fn warm_up(py: Python<'_>, suite: &str, steps: usize, mode: &str, seed: u64) -> PyResult<(PyPolicy, Vec<String>)> {
    let dims = PolicyDims::default();
    let mode: LengthMode = mode.parse().map_err(py_err)?;
    let demos = demos_for(suite, dims.horizon)?;
    let cfg = SftConfig {
        steps,
        ..SftConfig::default()
    };
    let cands = candidate_positions(dims.n_max, RlConfig::default().candidates).map_err(py_err)?;
    let out = py
        .detach(|| {
            let cache = LatentCache::precompute(&demos, &LatentConfig::default())?;
            let run = SftRun {
                config: &cfg,
                mode,
                candidates: &cands,
                seed,
            };
            train_sft(&run, &demos, &cache, PolicyParams::init(dims, seed)?, |_| Ok(()))
        })
        .map_err(py_err)?;
    let metrics = out
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize"))
        .collect();
    Ok((PyPolicy { params: out.params }, metrics))
}

/// RL post-training. Returns the trained policy and one JSON record per update.
#[pyfunction]
#[pyo3(signature = (policy, suite = "reach", updates = 10, rollout_batch = 64, mode = "adaptive",
                    baseline = "lapo", holdout_variant = None, seed = 0, jobs = 1))]
#[allow(clippy::too_many_arguments)]
fn post_train(
    py: Python<'_>,
    policy: &PyPolicy,
    suite: &str,
    updates: usize,
    rollout_batch: usize,
    mode: &str,
    baseline: &str,
    holdout_variant: Option<u32>,
    seed: u64,
    jobs: usize,
) -> PyResult<(PyPolicy, Vec<String>)> {
    let baseline: Baseline = baseline.parse().map_err(py_err)?;
    let mut mode: LengthMode = mode.parse().map_err(py_err)?;
    let mut cfg = RlConfig {
        updates,
        rollout_batch,
        ..RlConfig::default()
    };
    if baseline == Baseline::PpoActionOnly {
        mode = LengthMode::Fixed(0);
        cfg.lambda1 = 0.0;
        cfg.lambda3 = 0.0;
    }
    let tasks = suite.parse::<SuiteSel>().map_err(py_err)?.tasks();
    let (train, held) = split_holdout(&tasks, holdout_variant);
    let init = policy.params.clone();
    let out = py
        .detach(|| {
            let run = RlRun {
                config: &cfg,
                mode,
                baseline,
                train_tasks: &train,
                holdout_tasks: &held,
                seed,
                jobs: jobs.max(1),
                checkpoint_dir: None,
                dump_rollouts: None,
            };
            train_rl(&run, init, |_, _| Ok(()))
        })
        .map_err(py_err)?;
    let metrics = out
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize"))
        .collect();
    Ok((PyPolicy { params: out.params }, metrics))
}

#[pymodule]
#[pyo3(name = "lapo")]
fn lapo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LapoError", m.py().get_type::<LapoError>())?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(token_of, m)?)?;
    m.add_function(wrap_pyfunction!(value_of, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(topk_select, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(warm_up, m)?)?;
    m.add_function(wrap_pyfunction!(post_train, m)?)?;
    Ok(())
}
