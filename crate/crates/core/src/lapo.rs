//! Online RL post-training: rollout collection, GAE, the action / latent /
//! end likelihood ratios, clipped surrogates and the update loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::config::{Baseline, LengthMode, RlConfig};
use crate::env::{ChunkGridEnv, Suite, TaskSpec, PHI_DIM};
use crate::error::{LapoError, Result};
use crate::eval::{evaluate_policy, tokens_to_chunk};
use crate::metrics::{RlMetrics, TrainStats};
use crate::net::{
    action_logp, candidate_positions, length_log_scores, length_logp, ActionSampling, DecideOptions, LatentMode, Net,
    SeqSpec, Session,
};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::{Checkpoint, MomentState, PolicyParams};
use crate::tape::{Scalar, Tape, TensorValue};
use crate::tape::NodeId;

/// Log-ratios are clamped to `[-RATIO_CLAMP, RATIO_CLAMP]` before `exp`.
pub const RATIO_CLAMP: f64 = 20.0;
pub const ADV_EPS: f64 = 1e-8;
pub const ROLLOUT_MAGIC: &[u8; 8] = b"LAPOROL1";

/// SplitMix64 finalizer over a running state; used to derive per-episode seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub obs: Vec<f32>,
    pub task: usize,
    /// Every latent generated at this step; the first `n_z` were consumed.
    pub latents: Vec<Vec<f32>>,
    pub n_z: usize,
    pub length_index: usize,
    pub tokens: Vec<u32>,
    pub logp_a_old: f32,
    pub logp_end_old: f32,
    pub value: f32,
    pub reward: f32,
    pub done: bool,
    pub valid: bool,
}

impl RolloutStep {
    pub fn padding(n_act: usize) -> Self {
        Self {
            obs: vec![0.0; PHI_DIM],
            task: 0,
            latents: Vec::new(),
            n_z: 0,
            length_index: 0,
            tokens: vec![0; n_act],
            logp_a_old: 0.0,
            logp_end_old: 0.0,
            value: 0.0,
            reward: 0.0,
            done: true,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub seed: u64,
    pub steps: Vec<RolloutStep>,
    pub success: bool,
    pub micro_steps: u32,
}

impl Trajectory {
    pub fn valid_len(&self) -> usize {
        self.steps.iter().filter(|s| s.valid).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBuffer {
    /// Right-pads every trajectory with invalid steps to the longest one.
    pub fn pad(&mut self, n_act: usize) {
        let max = self.trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0);
        for t in &mut self.trajectories {
            while t.steps.len() < max {
                t.steps.push(RolloutStep::padding(n_act));
            }
        }
    }

    pub fn valid_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::valid_len).sum()
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().filter(|t| t.success).count() as f64 / n
    }

    pub fn mean_micro_steps(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(|t| t.micro_steps as f64).sum::<f64>() / n
    }

    /// Valid-step counts per candidate index.
    pub fn length_hist(&self, m: usize) -> Vec<usize> {
        let mut h = vec![0; m];
        for s in self.trajectories.iter().flat_map(|t| &t.steps).filter(|s| s.valid) {
            if s.length_index < m {
                h[s.length_index] += 1;
            }
        }
        h
    }

    /// `LAPOROL1` layout, little-endian:
    ///
    /// ```text
    /// magic, u32 trajectories, u32 d_model, u32 N_a
    /// per trajectory: u32 suite, u32 variant, u32 seed lo, u32 seed hi,
    ///   u32 success, u32 micro-steps, u32 step count
    ///   per step: u32 valid, u32 done, u32 task, u32 n_z, u32 length index,
    ///     u32 latent count, f32 logp_a, f32 logp_end, f32 value, f32 reward,
    ///     PHI_DIM x f32 observation, count x d_model f32 latents, N_a x u32 tokens
    /// ```
    pub fn encode(&self, d_model: usize, n_act: usize) -> Vec<u8> {
        let mut w = Writer::new(ROLLOUT_MAGIC);
        w.u32(self.trajectories.len() as u32).u32(d_model as u32).u32(n_act as u32);
        for t in &self.trajectories {
            w.u32(t.task.suite.id())
                .u32(t.task.variant)
                .u32(t.seed as u32)
                .u32((t.seed >> 32) as u32)
                .u32(t.success as u32)
                .u32(t.micro_steps)
                .u32(t.steps.len() as u32);
            for s in &t.steps {
                w.u32(s.valid as u32)
                    .u32(s.done as u32)
                    .u32(s.task as u32)
                    .u32(s.n_z as u32)
                    .u32(s.length_index as u32)
                    .u32(s.latents.len() as u32)
                    .f32(s.logp_a_old)
                    .f32(s.logp_end_old)
                    .f32(s.value)
                    .f32(s.reward)
                    .f32s(&s.obs);
                for z in &s.latents {
                    w.f32s(z);
                }
                for &tok in &s.tokens {
                    w.u32(tok);
                }
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("rollout file", bytes);
        r.magic(ROLLOUT_MAGIC)?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let na = r.u32()? as usize;
        let mut trajectories = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let suite = Suite::from_id(r.u32()?).map_err(|e| r.error(e.to_string()))?;
            let task = TaskSpec::new(suite, r.u32()?).map_err(|e| r.error(e.to_string()))?;
            let seed = r.u32()? as u64 | (r.u32()? as u64) << 32;
            let success = r.u32()? != 0;
            let micro_steps = r.u32()?;
            let count = r.u32()? as usize;
            let mut steps = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                let valid = r.u32()? != 0;
                let done = r.u32()? != 0;
                let task = r.u32()? as usize;
                let n_z = r.u32()? as usize;
                let length_index = r.u32()? as usize;
                let n_lat = r.u32()? as usize;
                if n_z > n_lat {
                    return Err(r.error(format!("n_z {n_z} exceeds the {n_lat} stored latents")));
                }
                let logp_a_old = r.f32()?;
                let logp_end_old = r.f32()?;
                let value = r.f32()?;
                let reward = r.f32()?;
                let obs = r.f32s(PHI_DIM)?;
                let latents = (0..n_lat).map(|_| r.f32s(d)).collect::<Result<Vec<_>>>()?;
                let tokens = (0..na).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                steps.push(RolloutStep {
                    obs,
                    task,
                    latents,
                    n_z,
                    length_index,
                    tokens,
                    logp_a_old,
                    logp_end_old,
                    value,
                    reward,
                    done,
                    valid,
                });
            }
            trajectories.push(Trajectory {
                task,
                seed,
                steps,
                success,
                micro_steps,
            });
        }
        r.finish()?;
        Ok(Self { trajectories })
    }

    pub fn write(&self, path: &Path, d_model: usize, n_act: usize) -> Result<()> {
        write_file(path, &self.encode(d_model, n_act))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// How rollouts pick lengths and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSpec {
    pub mode: LatentMode,
    pub candidates: Vec<usize>,
    pub sampling: ActionSampling,
    pub sigma_explore: f64,
    /// Records zero reward for every step (reward-ablated environment).
    pub reward_ablate: bool,
}

/// One episode to roll out: task, environment seed, sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeJob {
    pub task: TaskSpec,
    pub env_seed: u64,
    pub rng_seed: u64,
}

fn rollout_one(session: &mut Session, job: EpisodeJob, spec: &RolloutSpec) -> Result<Trajectory> {
    let opts = DecideOptions {
        mode: spec.mode,
        candidates: spec.candidates.clone(),
        sampling: spec.sampling,
        sigma_explore: spec.sigma_explore,
    };
    let horizon = session.net().dims().horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(job.rng_seed);
    let mut env = ChunkGridEnv::reset(job.task, job.env_seed)?;
    let mut steps = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let obs = env.observation();
        let task = job.task.index();
        let d = session.decide(&obs, task, &opts, &mut rng)?;
        let res = env.step_chunk(&tokens_to_chunk(&d.tokens, horizon)?)?;
        success = res.success;
        steps.push(RolloutStep {
            obs,
            task,
            latents: d.latents,
            n_z: d.n_z,
            length_index: d.length_index,
            tokens: d.tokens,
            logp_a_old: d.action_logp,
            logp_end_old: d.length_logp,
            value: d.value,
            reward: if spec.reward_ablate { 0.0 } else { res.reward },
            done: res.done,
            valid: true,
        });
    }
    Ok(Trajectory {
        task: job.task,
        seed: job.env_seed,
        steps,
        success,
        micro_steps: env.state().steps,
    })
}

/// Rolls out every job under a fixed parameter snapshot. Each episode owns
/// its RNG, and results are kept in job order, so the buffer does not depend
/// on `jobs`. The buffer comes back right-padded.
pub fn collect_rollouts(
    params: &PolicyParams,
    episodes: &[EpisodeJob],
    spec: &RolloutSpec,
    jobs: usize,
) -> Result<RolloutBuffer> {
    spec.mode.validate(params.dims().n_max)?;
    let wrap = |i: usize, r: Result<Trajectory>| {
        r.map_err(|e| e.in_episode(format_args!("trajectory {i} ({})", episodes[i].task)))
    };
    let trajectories = if jobs <= 1 {
        let mut session = Session::new(params);
        episodes
            .iter()
            .enumerate()
            .map(|(i, &job)| wrap(i, rollout_one(&mut session, job, spec)))
            .collect::<Result<Vec<_>>>()?
    } else {
        episodes
            .par_iter()
            .enumerate()
            .map_init(
                || Session::new(params),
                |session, (i, &job)| wrap(i, rollout_one(session, job, spec)),
            )
            .collect::<Result<Vec<_>>>()?
    };
    let mut buf = RolloutBuffer { trajectories };
    buf.pad(params.dims().n_act());
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdvantageRecord {
    pub advantage: f64,
    pub ret: f64,
}

/// GAE over one (possibly padded) trajectory. Invalid steps get zeros and
/// act as a terminal boundary.
pub fn gae(steps: &[RolloutStep], gamma: f64, lambda: f64) -> Vec<AdvantageRecord> {
    let n = steps.len();
    let mut out = vec![AdvantageRecord::default(); n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let s = &steps[t];
        if !s.valid {
            next_adv = 0.0;
            next_value = 0.0;
            continue;
        }
        let cont = if s.done { 0.0 } else { 1.0 };
        let v = s.value as f64;
        let delta = s.reward as f64 + gamma * next_value * cont - v;
        let adv = delta + gamma * lambda * cont * next_adv;
        out[t] = AdvantageRecord { advantage: adv, ret: adv + v };
        next_adv = adv;
        next_value = v;
    }
    out
}

pub fn compute_gae(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Vec<Vec<AdvantageRecord>> {
    buf.trajectories.iter().map(|t| gae(&t.steps, gamma, lambda)).collect()
}

/// Standardizes advantages over valid steps; returns targets untouched.
pub fn normalize_advantages(buf: &RolloutBuffer, adv: &mut [Vec<AdvantageRecord>]) {
    let vals: Vec<f64> = buf
        .trajectories
        .iter()
        .zip(adv.iter())
        .flat_map(|(t, a)| t.steps.iter().zip(a).filter(|(s, _)| s.valid).map(|(_, r)| r.advantage))
        .collect();
    if vals.is_empty() {
        return;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for (t, a) in buf.trajectories.iter().zip(adv.iter_mut()) {
        for (s, r) in t.steps.iter().zip(a.iter_mut()) {
            if s.valid {
                r.advantage = (r.advantage - mean) / (std + ADV_EPS);
            }
        }
    }
}

/// `exp(clamp(logp_new - logp_old, -20, 20))`; `logp_new` is `[B]`.
pub fn ratio_action<T: Scalar>(tape: &mut Tape<T>, logp_new: NodeId, logp_old: &[f32]) -> Result<NodeId> {
    let old: Vec<f64> = logp_old.iter().map(|&x| x as f64).collect();
    let old = tape.constant(TensorValue::from_f64(&[old.len()], &old)?);
    let d = tape.sub(logp_new, old)?;
    let d = tape.clamp(d, -RATIO_CLAMP, RATIO_CLAMP)?;
    tape.exp(d)
}

/// Same rule as [`ratio_action`], for the length decision.
pub fn ratio_end<T: Scalar>(tape: &mut Tape<T>, logp_new: NodeId, logp_old: &[f32]) -> Result<NodeId> {
    ratio_action(tape, logp_new, logp_old)
}

/// Gaussian likelihood ratio `exp(-sum ||z_old - z||^2 / (2 sigma^2))` per
/// sample, exponent clamped to `[-20, 0]`. `z_theta` is `[n, d]` with row `i`
/// belonging to sample `owner[i]`; returns `[batch]`.
pub fn ratio_latent<T: Scalar>(
    tape: &mut Tape<T>,
    z_theta: NodeId,
    z_old: &[Vec<f32>],
    owner: &[usize],
    batch: usize,
    sigma: f64,
) -> Result<NodeId> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(LapoError::Config(format!("latent sigma must be positive, got {sigma}")));
    }
    let n = z_old.len();
    if owner.len() != n || owner.iter().any(|&b| b >= batch) {
        return Err(LapoError::Invalid("latent owner map does not match the batch".into()));
    }
    let d = tape.shape(z_theta)[1];
    let flat: Vec<f64> = z_old.iter().flat_map(|z| z.iter().map(|&x| x as f64)).collect();
    let old = tape.constant(TensorValue::from_f64(&[n, d], &flat)?);
    let diff = tape.sub(old, z_theta)?;
    let sq = tape.square(diff)?;
    let per = tape.sum_last(sq)?;
    let per = tape.reshape(per, &[n, 1])?;
    let mut sel = vec![0.0; batch * n];
    for (i, &b) in owner.iter().enumerate() {
        sel[b * n + i] = 1.0;
    }
    let sel = tape.constant(TensorValue::from_f64(&[batch, n], &sel)?);
    let dist = tape.matmul(sel, per)?;
    let dist = tape.reshape(dist, &[batch])?;
    let e = tape.scale(dist, -0.5 / (sigma * sigma))?;
    let e = tape.clamp(e, -RATIO_CLAMP, 0.0)?;
    tape.exp(e)
}

/// Per-sample `-min(r A, clip(r, 1 - eps_min, 1 + eps_max) A)`, `A` constant.
pub fn clipped_surrogate<T: Scalar>(
    tape: &mut Tape<T>,
    r: NodeId,
    adv: &[f64],
    eps_min: f64,
    eps_max: f64,
) -> Result<NodeId> {
    let a = tape.constant(TensorValue::from_f64(&[adv.len()], adv)?);
    let ra = tape.mul(r, a)?;
    let rc = tape.clamp(r, 1.0 - eps_min, 1.0 + eps_max)?;
    let rca = tape.mul(rc, a)?;
    let m = tape.minimum(ra, rca)?;
    tape.neg(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCoeffs {
    pub sigma: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    /// Action sampling temperature the recorded log-probs were taken at.
    pub tau: f64,
    pub adaptive: bool,
    pub candidates: Vec<usize>,
}

impl LossCoeffs {
    pub fn from_config(c: &RlConfig, mode: LengthMode, n_max: usize) -> Result<Self> {
        Ok(Self {
            sigma: c.sigma,
            eps_min: c.eps_min,
            eps_max: c.eps_max,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            lambda3: c.lambda3,
            beta: c.beta,
            tau: c.temperature,
            adaptive: mode == LengthMode::Adaptive,
            candidates: candidate_positions(n_max, c.candidates)?,
        })
    }
}

/// A rollout step with its advantage and return target.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub step: &'a RolloutStep,
    pub advantage: f64,
    pub ret: f64,
}

/// Loss nodes for one minibatch. Per-sample ratio nodes are `[B]` over the
/// valid items in order.
#[derive(Debug, Clone, Copy)]
pub struct LapoLoss {
    pub total: NodeId,
    pub action: NodeId,
    pub latent: Option<NodeId>,
    pub end: Option<NodeId>,
    pub value: NodeId,
    pub logratio_a: NodeId,
    pub r_a: NodeId,
    pub r_z: Option<NodeId>,
    pub r_end: Option<NodeId>,
    pub batch: usize,
}

fn valid_items<'a, 'b>(items: &'b [TrainItem<'a>]) -> Result<Vec<&'b TrainItem<'a>>> {
    let v: Vec<_> = items.iter().filter(|i| i.step.valid).collect();
    if v.is_empty() {
        return Err(LapoError::Invalid("minibatch has no valid steps".into()));
    }
    Ok(v)
}

fn value_term<T: Scalar>(tape: &mut Tape<T>, net: &Net, fp: &crate::net::FullPass, rets: &[f64]) -> Result<NodeId> {
    let v = net.full_values(tape, fp)?;
    let r = tape.constant(TensorValue::from_f64(&[rets.len()], rets)?);
    tape.mse(v, r)
}

/// Joint LAPO objective over the valid items: mean clipped surrogates for
/// the action, latent and end ratios plus the value regression. Latent and
/// end terms are left out of the graph when their weight is zero, and the
/// end term exists only in adaptive mode.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, net: &Net, items: &[TrainItem], c: &LossCoeffs) -> Result<LapoLoss> {
    let items = valid_items(items)?;
    let b = items.len();
    let seqs: Vec<SeqSpec> = items
        .iter()
        .map(|i| SeqSpec {
            obs: &i.step.obs,
            task: i.step.task,
            latents: &i.step.latents,
            n_z: i.step.n_z,
        })
        .collect();
    let fp = net.forward_full(tape, &seqs, None)?;
    let adv: Vec<f64> = items.iter().map(|i| i.advantage).collect();
    let rets: Vec<f64> = items.iter().map(|i| i.ret).collect();

    let logits = net.full_action_logits(tape, &fp)?;
    let tokens: Vec<u32> = items.iter().flat_map(|i| i.step.tokens.iter().copied()).collect();
    let lp = action_logp(tape, logits, &tokens, b, c.tau)?;
    let old_a: Vec<f32> = items.iter().map(|i| i.step.logp_a_old).collect();
    let old = tape.constant(TensorValue::from_f64(&[b], &old_a.iter().map(|&x| x as f64).collect::<Vec<_>>())?);
    let logratio_a = tape.sub(lp, old)?;
    let r_a = ratio_action(tape, lp, &old_a)?;
    let s_a = clipped_surrogate(tape, r_a, &adv, c.eps_min, c.eps_max)?;
    let action = tape.mean(s_a)?;

    let mut r_z = None;
    let mut latent = None;
    if items.iter().any(|i| i.step.n_z > 0) {
        let mut which = Vec::new();
        let mut old = Vec::new();
        let mut owner = Vec::new();
        for (bi, i) in items.iter().enumerate() {
            for k in 1..=i.step.n_z {
                which.push((bi, k));
                old.push(i.step.latents[k - 1].clone());
                owner.push(bi);
            }
        }
        let z = net.full_latents(tape, &fp, &which)?;
        let r = ratio_latent(tape, z, &old, &owner, b, c.sigma)?;
        r_z = Some(r);
        if c.lambda1 != 0.0 {
            let s = clipped_surrogate(tape, r, &adv, c.eps_min, c.eps_max)?;
            latent = Some(tape.mean(s)?);
        }
    }

    let mut r_end = None;
    let mut end = None;
    let m = c.candidates.len();
    if c.adaptive && m > 1 {
        let pairs: Vec<(usize, usize)> = (0..b)
            .flat_map(|bi| c.candidates[..m - 1].iter().map(move |&cand| (bi, cand)))
            .collect();
        for (bi, cand) in &pairs {
            if items[*bi].step.latents.len() < *cand {
                return Err(LapoError::Invalid(format!(
                    "step stores {} latents but candidate {cand} needs them",
                    items[*bi].step.latents.len()
                )));
            }
        }
        let e = net.full_end_logits(tape, &fp, &pairs)?;
        let e = tape.reshape(e, &[b, m - 1])?;
        let scores = length_log_scores(tape, Some(e), b, m)?;
        let lpl = length_logp(tape, scores, c.beta)?;
        let idx: Vec<usize> = items.iter().map(|i| i.step.length_index).collect();
        let lp_end = tape.select_last(lpl, idx)?;
        let old_end: Vec<f32> = items.iter().map(|i| i.step.logp_end_old).collect();
        let r = ratio_end(tape, lp_end, &old_end)?;
        r_end = Some(r);
        if c.lambda3 != 0.0 {
            let s = clipped_surrogate(tape, r, &adv, c.eps_min, c.eps_max)?;
            end = Some(tape.mean(s)?);
        }
    }

    let value = value_term(tape, net, &fp, &rets)?;
    let mut total = action;
    for (term, w) in [(latent, c.lambda1), (end, c.lambda3)] {
        if let Some(t) = term {
            let t = tape.scale(t, w)?;
            total = tape.add(total, t)?;
        }
    }
    let vt = tape.scale(value, c.lambda2)?;
    total = tape.add(total, vt)?;
    Ok(LapoLoss {
        total,
        action,
        latent,
        end,
        value,
        logratio_a,
        r_a,
        r_z,
        r_end,
        batch: b,
    })
}

/// Action-only PPO objective (clipped action surrogate plus value
/// regression) for the latent-free baseline.
pub fn ppo_action_only_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Net,
    items: &[TrainItem],
    c: &LossCoeffs,
) -> Result<LapoLoss> {
    let items = valid_items(items)?;
    if items.iter().any(|i| i.step.n_z > 0) {
        return Err(LapoError::Invalid("action-only baseline got steps with latents".into()));
    }
    let b = items.len();
    let seqs: Vec<SeqSpec> = items
        .iter()
        .map(|i| SeqSpec {
            obs: &i.step.obs,
            task: i.step.task,
            latents: &[],
            n_z: 0,
        })
        .collect();
    let fp = net.forward_full(tape, &seqs, None)?;
    let logits = net.full_action_logits(tape, &fp)?;
    let tokens: Vec<u32> = items.iter().flat_map(|i| i.step.tokens.iter().copied()).collect();
    let lp = action_logp(tape, logits, &tokens, b, c.tau)?;
    let old_a: Vec<f32> = items.iter().map(|i| i.step.logp_a_old).collect();
    let old_f: Vec<f64> = old_a.iter().map(|&x| x as f64).collect();
    let old = tape.constant(TensorValue::from_f64(&[b], &old_f)?);
    let logratio_a = tape.sub(lp, old)?;
    let r_a = ratio_action(tape, lp, &old_a)?;
    let adv: Vec<f64> = items.iter().map(|i| i.advantage).collect();
    let s_a = clipped_surrogate(tape, r_a, &adv, c.eps_min, c.eps_max)?;
    let action = tape.mean(s_a)?;
    let rets: Vec<f64> = items.iter().map(|i| i.ret).collect();
    let value = value_term(tape, net, &fp, &rets)?;
    let vt = tape.scale(value, c.lambda2)?;
    let total = tape.add(action, vt)?;
    Ok(LapoLoss {
        total,
        action,
        latent: None,
        end: None,
        value,
        logratio_a,
        r_a,
        r_z: None,
        r_end: None,
        batch: b,
    })
}

/// `1 - Var(ret - v) / Var(ret)` over valid steps.
pub fn explained_variance(buf: &RolloutBuffer, adv: &[Vec<AdvantageRecord>]) -> f64 {
    let pairs: Vec<(f64, f64)> = buf
        .trajectories
        .iter()
        .zip(adv)
        .flat_map(|(t, a)| t.steps.iter().zip(a).filter(|(s, _)| s.valid).map(|(s, r)| (r.ret, s.value as f64)))
        .collect();
    let var = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    };
    let vr = var(&mut pairs.iter().map(|p| p.0));
    if vr == 0.0 {
        return 0.0;
    }
    1.0 - var(&mut pairs.iter().map(|p| p.0 - p.1)) / vr
}

/// Splits `tasks` into (training, held-out) by variant index.
pub fn split_holdout(tasks: &[TaskSpec], holdout_variant: Option<u32>) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    tasks
        .iter()
        .partition(|t| Some(t.variant) != holdout_variant)
}

/// Latent mode used for greedy evaluation.
pub fn eval_latent_mode(mode: LengthMode, cfg: &RlConfig) -> LatentMode {
    match mode {
        LengthMode::Fixed(n) => LatentMode::Fixed(n),
        LengthMode::Adaptive => LatentMode::AdaptiveExit { p_exit: cfg.p_exit },
    }
}

#[derive(Debug, Clone)]
pub struct RlRun<'a> {
    pub config: &'a RlConfig,
    pub mode: LengthMode,
    pub baseline: Baseline,
    pub train_tasks: &'a [TaskSpec],
    pub holdout_tasks: &'a [TaskSpec],
    pub seed: u64,
    pub jobs: usize,
    /// Where the last-good checkpoint goes if a numeric abort happens.
    pub checkpoint_dir: Option<PathBuf>,
    /// Writes the final rollout buffer here.
    pub dump_rollouts: Option<PathBuf>,
}

impl RlRun<'_> {
    pub fn rollout_mode(&self) -> LatentMode {
        match self.mode {
            LengthMode::Fixed(n) => LatentMode::Fixed(n),
            LengthMode::Adaptive => LatentMode::AdaptiveSample { beta: self.config.beta },
        }
    }

    pub fn eval_mode(&self) -> LatentMode {
        eval_latent_mode(self.mode, self.config)
    }

    /// Episodes of update `u` (1-based): tasks cycle through the training set.
    pub fn episode_jobs(&self, u: usize) -> Vec<EpisodeJob> {
        let n = self.config.rollout_batch;
        (0..n)
            .map(|i| {
                let k = (u - 1) * n + i;
                EpisodeJob {
                    task: self.train_tasks[k % self.train_tasks.len()],
                    env_seed: mix_seed(self.seed, (k as u64) << 1),
                    rng_seed: mix_seed(self.seed, (k as u64) << 1 | 1),
                }
            })
            .collect()
    }

    fn validate(&self, n_max: usize) -> Result<()> {
        self.config.validate(n_max)?;
        if self.train_tasks.is_empty() {
            return Err(LapoError::Config("no training tasks".into()));
        }
        if let Some(t) = self.train_tasks.iter().find(|t| self.holdout_tasks.contains(t)) {
            return Err(LapoError::Config(format!("held-out task {t} is also a training task")));
        }
        if let LengthMode::Fixed(n) = self.mode {
            if n > n_max {
                return Err(LapoError::Config(format!("fixed length {n} exceeds N_max {n_max}")));
            }
        }
        if self.baseline == Baseline::PpoActionOnly
            && (self.mode != LengthMode::Fixed(0) || self.config.lambda1 != 0.0 || self.config.lambda3 != 0.0)
        {
            return Err(LapoError::Config(
                "the action-only baseline needs fixed:0 and lambda1 = lambda3 = 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub params: PolicyParams,
    pub moments: MomentState,
    pub metrics: Vec<RlMetrics>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    sum: f64,
    min: f64,
    max: f64,
}

impl Acc {
    fn push_all(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            if self.n == 0 {
                self.min = x;
                self.max = x;
            }
            self.n += 1;
            self.sum += x;
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.sum / self.n as f64
        }
    }

    fn min_or_one(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.min
        }
    }

    fn max_or_one(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.max
        }
    }
}

fn f64s<T: Scalar>(tape: &Tape<T>, id: NodeId) -> Vec<f64> {
    tape.value(id).data().iter().map(|x| x.f64()).collect()
}

fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Net,
    items: &[TrainItem],
    c: &LossCoeffs,
    baseline: Baseline,
) -> Result<LapoLoss> {
    match baseline {
        Baseline::Lapo => total_loss(tape, net, items, c),
        Baseline::PpoActionOnly => ppo_action_only_loss(tape, net, items, c),
    }
}

/// Largest `|r - 1|` over every ratio of every valid item under `params`.
pub fn ratio_identity_dev(
    params: &PolicyParams,
    items: &[TrainItem],
    c: &LossCoeffs,
    baseline: Baseline,
    chunk: usize,
) -> Result<f64> {
    let mut dev: f64 = 0.0;
    for part in items.chunks(chunk.max(1)) {
        if !part.iter().any(|i| i.step.valid) {
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let net = Net::bind(params, &mut tape, false);
        let l = build_loss(&mut tape, &net, part, c, baseline)?;
        for r in [Some(l.r_a), l.r_z, l.r_end].into_iter().flatten() {
            for x in f64s(&tape, r) {
                dev = dev.max((x - 1.0).abs());
            }
        }
    }
    Ok(dev)
}

fn eval_record(
    run: &RlRun,
    params: &PolicyParams,
    candidates: &[usize],
    update: usize,
) -> Result<RlMetrics> {
    let base = mix_seed(run.seed, 0xe7a1);
    let seen = evaluate_policy(
        params,
        run.eval_mode(),
        candidates,
        run.train_tasks,
        run.config.eval_rollouts,
        base,
    )?;
    let holdout = holdout_success(run, params, candidates)?;
    Ok(RlMetrics {
        update,
        seen_success: Some(seen.success_rate),
        holdout_success: holdout,
        mean_episode_steps: Some(seen.mean_episode_steps),
        eval_length_counts: Some(seen.length_counts),
        train: None,
    })
}

fn holdout_success(run: &RlRun, params: &PolicyParams, candidates: &[usize]) -> Result<Option<f64>> {
    if run.holdout_tasks.is_empty() {
        return Ok(None);
    }
    let base = mix_seed(run.seed, 0xe7a1);
    let r = evaluate_policy(
        params,
        run.eval_mode(),
        candidates,
        run.holdout_tasks,
        run.config.eval_rollouts,
        base,
    )?;
    Ok(Some(r.success_rate))
}

fn save_last_good(run: &RlRun, params: &PolicyParams, moments: &MomentState) -> Result<Option<PathBuf>> {
    let Some(dir) = &run.checkpoint_dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir).map_err(|e| LapoError::io(dir, e))?;
    let path = dir.join("rl_last_good.ckpt");
    Checkpoint {
        params: params.clone(),
        moments: Some(moments.clone()),
    }
    .write(&path)?;
    Ok(Some(path))
}

/// RL post-training from a warm checkpoint. Writes one metric record per
/// update through `on_update`; update 0 is the pre-training evaluation.
pub fn train_rl(
    run: &RlRun,
    init: PolicyParams,
    mut on_update: impl FnMut(&RlMetrics, &PolicyParams) -> Result<()>,
) -> Result<RlOutcome> {
    let dims = *init.dims();
    run.validate(dims.n_max)?;
    let cfg = run.config;
    let coeffs = LossCoeffs::from_config(cfg, run.mode, dims.n_max)?;
    let spec = RolloutSpec {
        mode: run.rollout_mode(),
        candidates: coeffs.candidates.clone(),
        sampling: ActionSampling::Temperature(cfg.temperature),
        sigma_explore: cfg.sigma_explore,
        reward_ablate: false,
    };
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut params = init;
    let mut moments = MomentState::zeros(&params);
    let lr: Vec<f64> = (0..params.len())
        .map(|i| {
            if params.is_value_group(i) {
                cfg.actor_lr * cfg.value_lr_mult
            } else {
                cfg.actor_lr
            }
        })
        .collect();
    let mut metrics = Vec::with_capacity(cfg.updates + 1);

    let first = match eval_record(run, &params, &coeffs.candidates, 0) {
        Err(e) if e.is_numeric() => {
            let saved = save_last_good(run, &params, &moments)?;
            let note = saved.map(|p| format!("; last good checkpoint at {}", p.display())).unwrap_or_default();
            return Err(LapoError::Numeric(format!("update 0: {e}{note}")));
        }
        other => other?,
    };
    on_update(&first, &params)?;
    metrics.push(first);

    let mut last_buf = None;
    for u in 1..=cfg.updates {
        let good_params = params.clone();
        let good_moments = moments.clone();
        let abort = |msg: String| -> Result<RlOutcome> {
            let saved = save_last_good(run, &good_params, &good_moments)?;
            let note = saved.map(|p| format!("; last good checkpoint at {}", p.display())).unwrap_or_default();
            Err(LapoError::Numeric(format!("update {u}: {msg}{note}")))
        };
        // Numeric failures anywhere in the update keep the last good state.
        macro_rules! guard {
            ($e:expr) => {
                match $e {
                    Err(e) if e.is_numeric() => return abort(e.to_string()),
                    other => other?,
                }
            };
        }
        let buf = guard!(collect_rollouts(&params, &run.episode_jobs(u), &spec, run.jobs));
        let mut adv = compute_gae(&buf, cfg.gamma, cfg.gae_lambda);
        let explained_var = explained_variance(&buf, &adv);
        if cfg.advantage_normalize {
            normalize_advantages(&buf, &mut adv);
        }
        let items: Vec<TrainItem> = buf
            .trajectories
            .iter()
            .zip(&adv)
            .flat_map(|(t, a)| {
                t.steps.iter().zip(a).filter(|(s, _)| s.valid).map(|(s, r)| TrainItem {
                    step: s,
                    advantage: r.advantage,
                    ret: r.ret,
                })
            })
            .collect();
        let mb_size = items.len().div_ceil(cfg.minibatches);
        let identity_dev = guard!(ratio_identity_dev(&params, &items, &coeffs, run.baseline, mb_size));

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(run.seed, 0x5eed_0000 + u as u64));
        let mut order: Vec<usize> = (0..items.len()).collect();
        let (mut ra, mut rz, mut re) = (Acc::default(), Acc::default(), Acc::default());
        let (mut clipped, mut clamped, mut seen) = (0usize, 0usize, 0usize);
        let mut losses = [0.0f64; 4];
        let mut grad_norms = Vec::new();
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(mb_size) {
                let mb: Vec<TrainItem> = chunk.iter().map(|&i| items[i]).collect();
                let mut tape = Tape::<f32>::new();
                let net = Net::bind(&params, &mut tape, true);
                let l = guard!(build_loss(&mut tape, &net, &mb, &coeffs, run.baseline));
                let total = tape.value(l.total).item() as f64;
                if !total.is_finite() {
                    return abort(format!("non-finite loss {total}"));
                }
                let g = guard!(tape.backward(l.total));
                let mut grads: Vec<Vec<f32>> = net.ids().iter().map(|&id| g.get(id).into_data()).collect();
                let norm = clip_global_norm(&mut grads, cfg.grad_clip);
                if !norm.is_finite() {
                    return abort(format!("non-finite gradient norm {norm}"));
                }
                grad_norms.push(norm);
                opt.step(&mut params, &mut moments, &grads, |i| lr[i])?;

                let r_a = f64s(&tape, l.r_a);
                clipped += r_a
                    .iter()
                    .filter(|&&r| r < 1.0 - cfg.eps_min || r > 1.0 + cfg.eps_max)
                    .count();
                clamped += f64s(&tape, l.logratio_a).iter().filter(|d| d.abs() >= RATIO_CLAMP).count();
                seen += l.batch;
                ra.push_all(r_a);
                if let Some(r) = l.r_z {
                    rz.push_all(f64s(&tape, r));
                }
                if let Some(r) = l.r_end {
                    re.push_all(f64s(&tape, r));
                }
                for (slot, node) in losses.iter_mut().zip([Some(l.action), l.latent, Some(l.value), l.end]) {
                    if let Some(n) = node {
                        *slot += tape.value(n).item() as f64;
                    }
                }
            }
        }
        let steps_taken = grad_norms.len().max(1) as f64;
        let stats = TrainStats {
            length_hist: buf.length_hist(coeffs.candidates.len()),
            rollout_success: buf.success_rate(),
            rollout_episode_steps: buf.mean_micro_steps(),
            valid_steps: items.len(),
            loss_action: losses[0] / steps_taken,
            loss_latent: losses[1] / steps_taken,
            loss_value: losses[2] / steps_taken,
            loss_end: losses[3] / steps_taken,
            ratio_a_mean: ra.mean(),
            ratio_a_min: ra.min_or_one(),
            ratio_a_max: ra.max_or_one(),
            ratio_z_mean: rz.mean(),
            ratio_z_min: rz.min_or_one(),
            ratio_z_max: rz.max_or_one(),
            ratio_end_mean: re.mean(),
            ratio_identity_dev: identity_dev,
            clip_frac: clipped as f64 / seen.max(1) as f64,
            ratio_clamped: clamped,
            explained_var,
            grad_norm: grad_norms.iter().sum::<f64>() / steps_taken,
            grad_norm_max: grad_norms.iter().copied().fold(0.0, f64::max),
        };
        let mut rec = if u % cfg.eval_every == 0 || u == cfg.updates {
            guard!(eval_record(run, &params, &coeffs.candidates, u))
        } else {
            RlMetrics {
                update: u,
                seen_success: None,
                holdout_success: guard!(holdout_success(run, &params, &coeffs.candidates)),
                mean_episode_steps: None,
                eval_length_counts: None,
                train: None,
            }
        };
        rec.train = Some(stats);
        on_update(&rec, &params)?;
        metrics.push(rec);
        last_buf = Some(buf);
    }
    if let (Some(path), Some(buf)) = (&run.dump_rollouts, &last_buf) {
        buf.write(path, dims.d_model, dims.n_act())?;
    }
    Ok(RlOutcome {
        params,
        moments,
        metrics,
    })
}
