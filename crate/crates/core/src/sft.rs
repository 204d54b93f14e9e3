//! Supervised warm-up: latent regression (cosine), `<latent_end>`
//! classification at every candidate up to the sampled length, and action
//! token cross-entropy, weighted 1 : 0.1 : 1 by default.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::token_of;
use crate::config::{LengthMode, SftConfig};
use crate::env::{DemoTrajectory, ACTION_DIMS};
use crate::error::{LapoError, Result};
use crate::latent::LatentCache;
use crate::metrics::SftMetrics;
use crate::net::{Net, SeqSpec};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{MomentState, PolicyParams};
use crate::tape::{Axis, NodeId, Scalar, Tape, TensorValue};

/// Denominator guard for the cosine term.
pub const COS_EPS: f64 = 1e-8;

/// Uniform draw from `lengths`, or the fixed length.
pub fn sample_train_length<R: Rng + ?Sized>(mode: LengthMode, lengths: &[usize], rng: &mut R) -> usize {
    match mode {
        LengthMode::Fixed(n) => n,
        LengthMode::Adaptive => lengths[rng.random_range(0..lengths.len())],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub obs: Vec<f32>,
    pub task: usize,
    pub n_z: usize,
    pub targets: Vec<Vec<f32>>,
    /// `N_a` tokens; entries past `valid_tokens` are padding.
    pub tokens: Vec<u32>,
    pub valid_tokens: usize,
}

impl SftSample {
    pub fn from_demo(
        demos: &[DemoTrajectory],
        cache: &LatentCache,
        traj: usize,
        t: usize,
        n_z: usize,
        horizon: usize,
    ) -> Result<Self> {
        let d = demos
            .get(traj)
            .ok_or_else(|| LapoError::Invalid(format!("no trajectory {traj}")))?;
        let step = d
            .steps
            .get(t)
            .ok_or_else(|| LapoError::Invalid(format!("trajectory {traj} has no step {t}")))?;
        let targets = (1..=n_z)
            .map(|j| cache.get(traj as u32, t as u32, j as u32).map(<[f32]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obs: step.observation.clone(),
            task: d.task.index(),
            n_z,
            targets,
            tokens: step.actions.iter().map(|&a| token_of(a)).collect(),
            valid_tokens: d.valid_actions(t, horizon) * ACTION_DIMS,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftWeights {
    pub latent: f64,
    pub end: f64,
    pub action: f64,
}

impl SftWeights {
    pub fn from_config(c: &SftConfig) -> Self {
        Self {
            latent: c.w_latent,
            end: c.w_end,
            action: c.w_action,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SftLoss {
    pub total: NodeId,
    pub latent: NodeId,
    pub end: NodeId,
    pub action: NodeId,
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, x: NodeId, w: Vec<f64>) -> Result<NodeId> {
    let n = w.len();
    let w = tape.constant(TensorValue::from_f64(&[n], &w)?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// Per-row `1 - cos(pred, target)`, `[n]`.
pub fn cosine_distance<T: Scalar>(tape: &mut Tape<T>, pred: NodeId, targets: &[Vec<f32>]) -> Result<NodeId> {
    let n = targets.len();
    let d = tape.shape(pred)[1];
    let flat: Vec<f64> = targets.iter().flat_map(|z| z.iter().map(|&x| x as f64)).collect();
    let norms: Vec<f64> = targets
        .iter()
        .map(|z| z.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let tgt = tape.constant(TensorValue::from_f64(&[n, d], &flat)?);
    let dot = tape.mul(pred, tgt)?;
    let dot = tape.sum_last(dot)?;
    let sq = tape.square(pred)?;
    let sq = tape.sum_last(sq)?;
    let pn = tape.sqrt(sq)?;
    let tn = tape.constant(TensorValue::from_f64(&[n], &norms)?);
    let denom = tape.mul(pn, tn)?;
    let eps = tape.constant(TensorValue::from_f64(&[1], &[COS_EPS])?);
    let denom = tape.add(denom, eps)?;
    let cos = tape.div(dot, denom)?;
    let one = tape.constant(TensorValue::from_f64(&[1], &[1.0])?);
    let neg = tape.neg(cos)?;
    tape.add(neg, one)
}

/// Records the warm-up loss for `batch` on `tape`. End supervision is
/// applied only when `adaptive`; `candidates` are the candidate lengths.
pub fn sft_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Net,
    batch: &[SftSample],
    weights: &SftWeights,
    candidates: &[usize],
    adaptive: bool,
) -> Result<SftLoss> {
    let b = batch.len();
    if b == 0 {
        return Err(LapoError::Invalid("empty SFT batch".into()));
    }
    let na = net.dims().n_act();
    for s in batch {
        if s.targets.len() != s.n_z || s.tokens.len() != na {
            return Err(LapoError::Invalid("SFT sample does not match its length".into()));
        }
    }
    let seqs: Vec<SeqSpec> = batch
        .iter()
        .map(|s| SeqSpec {
            obs: &s.obs,
            task: s.task,
            latents: &s.targets,
            n_z: s.n_z,
        })
        .collect();
    let fp = net.forward_full(tape, &seqs, None)?;
    let zero = || TensorValue::from_f64(&[], &[0.0]);

    let with_latents = batch.iter().filter(|s| s.n_z > 0).count();
    let latent = if with_latents > 0 {
        let mut which = Vec::new();
        let mut targets = Vec::new();
        let mut w = Vec::new();
        for (bi, s) in batch.iter().enumerate() {
            for k in 1..=s.n_z {
                which.push((bi, k));
                targets.push(s.targets[k - 1].clone());
                w.push(1.0 / (s.n_z * with_latents) as f64);
            }
        }
        let pred = net.full_latents(tape, &fp, &which)?;
        let dist = cosine_distance(tape, pred, &targets)?;
        weighted_sum(tape, dist, w)?
    } else {
        tape.constant(zero()?)
    };

    let non_final = &candidates[..candidates.len().saturating_sub(1)];
    let mut end_pairs = Vec::new();
    let mut labels = Vec::new();
    if adaptive {
        for (bi, s) in batch.iter().enumerate() {
            for &c in non_final.iter().filter(|&&c| c <= s.n_z) {
                end_pairs.push((bi, c));
                // Column 0 scores "end", column 1 "continue".
                labels.push(if c == s.n_z { 0 } else { 1 });
            }
        }
    }
    // Every candidate decision weighs the same, so the optimum is the true
    // hazard of the sampled lengths.
    let end = if !end_pairs.is_empty() {
        let w = vec![-1.0 / end_pairs.len() as f64; end_pairs.len()];
        let e = net.full_end_logits(tape, &fp, &end_pairs)?;
        let zeros = tape.constant(TensorValue::zeros(&[end_pairs.len(), 1]));
        let pair = tape.concat(&[e, zeros], Axis::Last)?;
        let ls = tape.log_softmax(pair)?;
        let picked = tape.select_last(ls, labels)?;
        weighted_sum(tape, picked, w)?
    } else {
        tape.constant(zero()?)
    };

    let logits = net.full_action_logits(tape, &fp)?;
    let lsm = tape.log_softmax(logits)?;
    let tokens: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.tokens.iter().map(|&t| t as usize))
        .collect();
    let picked = tape.select_last(lsm, tokens)?;
    let with_actions = batch.iter().filter(|s| s.valid_tokens > 0).count().max(1);
    let w: Vec<f64> = batch
        .iter()
        .flat_map(|s| {
            (0..na).map(move |j| {
                if j < s.valid_tokens {
                    -1.0 / (s.valid_tokens * with_actions) as f64
                } else {
                    0.0
                }
            })
        })
        .collect();
    let action = weighted_sum(tape, picked, w)?;

    let parts = [(latent, weights.latent), (end, weights.end), (action, weights.action)];
    let mut total: Option<NodeId> = None;
    for (node, w) in parts {
        let term = tape.scale(node, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(SftLoss {
        total: total.expect("three terms"),
        latent,
        end,
        action,
    })
}

/// Every `(trajectory, step)` with at least one real action.
pub fn sample_index(demos: &[DemoTrajectory]) -> Vec<(usize, usize)> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.micro_steps()).map(move |t| (i, t)))
        .collect()
}

/// Confirms every `(traj, t, j)` the loader can request is cached.
pub fn check_cache(demos: &[DemoTrajectory], cache: &LatentCache, max_len: usize) -> Result<()> {
    for (i, t) in sample_index(demos) {
        for j in 1..=max_len {
            cache.get(i as u32, t as u32, j as u32)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SftRun<'a> {
    pub config: &'a SftConfig,
    pub mode: LengthMode,
    pub candidates: &'a [usize],
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub moments: MomentState,
    pub metrics: Vec<SftMetrics>,
}

/// Warm-up loop; `on_step` sees every metric record as it is produced.
pub fn train_sft(
    run: &SftRun,
    demos: &[DemoTrajectory],
    cache: &LatentCache,
    init: PolicyParams,
    mut on_step: impl FnMut(&SftMetrics) -> Result<()>,
) -> Result<SftOutcome> {
    let cfg = run.config;
    let horizon = init.dims().horizon;
    let index = sample_index(demos);
    if index.is_empty() && cfg.steps > 0 {
        return Err(LapoError::Invalid("no demonstration steps to train on".into()));
    }
    let max_len = match run.mode {
        LengthMode::Fixed(n) => n,
        LengthMode::Adaptive => cfg.train_lengths.iter().copied().max().unwrap_or(0),
    };
    check_cache(demos, cache, max_len)?;
    let adaptive = run.mode == LengthMode::Adaptive;
    let weights = SftWeights::from_config(cfg);
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut params = init;
    let mut moments = MomentState::zeros(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5f7_0001);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let (i, t) = index[rng.random_range(0..index.len())];
                let n_z = sample_train_length(run.mode, &cfg.train_lengths, &mut rng);
                SftSample::from_demo(demos, cache, i, t, n_z, horizon)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::<f32>::new();
        let net = Net::bind(&params, &mut tape, true);
        let loss = sft_loss(&mut tape, &net, &batch, &weights, run.candidates, adaptive)?;
        let g = tape.backward(loss.total)?;
        let grads: Vec<Vec<f32>> = net.ids().iter().map(|&id| g.get(id).into_data()).collect();
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr_ratio);
        opt.step(&mut params, &mut moments, &grads, |_| lr)?;
        let m = SftMetrics {
            step,
            loss_total: tape.value(loss.total).item() as f64,
            loss_latent: tape.value(loss.latent).item() as f64,
            loss_end: tape.value(loss.end).item() as f64,
            loss_action: tape.value(loss.action).item() as f64,
            lr,
        };
        if !m.loss_total.is_finite() {
            return Err(LapoError::Numeric(format!("non-finite SFT loss at step {step}")));
        }
        on_step(&m)?;
        metrics.push(m);
    }
    Ok(SftOutcome {
        params,
        moments,
        metrics,
    })
}
