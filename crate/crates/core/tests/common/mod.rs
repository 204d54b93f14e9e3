#![allow(dead_code)]

use lapo::config::LengthMode;
use lapo::env::{scripted_expert, DemoTrajectory, Suite, TaskSpec, VARIANTS_PER_SUITE};
use lapo::lapo::{
    collect_rollouts, total_loss, EpisodeJob, LossCoeffs, RolloutSpec, RolloutStep, TrainItem,
};
use lapo::latent::{LatentCache, LatentConfig};
use lapo::net::{candidate_positions, ActionSampling, LatentMode, Net};
use lapo::params::{PolicyDims, PolicyParams};
use lapo::sft::{sft_loss, SftSample, SftWeights};
use lapo::tape::{finite_diff_check, NodeId, Tape, TensorValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for 64-bit gradient checks.
pub const FD_H: f64 = 1e-6;

pub fn suite_tasks(suite: Suite) -> Vec<TaskSpec> {
    (0..VARIANTS_PER_SUITE).map(|v| TaskSpec::new(suite, v).unwrap()).collect()
}

pub fn demos(suite: Suite) -> Vec<DemoTrajectory> {
    suite_tasks(suite)
        .into_iter()
        .map(|t| scripted_expert(t, 0, 8).unwrap())
        .collect()
}

pub fn demos_and_cache(suite: Suite) -> (Vec<DemoTrajectory>, LatentCache) {
    let d = demos(suite);
    let c = LatentCache::precompute(&d, &LatentConfig::default()).unwrap();
    (d, c)
}

/// A slightly wider than default init so gradients are not vanishingly small.
pub fn params(seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(PolicyDims::default(), seed).unwrap();
    // Give the value head a non-zero output layer so its gradients flow.
    let n = p.names().iter().position(|s| s == "value.l3.w").unwrap();
    for (i, w) in p.tensors_mut()[n].data_mut().iter_mut().enumerate() {
        *w = 0.05 * ((i % 7) as f32 - 3.0);
    }
    p
}

pub fn flatten(p: &PolicyParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().iter().map(|&x| x as f64)).collect()
}

/// Binds a flat `f64` parameter vector as trainable leaves laid out like `p`.
pub fn bind_flat(p: &PolicyParams, flat: &[f64], tape: &mut Tape<f64>) -> Net {
    let mut off = 0;
    let mut ids: Vec<NodeId> = Vec::with_capacity(p.len());
    for t in p.tensors() {
        let n = t.numel();
        ids.push(tape.leaf(TensorValue::from_f64(t.shape(), &flat[off..off + n]).unwrap()));
        off += n;
    }
    Net::from_ids(p, ids)
}

pub fn gather_grads(g: &lapo::tape::Gradients<f64>, ids: &[NodeId]) -> Vec<f64> {
    ids.iter().flat_map(|&id| g.get(id).into_data()).collect()
}

/// Coordinates with a clearly non-zero analytic gradient, deterministic in `seed`.
pub fn informative_coords(grad: &[f64], count: usize, seed: u64) -> Vec<usize> {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-6).collect();
    assert!(live.len() >= count, "only {} informative coordinates", live.len());
    lapo::tape::sample_coords(live.len(), count, seed)
        .into_iter()
        .map(|i| live[i])
        .collect()
}

pub fn sft_batch(n: usize) -> Vec<SftSample> {
    let (demos, cache) = demos_and_cache(Suite::Reach);
    (0..n)
        .map(|i| SftSample::from_demo(&demos, &cache, i % demos.len(), i % 3, [2, 8, 4, 6][i % 4], 8).unwrap())
        .collect()
}

/// Max relative error of `sft_loss` gradients over 64 informative coordinates.
pub fn sft_fd_error() -> f64 {
    let p = params(11);
    let batch = sft_batch(3);
    let weights = SftWeights {
        latent: 1.0,
        end: 0.1,
        action: 1.0,
    };
    let cands = candidate_positions(8, 4).unwrap();
    let f = |x: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let net = bind_flat(&p, x, &mut tape);
        let l = sft_loss(&mut tape, &net, &batch, &weights, &cands, true)?;
        let g = tape.backward(l.total)?;
        Ok((tape.value(l.total).item(), gather_grads(&g, net.ids())))
    };
    let x0 = flatten(&p);
    let (_, g0) = f(&x0).unwrap();
    let coords = informative_coords(&g0, 64, 5);
    finite_diff_check(f, &x0, FD_H, &coords).unwrap()
}

/// Two recorded steps with latents, replayed under slightly moved parameters
/// so every ratio sits strictly inside the clip range.
pub fn lapo_fixture() -> (lapo::params::PolicyParams, Vec<lapo::lapo::RolloutStep>) {
    let p_old = params(21);
    let tasks = suite_tasks(Suite::Reach);
    let jobs: Vec<EpisodeJob> = (0..4)
        .map(|i| EpisodeJob {
            task: tasks[i],
            env_seed: i as u64,
            rng_seed: 50 + i as u64,
        })
        .collect();
    let spec = RolloutSpec {
        mode: LatentMode::AdaptiveSample { beta: 1.0 },
        candidates: candidate_positions(8, 4).unwrap(),
        sampling: ActionSampling::Temperature(1.6),
        sigma_explore: 0.0,
        reward_ablate: false,
    };
    let buf = collect_rollouts(&p_old, &jobs, &spec, 1).unwrap();
    let mut steps: Vec<_> = buf
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter().filter(|s| s.valid).cloned())
        .collect();
    steps.sort_by_key(|s| std::cmp::Reverse(s.n_z));
    steps.truncate(2);
    assert!(steps.iter().all(|s| s.n_z >= 2));
    let mut p = p_old.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in p.tensors_mut() {
        for w in t.data_mut() {
            *w += rng.random_range(-2e-3..2e-3);
        }
    }
    (p, steps)
}

/// Max relative error of `total_loss` gradients over 64 informative
/// coordinates, with every ratio strictly inside the clip range.
pub fn total_loss_fd_error() -> f64 {
    let (p, steps) = lapo_fixture();
    let items: Vec<TrainItem> = steps
        .iter()
        .zip([0.8, -0.6])
        .map(|(s, a)| TrainItem {
            step: s,
            advantage: a,
            ret: 1.5 * a,
        })
        .collect();
    let mut cfg = lapo::config::RlConfig::default();
    cfg.lambda1 = 0.5;
    cfg.lambda3 = 0.5;
    let c = LossCoeffs::from_config(&cfg, LengthMode::Adaptive, 8).unwrap();
    let f = |x: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let net = bind_flat(&p, x, &mut tape);
        let l = total_loss(&mut tape, &net, &items, &c)?;
        let r: Vec<f64> = [Some(l.r_a), l.r_z, l.r_end]
            .into_iter()
            .flatten()
            .flat_map(|id| tape.value(id).data().to_vec())
            .collect();
        assert!(r.iter().all(|&r| r > 0.8 + 1e-3 && r < 1.28 - 1e-3), "ratios {r:?}");
        let g = tape.backward(l.total)?;
        Ok((tape.value(l.total).item(), gather_grads(&g, net.ids())))
    };
    let x0 = flatten(&p);
    let (_, g0) = f(&x0).unwrap();
    let coords = informative_coords(&g0, 64, 6);
    finite_diff_check(f, &x0, FD_H, &coords).unwrap()
}

pub fn step(reward: f32, value: f32, done: bool) -> RolloutStep {
    RolloutStep {
        reward,
        value,
        done,
        valid: true,
        ..RolloutStep::padding(24)
    }
}

/// Brute force: A_t = sum_l (gamma lambda)^l delta_{t+l}, stopping at the
/// first terminal step.
pub fn gae_oracle(r: &[f64], v: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n && !done[t] { v[t + 1] } else { 0.0 };
            r[t] + gamma * next - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta[l];
                if done[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}
