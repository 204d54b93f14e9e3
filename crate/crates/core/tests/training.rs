mod common;

use lapo::config::{LengthMode, SftConfig};
use lapo::env::Suite;
use lapo::eval::{evaluate_expert, evaluate_policy};
use lapo::net::{candidate_positions, DecideOptions, ActionSampling, LatentMode, Net, Session};
use lapo::optim::AdamW;
use lapo::params::{Checkpoint, MomentState, PolicyDims, PolicyParams};
use lapo::sft::{sft_loss, train_sft, SftRun, SftSample, SftWeights};
use lapo::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_sft(steps: usize, seed: u64, mode: LengthMode) -> lapo::sft::SftOutcome {
    let (demos, cache) = common::demos_and_cache(Suite::Reach);
    let cfg = SftConfig {
        steps,
        batch_size: 8,
        ..SftConfig::default()
    };
    let cands = candidate_positions(8, 4).unwrap();
    let run = SftRun {
        config: &cfg,
        mode,
        candidates: &cands,
        seed,
    };
    train_sft(&run, &demos, &cache, PolicyParams::init(PolicyDims::default(), 0).unwrap(), |_| Ok(())).unwrap()
}

#[test]
fn full_batch_descent_is_monotone() {
    let (demos, cache) = common::demos_and_cache(Suite::Reach);
    let batch: Vec<SftSample> = (0..8)
        .map(|i| SftSample::from_demo(&demos, &cache, i, 1, [2, 4, 6, 8][i % 4], 8).unwrap())
        .collect();
    let cands = candidate_positions(8, 4).unwrap();
    let weights = SftWeights {
        latent: 1.0,
        end: 0.1,
        action: 1.0,
    };
    let mut p = PolicyParams::init(PolicyDims::default(), 1).unwrap();
    let mut st = MomentState::zeros(&p);
    let opt = AdamW::default();
    let mut losses = Vec::new();
    for _ in 0..20 {
        let mut tape = Tape::<f32>::new();
        let net = Net::bind(&p, &mut tape, true);
        let l = sft_loss(&mut tape, &net, &batch, &weights, &cands, true).unwrap();
        losses.push(tape.value(l.total).item());
        let g = tape.backward(l.total).unwrap();
        let grads: Vec<Vec<f32>> = net.ids().iter().map(|&id| g.get(id).into_data()).collect();
        opt.step(&mut p, &mut st, &grads, |_| 3e-4).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn sft_smoke() {
    let zero = run_sft(0, 3, LengthMode::Adaptive);
    assert_eq!(zero.params.digest(), PolicyParams::init(PolicyDims::default(), 0).unwrap().digest());
    assert!(zero.metrics.is_empty());

    let a = run_sft(20, 3, LengthMode::Adaptive);
    let b = run_sft(20, 3, LengthMode::Adaptive);
    assert_eq!(a.params.digest(), b.params.digest());
    assert_eq!(a.metrics, b.metrics);
    let head: f64 = a.metrics[..5].iter().map(|m| m.loss_total).sum();
    let tail: f64 = a.metrics[15..].iter().map(|m| m.loss_total).sum();
    assert!(tail < head, "loss went from {head} to {tail}");
    assert!(a.metrics.iter().all(|m| m.loss_end > 0.0));

    let c = run_sft(20, 4, LengthMode::Adaptive);
    assert_ne!(c.params.digest(), a.params.digest());
    let f = run_sft(5, 3, LengthMode::Fixed(0));
    assert!(f.metrics.iter().all(|m| m.loss_latent == 0.0 && m.loss_end == 0.0));
}

#[test]
fn checkpoint_round_trip_reproduces_forward_outputs() {
    let out = run_sft(5, 1, LengthMode::Adaptive);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    Checkpoint {
        params: out.params.clone(),
        moments: Some(out.moments.clone()),
    }
    .write(&path)
    .unwrap();
    let back = Checkpoint::read(&path).unwrap();
    let opts = DecideOptions {
        mode: LatentMode::AdaptiveSample { beta: 1.0 },
        candidates: candidate_positions(8, 4).unwrap(),
        sampling: ActionSampling::Temperature(1.6),
        sigma_explore: 0.0,
    };
    let obs = lapo::env::ChunkGridEnv::reset(common::suite_tasks(Suite::Reach)[2], 5)
        .unwrap()
        .observation();
    let mut s1 = Session::new(&out.params);
    let mut s2 = Session::new(&back.params);
    for seed in 0..5 {
        let d1 = s1.decide(&obs, 2, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let d2 = s2.decide(&obs, 2, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(d1, d2);
    }
    assert_eq!(back.moments.unwrap().step, out.moments.step);
}

#[test]
fn expert_evaluation_is_perfect() {
    let tasks: Vec<_> = Suite::ALL.iter().flat_map(|&s| common::suite_tasks(s)).collect();
    let r = evaluate_expert(&tasks, 3, 11, 8).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert!(r.per_task.iter().all(|t| t.successes == 3));
}

#[test]
fn evaluation_does_not_depend_on_task_order() {
    let p = common::params(2);
    let mut tasks = common::suite_tasks(Suite::Reach);
    let a = evaluate_policy(&p, LatentMode::Fixed(2), &[2, 4, 6, 8], &tasks, 2, 9).unwrap();
    tasks.reverse();
    let b = evaluate_policy(&p, LatentMode::Fixed(2), &[2, 4, 6, 8], &tasks, 2, 9).unwrap();
    let mut pa = a.per_task.clone();
    let mut pb = b.per_task.clone();
    pa.sort_by_key(|t| t.task.index());
    pb.sort_by_key(|t| t.task.index());
    assert_eq!(pa, pb);
    assert_eq!(a.success_rate, b.success_rate);
    assert_eq!(a.length_counts, b.length_counts);
    assert_eq!(a.length_counts[2], a.length_counts.iter().sum::<usize>());
}
