mod common;

use lapo::config::{Baseline, LengthMode, RlConfig};
use lapo::env::{Suite, TaskSpec};
use lapo::lapo::*;
use lapo::metrics::RlMetrics;
use lapo::net::{candidate_positions, ActionSampling, LatentMode, Net};
use lapo::params::PolicyParams;
use lapo::tape::{Tape, TensorValue};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gae_matches_brute_force_on_random_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = 20;
        let r: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 5.0 } else { 0.0 }).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..4.0)).collect();
        let mut done: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        done[n - 1] = true;
        let steps: Vec<RolloutStep> = (0..n).map(|t| common::step(r[t] as f32, v[t] as f32, done[t])).collect();
        // Values are stored as f32; the oracle sees the same rounded numbers.
        let vr: Vec<f64> = steps.iter().map(|s| s.value as f64).collect();
        let got = gae(&steps, 0.99, 0.95);
        let want = common::gae_oracle(&r, &vr, &done, 0.99, 0.95);
        for t in 0..n {
            assert!((got[t].advantage - want[t]).abs() < 1e-6);
            assert!((got[t].ret - (want[t] + vr[t])).abs() < 1e-6);
        }
    }
}

#[test]
fn gae_closed_forms() {
    let steps = vec![common::step(1.0, 0.0, false), common::step(1.0, 0.0, false), common::step(1.0, 0.0, true)];
    let a: Vec<f64> = gae(&steps, 1.0, 1.0).iter().map(|r| r.advantage).collect();
    assert_eq!(a, vec![3.0, 2.0, 1.0]);
    let steps = vec![common::step(0.5, 0.0, false), common::step(2.0, 0.0, false), common::step(5.0, 0.0, true)];
    let a: Vec<f64> = gae(&steps, 0.99, 0.0).iter().map(|r| r.advantage).collect();
    assert_eq!(a, vec![0.5, 2.0, 5.0]);
}

#[test]
fn gae_ignores_padding() {
    let mut steps = vec![common::step(0.0, 0.3, false), common::step(5.0, 0.7, true)];
    let base = gae(&steps, 0.99, 0.95);
    steps.push(RolloutStep::padding(24));
    steps.push(RolloutStep::padding(24));
    let padded = gae(&steps, 0.99, 0.95);
    assert_eq!(&padded[..2], &base[..]);
    assert!(padded[2..].iter().all(|r| r.advantage == 0.0 && r.ret == 0.0));
}

fn scalar_ratio(d: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let new = tape.constant(TensorValue::from_f64(&[1], &[d]).unwrap());
    let r = ratio_action(&mut tape, new, &[0.0]).unwrap();
    tape.value(r).item()
}

#[test]
fn ratio_examples() {
    assert_eq!(scalar_ratio(0.0), 1.0);
    assert!((scalar_ratio(2f64.ln()) - 2.0).abs() < 1e-12);
    assert!((scalar_ratio(3f64.ln()) - 3.0).abs() < 1e-12);
    assert_eq!(scalar_ratio(50.0), 20f64.exp());
    assert_eq!(scalar_ratio(-50.0), (-20f64).exp());

    let mut tape = Tape::<f64>::new();
    let z = tape.constant(TensorValue::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
    let r = ratio_latent(&mut tape, z, &[vec![0.0, 0.0]], &[0], 1, 1.0).unwrap();
    assert!((tape.value(r).item() - (-1f64).exp()).abs() < 1e-12);
    let r = ratio_latent(&mut tape, z, &[vec![1.0, 1.0]], &[0], 1, 1.0).unwrap();
    assert_eq!(tape.value(r).item(), 1.0);
    let far = tape.constant(TensorValue::from_f64(&[1, 2], &[100.0, 0.0]).unwrap());
    let r = ratio_latent(&mut tape, far, &[vec![0.0, 0.0]], &[0], 1, 1.0).unwrap();
    assert_eq!(tape.value(r).item(), (-20f64).exp());
    assert!(ratio_latent(&mut tape, z, &[vec![0.0, 0.0]], &[0], 1, 0.0).is_err());
}

fn surrogate(r: f64, a: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let rn = tape.constant(TensorValue::from_f64(&[1], &[r]).unwrap());
    let s = clipped_surrogate(&mut tape, rn, &[a], 0.2, 0.28).unwrap();
    tape.value(s).item()
}

#[test]
fn surrogate_examples() {
    for a in [-2.0, 0.0, 1.5] {
        assert_eq!(surrogate(1.0, a), -a);
    }
    assert!((surrogate(2.0, 1.0) + 1.28).abs() < 1e-12);
    assert!((surrogate(0.5, -1.0) - 0.8).abs() < 1e-12);
    // Pessimistic bound: negative advantage with a large ratio is unclipped.
    assert!((surrogate(2.0, -1.0) - 2.0).abs() < 1e-12);
}

#[test]
fn latent_surrogate_pulls_toward_recorded_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let d = 6;
        let old: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cur: Vec<f64> = old.iter().map(|&x| x as f64 + rng.random_range(-0.2..0.2)).collect();
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(TensorValue::from_f64(&[1, d], &cur).unwrap());
        let r = ratio_latent(&mut tape, z, std::slice::from_ref(&old), &[0], 1, 1.0).unwrap();
        let rv = tape.value(r).item();
        assert!(rv > 0.8 && rv <= 1.0, "unclipped region");
        let s = clipped_surrogate(&mut tape, r, &[0.7], 0.2, 0.28).unwrap();
        let s = tape.scale(s, 0.1).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap().get(z).into_data();
        let inner: f64 = g.iter().zip(&old).zip(&cur).map(|((g, o), c)| -g * (*o as f64 - c)).sum();
        assert!(inner > 0.0);
    }
}

fn adaptive_spec(temp: f64) -> RolloutSpec {
    RolloutSpec {
        mode: LatentMode::AdaptiveSample { beta: 1.0 },
        candidates: candidate_positions(8, 4).unwrap(),
        sampling: ActionSampling::Temperature(temp),
        sigma_explore: 0.0,
        reward_ablate: false,
    }
}

fn jobs(n: usize, suite: Suite) -> Vec<EpisodeJob> {
    let tasks = common::suite_tasks(suite);
    (0..n)
        .map(|i| EpisodeJob {
            task: tasks[i % tasks.len()],
            env_seed: 1000 + i as u64,
            rng_seed: 2000 + i as u64,
        })
        .collect()
}

#[test]
fn rollouts_are_deterministic_padded_and_worker_independent() {
    let p = common::params(3);
    let js = jobs(6, Suite::PickPlace);
    let a = collect_rollouts(&p, &js, &adaptive_spec(1.6), 1).unwrap();
    let b = collect_rollouts(&p, &js, &adaptive_spec(1.6), 4).unwrap();
    assert_eq!(a, b);
    let len = a.trajectories[0].steps.len();
    for t in &a.trajectories {
        assert_eq!(t.steps.len(), len);
        let v = t.valid_len();
        assert!(t.steps[..v].iter().all(|s| s.valid));
        assert!(t.steps[v..].iter().all(|s| !s.valid));
        // Sparse scaled reward: zero except possibly 5 on the last valid step.
        for (i, s) in t.steps[..v].iter().enumerate() {
            if i + 1 < v {
                assert_eq!(s.reward, 0.0);
                assert!(!s.done);
            } else {
                assert!(s.done);
                assert!(s.reward == 0.0 || s.reward == 5.0);
                assert_eq!(s.reward == 5.0, t.success);
            }
            assert!(s.latents.len() >= 6 && s.latents.len() >= s.n_z);
        }
    }
}

fn items_of(buf: &RolloutBuffer, adv: &[Vec<AdvantageRecord>]) -> Vec<(usize, usize, f64, f64)> {
    buf.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.steps
                .iter()
                .enumerate()
                .map(move |(j, _)| (i, j, adv[i][j].advantage, adv[i][j].ret))
        })
        .collect()
}

fn train_items<'a>(buf: &'a RolloutBuffer, adv: &[Vec<AdvantageRecord>]) -> Vec<TrainItem<'a>> {
    items_of(buf, adv)
        .into_iter()
        .map(|(i, j, a, r)| TrainItem {
            step: &buf.trajectories[i].steps[j],
            advantage: a,
            ret: r,
        })
        .collect()
}

#[test]
fn recorded_log_probs_and_latents_recompute_exactly() {
    let p = common::params(4);
    let buf = collect_rollouts(&p, &jobs(5, Suite::Reach), &adaptive_spec(1.6), 1).unwrap();
    let mut adv = compute_gae(&buf, 0.99, 0.95);
    normalize_advantages(&buf, &mut adv);
    let items = train_items(&buf, &adv);
    let c = LossCoeffs::from_config(&RlConfig::default(), LengthMode::Adaptive, 8).unwrap();
    let mut tape = Tape::<f32>::new();
    let net = Net::bind(&p, &mut tape, false);
    let l = total_loss(&mut tape, &net, &items, &c).unwrap();
    let valid: Vec<&RolloutStep> = items.iter().filter(|i| i.step.valid).map(|i| i.step).collect();
    let lr = tape.value(l.logratio_a).data().to_vec();
    assert_eq!(lr.len(), valid.len());
    assert!(lr.iter().all(|d| d.abs() <= 1e-6));
    for r in [l.r_a, l.r_z.unwrap(), l.r_end.unwrap()] {
        assert!(tape.value(r).data().iter().all(|&x| x == 1.0), "{:?}", tape.value(r).data());
    }
}

#[test]
fn normalized_advantages_are_standardized_over_valid_steps() {
    let p = common::params(6);
    let buf = collect_rollouts(&p, &jobs(8, Suite::Reach), &adaptive_spec(1.6), 1).unwrap();
    let mut adv = compute_gae(&buf, 0.99, 0.95);
    normalize_advantages(&buf, &mut adv);
    let vals: Vec<f64> = items_of(&buf, &adv)
        .into_iter()
        .filter(|&(i, j, _, _)| buf.trajectories[i].steps[j].valid)
        .map(|x| x.2)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-6 || var == 0.0);
}

#[test]
fn loss_is_invariant_to_padding() {
    let p = common::params(7);
    let mut buf = collect_rollouts(&p, &jobs(4, Suite::Reach), &adaptive_spec(1.6), 1).unwrap();
    let adv = compute_gae(&buf, 0.99, 0.95);
    let c = LossCoeffs::from_config(&RlConfig::default(), LengthMode::Adaptive, 8).unwrap();
    let eval = |buf: &RolloutBuffer, adv: &[Vec<AdvantageRecord>]| {
        let items = train_items(buf, adv);
        let mut tape = Tape::<f32>::new();
        let net = Net::bind(&p, &mut tape, true);
        let l = total_loss(&mut tape, &net, &items, &c).unwrap();
        let g = tape.backward(l.total).unwrap();
        let grads: Vec<Vec<f32>> = net.ids().iter().map(|&id| g.get(id).into_data()).collect();
        (tape.value(l.total).item().to_bits(), grads)
    };
    let base = eval(&buf, &adv);
    for t in &mut buf.trajectories {
        t.steps.push(RolloutStep::padding(24));
        t.steps.insert(t.steps.len(), RolloutStep::padding(24));
    }
    let adv2 = compute_gae(&buf, 0.99, 0.95);
    assert_eq!(eval(&buf, &adv2), base);
    assert_eq!(explained_variance(&buf, &adv2), explained_variance(&buf, &compute_gae(&{
        let mut b = buf.clone();
        for t in &mut b.trajectories {
            t.steps.retain(|s| s.valid);
        }
        b
    }, 0.99, 0.95)));
}

#[test]
fn all_padding_minibatch_is_an_error() {
    let p = common::params(7);
    let pad = RolloutStep::padding(24);
    let items = [TrainItem {
        step: &pad,
        advantage: 1.0,
        ret: 1.0,
    }];
    let c = LossCoeffs::from_config(&RlConfig::default(), LengthMode::Adaptive, 8).unwrap();
    let mut tape = Tape::<f32>::new();
    let net = Net::bind(&p, &mut tape, true);
    assert!(total_loss(&mut tape, &net, &items, &c).is_err());
}

#[test]
fn lapo_with_zero_latent_weights_is_the_action_only_loss() {
    let p = common::params(8);
    let spec = RolloutSpec {
        mode: LatentMode::Fixed(0),
        ..adaptive_spec(1.6)
    };
    let buf = collect_rollouts(&p, &jobs(4, Suite::Reach), &spec, 1).unwrap();
    let mut adv = compute_gae(&buf, 0.99, 0.95);
    normalize_advantages(&buf, &mut adv);
    let items = train_items(&buf, &adv);
    let mut cfg = RlConfig::default();
    cfg.lambda1 = 0.0;
    cfg.lambda3 = 0.0;
    let c = LossCoeffs::from_config(&cfg, LengthMode::Fixed(0), 8).unwrap();
    let run = |ppo: bool| {
        let mut tape = Tape::<f32>::new();
        let net = Net::bind(&p, &mut tape, true);
        let l = if ppo {
            ppo_action_only_loss(&mut tape, &net, &items, &c).unwrap()
        } else {
            total_loss(&mut tape, &net, &items, &c).unwrap()
        };
        let g = tape.backward(l.total).unwrap();
        let bits: Vec<u32> = net
            .ids()
            .iter()
            .flat_map(|&id| g.get(id).into_data())
            .map(f32::to_bits)
            .collect();
        (tape.value(l.total).item().to_bits(), bits)
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn zero_reward_gives_no_learning_signal() {
    // Zero-initialized value output: v = 0 everywhere.
    let p = PolicyParams::init(lapo::params::PolicyDims::default(), 9).unwrap();
    let spec = RolloutSpec {
        reward_ablate: true,
        ..adaptive_spec(1.6)
    };
    let buf = collect_rollouts(&p, &jobs(6, Suite::Reach), &spec, 1).unwrap();
    let adv = compute_gae(&buf, 0.99, 0.95);
    for (t, a) in buf.trajectories.iter().zip(&adv) {
        for (j, (s, r)) in t.steps.iter().zip(a).enumerate() {
            if !s.valid {
                continue;
            }
            let next = t.steps.get(j + 1).filter(|n| n.valid && !s.done).map_or(0.0, |n| n.value as f64);
            let drift = s.value as f64 - 0.99 * next;
            assert_eq!(s.reward, 0.0);
            assert_eq!(s.value, 0.0);
            assert_eq!(r.advantage, -drift);
        }
    }
    let c = LossCoeffs::from_config(&RlConfig::default(), LengthMode::Adaptive, 8).unwrap();
    let items = train_items(&buf, &adv);
    let mut tape = Tape::<f32>::new();
    let net = Net::bind(&p, &mut tape, true);
    let l = total_loss(&mut tape, &net, &items, &c).unwrap();
    assert_eq!(tape.value(l.total).item(), 0.0);
    let g = tape.backward(l.total).unwrap();
    assert!(net.ids().iter().all(|&id| g.get(id).data().iter().all(|&x| x == 0.0)));
}

#[test]
fn rollout_file_round_trips() {
    let p = common::params(10);
    let buf = collect_rollouts(&p, &jobs(3, Suite::PickPlace), &adaptive_spec(1.6), 1).unwrap();
    let bytes = buf.encode(64, 24);
    assert_eq!(&bytes[..8], b"LAPOROL1");
    assert_eq!(RolloutBuffer::decode(&bytes).unwrap(), buf);
    let err = RolloutBuffer::decode(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("offset"), "{err}");
}

#[test]
fn holdout_split_excludes_variant() {
    let tasks = common::suite_tasks(Suite::Reach);
    let (train, held) = split_holdout(&tasks, Some(3));
    assert_eq!(train.len(), 9);
    assert_eq!(held, vec![TaskSpec::new(Suite::Reach, 3).unwrap()]);
    let (all, none) = split_holdout(&tasks, None);
    assert_eq!(all.len(), 10);
    assert!(none.is_empty());
}

fn tiny_rl(updates: usize) -> RlConfig {
    RlConfig {
        rollout_batch: 4,
        minibatches: 2,
        epochs: 2,
        eval_every: 2,
        eval_rollouts: 1,
        updates,
        ..RlConfig::default()
    }
}

#[test]
fn training_audits_holdout_logging_and_clipping() {
    let tasks = common::suite_tasks(Suite::Reach);
    let (train, held) = split_holdout(&tasks, Some(2));
    let cfg = tiny_rl(3);
    let run = RlRun {
        config: &cfg,
        mode: LengthMode::Adaptive,
        baseline: Baseline::Lapo,
        train_tasks: &train,
        holdout_tasks: &held,
        seed: 1,
        jobs: 1,
        checkpoint_dir: None,
        dump_rollouts: None,
    };
    for u in 1..=cfg.updates {
        assert!(run.episode_jobs(u).iter().all(|j| j.task.variant != 2));
    }
    let mut lines: Vec<RlMetrics> = Vec::new();
    let out = train_rl(&run, common::params(12), |m, _| {
        lines.push(m.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(out.metrics, lines);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].update, 0);
    assert!(lines[0].holdout_success.is_some() && lines[0].train.is_none());
    assert!(lines[2].holdout_success.is_some() && lines[3].holdout_success.is_some());
    assert!(lines[1].seen_success.is_none());
    assert!(lines.iter().all(|m| m.holdout_success.is_some()), "holdout logged every update");
    for m in &lines[1..] {
        let t = m.train.as_ref().unwrap();
        assert!(t.ratio_identity_dev <= 1e-5, "{}", t.ratio_identity_dev);
        assert!(t.grad_norm.is_finite());
        assert_eq!(t.length_hist.iter().sum::<usize>(), t.valid_steps);
    }
    // Overlapping train and holdout sets are refused.
    let bad = RlRun {
        holdout_tasks: &tasks,
        ..run.clone()
    };
    assert!(train_rl(&bad, common::params(12), |_, _| Ok(())).is_err());
}

#[test]
fn action_only_baseline_trainer_is_byte_identical_to_lapo_with_zero_latents() {
    let tasks = common::suite_tasks(Suite::Reach);
    let mut cfg = tiny_rl(2);
    cfg.lambda1 = 0.0;
    cfg.lambda3 = 0.0;
    let go = |baseline| {
        let run = RlRun {
            config: &cfg,
            mode: LengthMode::Fixed(0),
            baseline,
            train_tasks: &tasks,
            holdout_tasks: &[],
            seed: 4,
            jobs: 1,
            checkpoint_dir: None,
            dump_rollouts: None,
        };
        let out = train_rl(&run, common::params(13), |_, _| Ok(())).unwrap();
        let text: Vec<String> = out.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        (text, out.params.digest())
    };
    assert_eq!(go(Baseline::PpoActionOnly), go(Baseline::Lapo));
    // The baseline refuses configurations that carry latent terms.
    let run = RlRun {
        config: &RlConfig::default(),
        mode: LengthMode::Fixed(0),
        baseline: Baseline::PpoActionOnly,
        train_tasks: &tasks,
        holdout_tasks: &[],
        seed: 4,
        jobs: 1,
        checkpoint_dir: None,
        dump_rollouts: None,
    };
    assert!(train_rl(&run, common::params(13), |_, _| Ok(())).is_err());
}

#[test]
fn numeric_abort_keeps_last_good_checkpoint() {
    let tasks = common::suite_tasks(Suite::Reach);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_rl(1);
    let mut p = common::params(14);
    // Huge value-head weights overflow the value regression.
    for (i, name) in p.names().to_vec().iter().enumerate() {
        if name.starts_with("value.") && name.ends_with(".w") {
            for w in p.tensors_mut()[i].data_mut() {
                *w = 3e9;
            }
        }
    }
    let run = RlRun {
        config: &cfg,
        mode: LengthMode::Adaptive,
        baseline: Baseline::Lapo,
        train_tasks: &tasks,
        holdout_tasks: &[],
        seed: 0,
        jobs: 1,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        dump_rollouts: None,
    };
    let err = train_rl(&run, p.clone(), |_, _| Ok(())).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    let saved = lapo::params::Checkpoint::read(&dir.path().join("rl_last_good.ckpt")).unwrap();
    assert_eq!(saved.params.digest(), p.digest());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surrogate_is_the_pessimistic_bound(r in 0.01f64..5.0, a in -3.0f64..3.0) {
        let s = surrogate(r, a);
        let clipped = r.clamp(0.8, 1.28);
        prop_assert!((s + (r * a).min(clipped * a)).abs() < 1e-12);
        prop_assert!(s >= -r * a - 1e-12);
    }

    #[test]
    fn ratios_are_positive_and_bounded(d in -100.0f64..100.0) {
        let r = scalar_ratio(d);
        prop_assert!(r > 0.0 && r <= 20f64.exp());
    }
}
