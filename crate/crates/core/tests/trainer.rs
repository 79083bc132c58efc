mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::oracles::lambda_return_oracle;
use common::{tiny_run_config, ALL_MECHANISMS};
use goalnav::config::{RewardConfig, TrainConfig};
use goalnav::fusion::Mechanism;
use goalnav::model::{ActOutput, NavModel};
use goalnav::numerics::{Adam, Graph, Tensor};
use goalnav::policy::{PolicyState, START_TOKEN};
use goalnav::trainer::{
    collect_rollouts, compute_reward, gae, minibatch_gradients, ppo_loss, ppo_update, read_metrics, train, Actor,
    Carry, EpisodeSource, LossInputs, ModelActor, NavEnv, RolloutBuffer, Trainer, METRICS_HEADER,
};
use goalnav::worldsim::{render, Action, DistanceField, RgbImage};
use goalnav::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gae_matches_lambda_return_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..60 {
        let len = rng.random_range(1..24);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let with_dones = case % 2 == 1;
        let dones: Vec<bool> = (0..len).map(|_| with_dones && rng.random_bool(0.2)).collect();
        let bootstrap = rng.random_range(-2.0..2.0);
        for lambda in [0.0, 0.5, 1.0] {
            let (adv, ret) = gae(&r, &v, &dones, bootstrap, 0.97, lambda);
            let oracle = lambda_return_oracle(&r, &v, &dones, bootstrap, 0.97, lambda);
            for t in 0..len {
                assert!((adv[t] - oracle[t]).abs() < 1e-10, "case {case} λ={lambda} t={t}: {} vs {}", adv[t], oracle[t]);
                assert_eq!(ret[t], adv[t] + v[t]);
            }
        }
    }
}

#[test]
fn gae_lambda_one_is_discounted_sum() {
    let r = [0.5, -1.0, 2.0, 0.25];
    let v = [0.1, 0.2, -0.3, 0.4];
    let (adv, _) = gae(&r, &v, &[false; 4], 1.5, 0.9, 1.0);
    for t in 0..4 {
        let mut g = 0.0;
        for k in t..4 {
            g += 0.9f64.powi((k - t) as i32) * r[k];
        }
        g += 0.9f64.powi((4 - t) as i32) * 1.5;
        assert!((adv[t] - (g - v[t])).abs() < 1e-12);
    }
}

fn ppo_cfg() -> TrainConfig {
    TrainConfig {
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..TrainConfig::default()
    }
}

/// Actor loss and its gradient with respect to the logits of one row.
fn actor_case(logits: [f64; 4], action: usize, old_logp: f64, adv: f64) -> (f64, Vec<f64>) {
    let store = goalnav::numerics::ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let l = g.input_with_grad(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
    let v = g.input(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let old = [old_logp as f32];
    let inp = LossInputs {
        actions: &[action],
        old_log_probs: &old,
        advantages: &[adv],
        returns: &[0.0],
    };
    let terms = ppo_loss(&mut g, l, v, &inp, &ppo_cfg()).unwrap();
    let grads = g.backward(terms.actor).unwrap();
    (g.value(terms.actor).data()[0], grads.wrt(l).unwrap().to_vec())
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn clipped_ratio_blocks_the_actor_gradient() {
    // Use logits whose log-probability is exactly representable in f32 so
    // the stored old log-probability sets the ratio precisely.
    let logits = [0.0; 4];
    let logp = -(4f64.ln());
    let eps: f64 = 0.2;
    // Ratio 1 + 2ε with positive advantage: clipped branch, zero gradient.
    let old = logp - (1.0 + 2.0 * eps).ln();
    let (loss, grad) = actor_case(logits, 1, old as f32 as f64, 1.5);
    assert!(grad.iter().all(|g| *g == 0.0), "{grad:?}");
    let ratio = (logp - old as f32 as f64).exp();
    assert!(ratio > 1.0 + eps);
    assert!((loss - -(1.0 + eps) * 1.5).abs() < 1e-12, "{loss}");
}

#[test]
fn unclipped_ratio_gives_the_policy_gradient() {
    let logits = [0.3, -0.2, 0.1, 0.5];
    let p = softmax(&logits);
    let action = 2;
    let logp = p[action].ln();
    let adv = 0.8;
    let (loss, grad) = actor_case(logits, action, logp as f32 as f64, adv);
    let r = (logp - logp as f32 as f64).exp();
    assert!((loss + r * adv).abs() < 1e-7);
    for j in 0..4 {
        let expected = -adv * r * (if j == action { 1.0 } else { 0.0 } - p[j]);
        assert!((grad[j] - expected).abs() < 1e-7, "{j}: {} vs {expected}", grad[j]);
    }
}

#[test]
fn negative_advantage_follows_the_pessimistic_branch() {
    let logits = [0.0; 4];
    let logp = -(4f64.ln());
    // A < 0 above the band: the unclipped term is smaller and keeps its gradient.
    let old = logp - 1.4f64.ln();
    let (_, grad) = actor_case(logits, 0, old as f32 as f64, -1.0);
    assert!(grad.iter().any(|g| g.abs() > 1e-3), "{grad:?}");
    // A < 0 below the band: the clipped term is smaller, so no gradient.
    let old = logp - 0.6f64.ln();
    let (_, grad) = actor_case(logits, 0, old as f32 as f64, -1.0);
    assert!(grad.iter().all(|g| *g == 0.0), "{grad:?}");
}

#[test]
fn on_policy_actor_loss_is_zero_after_normalization() {
    let mut adv: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
    goalnav::trainer::normalize(&mut adv);
    let store = goalnav::numerics::ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let logits: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let actions: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let old: Vec<f32> = (0..16)
        .map(|i| goalnav::numerics::log_softmax_row(&logits[i * 4..i * 4 + 4])[actions[i]] as f32)
        .collect();
    let l = g.input(Tensor::new(vec![16, 4], logits).unwrap());
    let v = g.input(Tensor::zeros(vec![16, 1]));
    let inp = LossInputs {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &[0.0; 16],
    };
    let t = ppo_loss(&mut g, l, v, &inp, &ppo_cfg()).unwrap();
    assert!(g.value(t.actor).data()[0].abs() < 1e-6);
    let uniform = g.input(Tensor::zeros(vec![16, 4]));
    let t = ppo_loss(&mut g, uniform, v, &inp, &ppo_cfg()).unwrap();
    assert!((g.value(t.entropy).data()[0] - 4f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn surrogate_is_pessimistic(l in prop::array::uniform4(-3.0f64..3.0), shift in -1.0f64..1.0, adv in 0.01f64..3.0, a in 0usize..4) {
        let logp = goalnav::numerics::log_softmax_row(&l)[a];
        let old = (logp + shift) as f32 as f64;
        let (loss, _) = actor_case(l, a, old, adv);
        let ratio = (logp - old).exp();
        // Loss is the negated surrogate; the surrogate never exceeds r·A.
        prop_assert!(-loss <= ratio * adv + 1e-9);
    }
}

fn episode_env(seed: u64) -> NavEnv {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(Mechanism::Late, dir.path());
    let source = Arc::new(EpisodeSource::from_config(&cfg).unwrap());
    NavEnv::new(0, seed, source).unwrap()
}

#[test]
fn distance_shaping_telescopes() {
    let reward = RewardConfig {
        c_a: 0.0,
        c_s: 0.0,
        c_slack: 0.0,
        ..RewardConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let env = episode_env(seed);
        let ep = env.episode().clone();
        let field = DistanceField::from_pose(ep.grid(), &ep.goal);
        let mut pose = ep.start;
        let mut total = 0.0;
        for _ in 0..rng.random_range(5..80) {
            let a = [Action::MoveForward, Action::MoveForward, Action::TurnLeft, Action::TurnRight][rng.random_range(0..4)];
            let (next, _) = goalnav::worldsim::step(ep.grid(), &pose, a);
            total += compute_reward(&pose, &next, a, &ep.goal, &field, &reward);
            pose = next;
        }
        let expected = field.distance_at(ep.start.x, ep.start.y) - field.distance_at(pose.x, pose.y);
        assert!((total - expected).abs() < 1e-9, "seed {seed}: {total} vs {expected}");
    }
}

/// Plays a fixed action list through one-hot logits and marks the hidden
/// state with the step count.
struct Scripted {
    actions: Vec<Action>,
    calls: AtomicUsize,
    hidden: usize,
}

impl Actor for Scripted {
    fn act(&self, obs: &[&RgbImage], _: &[&RgbImage], _: &[usize], _: &PolicyState) -> goalnav::Result<ActOutput> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        let a = self.actions[k.min(self.actions.len() - 1)].index();
        let mut row = [-1e4f32; 4];
        row[a] = 0.0;
        let n = obs.len();
        Ok(ActOutput {
            logits: vec![row; n],
            values: vec![k as f32 * 0.5; n],
            state: PolicyState {
                layers: vec![Tensor::full(vec![n, self.hidden], (k + 1) as f32)],
            },
        })
    }
}

#[test]
fn rollout_matches_hand_stepped_trace() {
    let env = episode_env(11);
    let mut manual = env.clone();
    let mut envs = vec![env];
    let script = vec![Action::MoveForward, Action::TurnLeft, Action::MoveForward, Action::Stop];
    let actor = Scripted {
        actions: script.clone(),
        calls: AtomicUsize::new(0),
        hidden: 3,
    };
    let camera = goalnav::worldsim::Camera {
        hfov_deg: 90.0,
        resolution: 32,
    };
    let reward = RewardConfig::default();
    let mut carry = Carry::new(PolicyState {
        layers: vec![Tensor::zeros(vec![1, 3])],
    });
    let buf = collect_rollouts(&mut envs, &actor, &mut carry, 4, &camera, &reward).unwrap();
    let mut prev = START_TOKEN;
    for (t, a) in script.iter().enumerate() {
        let obs = render(manual.episode().grid(), &manual.pose(), &camera).unwrap();
        assert_eq!(buf.observations[t], obs, "observation {t}");
        assert_eq!(buf.prev_actions[t], prev);
        let out = manual.step(*a, &reward).unwrap();
        assert_eq!(buf.actions[t], a.index());
        assert_eq!(buf.log_probs[t], 0.0);
        assert_eq!(buf.values[t], t as f32 * 0.5);
        assert_eq!(buf.rewards[t], out.reward, "reward {t}");
        assert_eq!(buf.dones[t], out.done);
        prev = if out.done { START_TOKEN } else { a.index() };
    }
    assert!(buf.dones[3]);
    assert_eq!(buf.bootstrap, vec![2.0]);
    assert_eq!(buf.finished.len(), 1);
    // Hidden state entering each step is the previous output.
    assert_eq!(buf.hidden_in[0].layers[0].data(), &[0.0; 3]);
    assert_eq!(buf.hidden_in[2].layers[0].data(), &[2.0; 3]);
    // The episode ended at the last step, so the carried state is zero.
    assert_eq!(carry.state.layers[0].data(), &[0.0; 3]);
    assert_eq!(carry.prev_actions, vec![START_TOKEN]);
}

#[test]
fn done_zeroes_the_next_hidden_state() {
    let mut envs = vec![episode_env(5), episode_env(6)];
    let actor = Scripted {
        actions: vec![Action::TurnLeft, Action::Stop, Action::TurnLeft, Action::TurnLeft],
        calls: AtomicUsize::new(0),
        hidden: 2,
    };
    let camera = goalnav::worldsim::Camera {
        hfov_deg: 90.0,
        resolution: 32,
    };
    let mut carry = Carry::new(PolicyState {
        layers: vec![Tensor::zeros(vec![2, 2])],
    });
    let buf = collect_rollouts(&mut envs, &actor, &mut carry, 4, &camera, &RewardConfig::default()).unwrap();
    assert!(buf.dones[2] && buf.dones[3]);
    assert_eq!(buf.hidden_in[1].layers[0].data(), &[1.0; 4]);
    assert_eq!(buf.hidden_in[2].layers[0].data(), &[0.0; 4]);
    assert!(buf.reset_before(4) && buf.reset_before(5) && !buf.reset_before(2));
    assert_eq!(&buf.prev_actions[4..6], &[START_TOKEN, START_TOKEN]);
}

fn model_buffer(mechanism: Mechanism, seed: u64) -> (NavModel, goalnav::numerics::ParamStore<f32>, RolloutBuffer, TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(mechanism, dir.path());
    let (model, store) = NavModel::new(&cfg.fusion, &cfg.policy, cfg.world.resolution, seed).unwrap();
    let source = Arc::new(EpisodeSource::from_config(&cfg).unwrap());
    let mut envs: Vec<NavEnv> = (0..cfg.train.num_envs)
        .map(|i| NavEnv::new(i, seed, Arc::clone(&source)).unwrap())
        .collect();
    let mut carry = Carry::new(PolicyState::zeros(&cfg.policy, envs.len()));
    let actor = ModelActor {
        model: &model,
        store: &store,
    };
    let mut buf = collect_rollouts(&mut envs, &actor, &mut carry, 12, &cfg.world.camera(), &cfg.reward).unwrap();
    buf.compute_advantages(cfg.train.gamma, cfg.train.gae_lambda);
    (model, store, buf, cfg.train)
}

#[test]
fn rollouts_are_deterministic_and_advantages_normalized() {
    let (_, _, a, _) = model_buffer(Mechanism::Late, 2);
    let (_, _, b, _) = model_buffer(Mechanism::Late, 2);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.log_probs, b.log_probs);
    assert_eq!(a.observations, b.observations);
    let n = a.advantages.len() as f64;
    let mean = a.advantages.iter().sum::<f64>() / n;
    let std = (a.advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6, "{mean} {std}");
}

#[test]
fn chunked_encoder_backward_matches_single_pass() {
    for mech in ALL_MECHANISMS {
        let (model, mut store, buf, mut cfg) = model_buffer(mech, 4);
        cfg.encoder_chunk = 5;
        minibatch_gradients(&model, &mut store, &buf, &[1, 0], &cfg).unwrap();
        let chunked: Vec<_> = store.iter().map(|(_, p)| p.grad.clone()).collect();
        cfg.encoder_chunk = 10_000;
        minibatch_gradients(&model, &mut store, &buf, &[1, 0], &cfg).unwrap();
        let mut touched = 0;
        for ((_, p), c) in store.iter().zip(&chunked) {
            match (&p.grad, c) {
                (Some(a), Some(b)) => {
                    touched += 1;
                    let scale = a.data().iter().fold(1e-6f32, |m, v| m.max(v.abs()));
                    let diff = a.max_abs_diff(b);
                    assert!(diff <= 1e-4 * scale, "{mech:?} {}: {diff} vs scale {scale}", p.name);
                }
                (None, None) => {}
                _ => panic!("{mech:?} {}: gradient presence differs", p.name),
            }
        }
        assert!(touched > 10, "{mech:?}");
    }
}

#[test]
fn non_finite_loss_aborts_without_touching_parameters() {
    let (model, mut store, mut buf, cfg) = model_buffer(Mechanism::Mid, 1);
    buf.advantages[3] = f64::NAN;
    let before: Vec<_> = store.iter().map(|(_, p)| p.value.clone()).collect();
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = ppo_update(&model, &mut store, &mut adam, &buf, &cfg, 1e-3, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    for ((_, p), b) in store.iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
    assert_eq!(adam.step, 0);
}

#[test]
fn update_changes_parameters_and_reports_losses() {
    let (model, mut store, buf, cfg) = model_buffer(Mechanism::Skip, 3);
    let before: Vec<_> = store.iter().map(|(_, p)| p.value.clone()).collect();
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stats = ppo_update(&model, &mut store, &mut adam, &buf, &cfg, 1e-3, &mut rng).unwrap();
    assert_eq!(adam.step, (cfg.epochs * cfg.minibatches) as u64);
    assert!(stats.entropy > 1.0 && stats.entropy <= 4f64.ln() + 1e-6, "{stats:?}");
    assert!(stats.value_loss.is_finite() && stats.actor_loss.is_finite());
    let moved = store.iter().zip(&before).filter(|((_, p), b)| &p.value != *b).count();
    assert!(moved > store.len() / 2, "{moved} of {}", store.len());
}

#[test]
fn one_rollout_budget_means_one_update() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(Mechanism::Early, dir.path());
    cfg.train.total_steps = 32;
    let out = train(&cfg, None, None).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].step, 32);
    let (hash, rows) = read_metrics(&out.metrics).unwrap();
    assert_eq!(hash, cfg.hash());
    assert_eq!(rows.len(), 1);
    assert_eq!(out.checkpoints.len(), 1);
    let text = std::fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(text.lines().nth(1), Some(METRICS_HEADER));
}

#[test]
fn partial_last_rollout_consumes_the_exact_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(Mechanism::Late, dir.path());
    cfg.train.total_steps = 40;
    cfg.episodes.probe_episodes = 0;
    let out = train(&cfg, None, None).unwrap();
    let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![32, 40]);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let cfg_a = tiny_run_config(Mechanism::Mid, a_dir.path());
    let cfg_b = tiny_run_config(Mechanism::Mid, b_dir.path());
    let full = train(&cfg_a, None, None).unwrap();
    let first = train(&cfg_b, None, Some(1)).unwrap();
    assert_eq!(first.records.len(), 1);
    let rest = train(&cfg_b, first.last_checkpoint(), None).unwrap();
    assert_eq!(rest.records.len(), full.records.len() - 1);
    assert_eq!(rest.records[0], full.records[1]);
    assert_eq!(
        std::fs::read(&full.metrics).unwrap(),
        std::fs::read(&rest.metrics).unwrap()
    );
    let mut t = Trainer::from_checkpoint(&cfg_b, &goalnav::numerics::Checkpoint::load(first.last_checkpoint().unwrap()).unwrap()).unwrap();
    assert_eq!(t.updates(), 1);
    assert_eq!(t.update().unwrap(), full.records[1]);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(Mechanism::Late, dir.path());
    let first = train(&cfg, None, Some(1)).unwrap();
    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    let err = train(&other, first.last_checkpoint(), None).unwrap_err();
    assert!(err.to_string().contains("hash"), "{err}");
}
