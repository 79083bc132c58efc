#![allow(dead_code)]

pub mod oracles;

use goalnav::fusion::{BackboneSpec, EncoderInput, FusionConfig, Mechanism};
use goalnav::model::NavModel;
use goalnav::numerics::{gradient_check, GradSample, ParamStore, Tensor};
use goalnav::policy::PolicyConfig;
use goalnav::worldsim::{sample_episode, Camera, RgbImage, World, DEFAULT_CELL_SIZE, TRAIN_BANDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_fusion(mechanism: Mechanism) -> FusionConfig {
    FusionConfig {
        backbone: BackboneSpec::with_widths(8, [8, 8, 16, 16], 16),
        skip_k: 4,
        skip_hidden: 8,
        ..FusionConfig::with_mechanism(mechanism)
    }
}

pub fn small_policy() -> PolicyConfig {
    PolicyConfig {
        hidden_size: 16,
        action_embed_dim: 4,
        recurrent_layers: 1,
    }
}

/// Observation/goal view pair from a generated episode.
pub fn view_pair(seed: u64, resolution: usize) -> (RgbImage, RgbImage) {
    let world = World::generate(seed, 8.0, DEFAULT_CELL_SIZE).unwrap();
    let camera = Camera { hfov_deg: 90.0, resolution };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = sample_episode(&world, 0, &mut rng, TRAIN_BANDS[0], &camera).unwrap();
    let obs = goalnav::worldsim::render(&world.grid, &ep.start, &camera).unwrap();
    (obs, ep.goal_image)
}

pub const ALL_MECHANISMS: [Mechanism; 4] = [Mechanism::Late, Mechanism::Early, Mechanism::Mid, Mechanism::Skip];

/// Central differences against reverse mode through encoder, FiLM, GRU,
/// and both heads, evaluated in f64 on `samples` random parameters.
pub fn model_gradient_check(mechanism: Mechanism, seed: u64, samples: usize) -> Vec<GradSample> {
    model_gradient_check_eps(mechanism, seed, samples, 1e-3)
}

pub fn model_gradient_check_eps(mechanism: Mechanism, seed: u64, samples: usize, eps: f64) -> Vec<GradSample> {
    let res = 32;
    let fusion = small_fusion(mechanism);
    let (model, store) = NavModel::new(&fusion, &small_policy(), res, seed).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    // Randomize FiLM maps so the conditioning path carries gradient.
    let film_ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("film.")).map(|(id, _)| id).collect();
    for id in film_ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let (o1, g1) = view_pair(seed, res);
    let (o2, g2) = view_pair(seed + 1, res);
    let input: EncoderInput<f64> = EncoderInput::from_images(&[&o1, &o2], &[&g1, &g2], &fusion).unwrap();
    let hidden = Tensor::new(vec![2, 16], (0..32).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let weights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    gradient_check(&mut store, samples, eps, &mut rng, |g| {
        let out = model.step(g, &input, &[1, 4], std::slice::from_ref(&hidden))?;
        let l = g.mul_const(out.policy.logits, &weights)?;
        let l = g.sum(l);
        let v = g.square(out.policy.value);
        let v = g.sum(v);
        g.add(l, v)
    })
    .unwrap()
}

/// Run config small enough to train in seconds: reduced backbone and
/// policy, two environments, short rollouts, a two-episode probe.
pub fn tiny_run_config(mechanism: Mechanism, out: &std::path::Path) -> goalnav::config::RunConfig {
    let mut c = goalnav::config::RunConfig::default();
    c.output_dir = out.to_path_buf();
    c.world.resolution = 32;
    c.world.train_worlds = 3;
    c.world.heldout_worlds = 2;
    c.fusion = small_fusion(mechanism);
    c.policy = small_policy();
    c.train.num_envs = 2;
    c.train.rollout_len = 16;
    c.train.minibatches = 2;
    c.train.total_steps = 64;
    c.train.encoder_chunk = 8;
    c.train.checkpoint_every = 1;
    c.episodes.probe_episodes = 2;
    c.episodes.probe_every = 1;
    c.eval.max_steps = 40;
    c.validate().unwrap();
    c
}
