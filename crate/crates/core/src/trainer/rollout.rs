use std::sync::Arc;

use super::{gae, normalize, NavEnv};
use crate::config::RewardConfig;
use crate::error::{Error, Result};
use crate::fusion::EncoderInput;
use crate::model::{ActOutput, NavModel};
use crate::numerics::ParamStore;
use crate::par;
use crate::policy::{sample_action, PolicyState, START_TOKEN};
use crate::worldsim::{render, Camera, Episode, RgbImage};

/// Batched action scorer used while collecting experience.
pub trait Actor: Sync {
    fn act(&self, obs: &[&RgbImage], goals: &[&RgbImage], prev_actions: &[usize], state: &PolicyState) -> Result<ActOutput>;
}

/// The learned model with a parameter snapshot.
pub struct ModelActor<'a> {
    pub model: &'a NavModel,
    pub store: &'a ParamStore<f32>,
}

impl Actor for ModelActor<'_> {
    fn act(&self, obs: &[&RgbImage], goals: &[&RgbImage], prev_actions: &[usize], state: &PolicyState) -> Result<ActOutput> {
        let input = EncoderInput::from_images(obs, goals, self.model.encoder.config())?;
        self.model.act(self.store, &input, prev_actions, state)
    }
}

/// Per-environment state carried from one rollout to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub state: PolicyState,
    pub prev_actions: Vec<usize>,
}

impl Carry {
    pub fn new(state: PolicyState) -> Self {
        let n = state.batch();
        Self {
            state,
            prev_actions: vec![START_TOKEN; n],
        }
    }
}

/// `T×N` transitions stored time-major (`row = t·N + env`).
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub steps: usize,
    pub envs: usize,
    pub observations: Vec<RgbImage>,
    pub episodes: Vec<Arc<Episode>>,
    pub prev_actions: Vec<usize>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Recurrent state fed into each time step, `N` rows per entry.
    pub hidden_in: Vec<PolicyState>,
    /// Value of the state after the last step, per environment.
    pub bootstrap: Vec<f32>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Returns and successes of episodes that ended in this rollout.
    pub finished: Vec<(f64, bool)>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps * self.envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether the hidden state entering row `r` was zeroed by an episode
    /// boundary inside this rollout.
    pub fn reset_before(&self, row: usize) -> bool {
        row >= self.envs && self.dones[row - self.envs]
    }

    /// Fills advantages and returns per environment, then normalizes the
    /// advantages over the whole buffer.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let (t_len, n) = (self.steps, self.envs);
        self.advantages = vec![0.0; t_len * n];
        self.returns = vec![0.0; t_len * n];
        for e in 0..n {
            let col = |v: &dyn Fn(usize) -> f64| (0..t_len).map(|t| v(t * n + e)).collect::<Vec<f64>>();
            let rewards = col(&|r| self.rewards[r]);
            let values = col(&|r| self.values[r] as f64);
            let dones: Vec<bool> = (0..t_len).map(|t| self.dones[t * n + e]).collect();
            let (adv, ret) = gae(&rewards, &values, &dones, self.bootstrap[e] as f64, gamma, lambda);
            for t in 0..t_len {
                self.advantages[t * n + e] = adv[t];
                self.returns[t * n + e] = ret[t];
            }
        }
        normalize(&mut self.advantages);
    }
}

fn observe(envs: &[NavEnv], camera: &Camera) -> Result<Vec<RgbImage>> {
    par::map(envs, |env| {
        render(env.episode().grid(), &env.pose(), camera).map_err(|e| Error::Worker {
            worker: env.id,
            source: Box::new(e),
        })
    })
    .into_iter()
    .collect()
}

/// Steps every environment `steps` times with actions sampled from
/// `actor`, resampling episodes on done and zeroing their recurrent state.
/// Rendering runs in parallel; sampling and stepping run in environment
/// order so results do not depend on scheduling.
pub fn collect_rollouts(
    envs: &mut [NavEnv],
    actor: &dyn Actor,
    carry: &mut Carry,
    steps: usize,
    camera: &Camera,
    reward_cfg: &RewardConfig,
) -> Result<RolloutBuffer> {
    let n = envs.len();
    let rows = steps * n;
    let mut buf = RolloutBuffer {
        steps,
        envs: n,
        observations: Vec::with_capacity(rows),
        episodes: Vec::with_capacity(rows),
        prev_actions: Vec::with_capacity(rows),
        actions: Vec::with_capacity(rows),
        log_probs: Vec::with_capacity(rows),
        values: Vec::with_capacity(rows),
        rewards: Vec::with_capacity(rows),
        dones: Vec::with_capacity(rows),
        hidden_in: Vec::with_capacity(steps),
        bootstrap: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        finished: Vec::new(),
    };
    for _ in 0..steps {
        let obs = observe(envs, camera)?;
        let episodes: Vec<Arc<Episode>> = envs.iter().map(|e| Arc::clone(e.episode())).collect();
        let obs_refs: Vec<&RgbImage> = obs.iter().collect();
        let goal_refs: Vec<&RgbImage> = episodes.iter().map(|e| &e.goal_image).collect();
        let out = actor.act(&obs_refs, &goal_refs, &carry.prev_actions, &carry.state)?;
        buf.hidden_in.push(carry.state.clone());
        buf.prev_actions.extend_from_slice(&carry.prev_actions);
        let mut next_state = out.state;
        for (i, env) in envs.iter_mut().enumerate() {
            let (a, logp) = sample_action(&out.logits[i], env.rng(), false);
            let outcome = env.step(a, reward_cfg).map_err(|e| Error::Worker {
                worker: i,
                source: Box::new(e),
            })?;
            buf.actions.push(a.index());
            buf.log_probs.push(logp);
            buf.values.push(out.values[i]);
            buf.rewards.push(outcome.reward);
            buf.dones.push(outcome.done);
            if outcome.done {
                buf.finished.push((outcome.episode_return, outcome.success));
                next_state.reset_row(i);
                carry.prev_actions[i] = START_TOKEN;
            } else {
                carry.prev_actions[i] = a.index();
            }
        }
        carry.state = next_state;
        buf.observations.extend(obs);
        buf.episodes.extend(episodes);
    }
    let obs = observe(envs, camera)?;
    let obs_refs: Vec<&RgbImage> = obs.iter().collect();
    let goal_refs: Vec<&RgbImage> = envs.iter().map(|e| &e.episode().goal_image).collect();
    buf.bootstrap = actor.act(&obs_refs, &goal_refs, &carry.prev_actions, &carry.state)?.values;
    Ok(buf)
}
