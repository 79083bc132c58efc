//! Recurrent actor-critic head over fused embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, Embedding, Graph, GruCell, Linear, LinearInit, ParamStore, Real, Tensor, Var};
use crate::worldsim::Action;

/// Embedding row used as the previous action at episode start.
pub const START_TOKEN: usize = Action::COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_size: usize,
    pub action_embed_dim: usize,
    pub recurrent_layers: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_size: 512,
            action_embed_dim: 32,
            recurrent_layers: 1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.action_embed_dim == 0 || self.recurrent_layers == 0 {
            return Err(Error::config("policy sizes and recurrent_layers must be positive"));
        }
        Ok(())
    }
}

/// Hidden state for a batch of environments: one `N×D` tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub layers: Vec<Tensor<f32>>,
}

impl PolicyState {
    pub fn zeros(config: &PolicyConfig, batch: usize) -> Self {
        Self {
            layers: (0..config.recurrent_layers)
                .map(|_| Tensor::zeros(vec![batch, config.hidden_size]))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    /// Copies row `i` of every layer.
    pub fn row(&self, i: usize) -> Vec<Vec<f32>> {
        self.layers
            .iter()
            .map(|t| {
                let d = t.shape()[1];
                t.data()[i * d..(i + 1) * d].to_vec()
            })
            .collect()
    }

    pub fn set_row(&mut self, i: usize, values: &[Vec<f32>]) {
        for (t, v) in self.layers.iter_mut().zip(values) {
            let d = t.shape()[1];
            t.data_mut()[i * d..(i + 1) * d].copy_from_slice(v);
        }
    }

    pub fn reset_row(&mut self, i: usize) {
        for t in &mut self.layers {
            let d = t.shape()[1];
            t.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub action_embed: Embedding,
    pub cells: Vec<GruCell>,
    pub actor: Linear,
    pub critic: Linear,
}

/// Graph handles for one policy step.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// `N×4` action logits.
    pub logits: Var,
    /// `N×1` state values.
    pub value: Var,
    /// Top-layer state `s_t`.
    pub state: Var,
    /// New hidden state per layer.
    pub hidden: Vec<Var>,
}

impl Policy {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &PolicyConfig,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let action_embed = Embedding::new(store, "policy.action_embed", Action::COUNT + 1, config.action_embed_dim, rng)?;
        let d = config.hidden_size;
        let mut cells = Vec::new();
        for l in 0..config.recurrent_layers {
            let inp = if l == 0 { embed_dim + config.action_embed_dim } else { d };
            cells.push(GruCell::new(store, &format!("policy.gru{l}"), inp, d, rng)?);
        }
        let actor = Linear::new(store, "policy.actor", d, Action::COUNT, LinearInit::Orthogonal(0.01), rng)?;
        let critic = Linear::new(store, "policy.critic", d, 1, LinearInit::Orthogonal(1.0), rng)?;
        Ok(Self {
            config: config.clone(),
            action_embed,
            cells,
            actor,
            critic,
        })
    }

    /// One step: `z` is `N×E`, `prev_actions` holds action indices or
    /// [`START_TOKEN`], `hidden` one `N×D` handle per layer.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var, prev_actions: &[usize], hidden: &[Var]) -> Result<PolicyOutput> {
        if !g.value(z).is_finite() {
            return Err(Error::Numerical("fused embedding is not finite".into()));
        }
        if hidden.len() != self.cells.len() {
            return Err(Error::usage(format!("expected {} hidden layers, got {}", self.cells.len(), hidden.len())));
        }
        if prev_actions.iter().any(|&a| a > START_TOKEN) {
            return Err(Error::usage("previous action index out of range"));
        }
        let a = self.action_embed.forward(g, prev_actions)?;
        let mut x = g.concat1(&[z, a])?;
        let mut new_hidden = Vec::with_capacity(self.cells.len());
        for (cell, &h) in self.cells.iter().zip(hidden) {
            x = cell.forward(g, x, h)?;
            new_hidden.push(x);
        }
        Ok(PolicyOutput {
            logits: self.actor.forward(g, x)?,
            value: self.critic.forward(g, x)?,
            state: x,
            hidden: new_hidden,
        })
    }
}

/// Draws an action from `softmax(logits)` (or takes the argmax when
/// `greedy`), returning it with its log-probability.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f32], rng: &mut R, greedy: bool) -> (Action, f32) {
    let logp = log_softmax_row(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let idx = if greedy {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    (Action::from_index(idx).expect("four logits"), logp[idx] as f32)
}

/// Entropy of `softmax(logits)` in nats.
pub fn entropy(logits: &[f32]) -> f64 {
    let logp = log_softmax_row(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    -logp.iter().map(|l| l.exp() * l).sum::<f64>()
}
