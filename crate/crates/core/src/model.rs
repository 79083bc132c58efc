//! Fusion encoder plus recurrent actor-critic as one navigation agent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{EncoderInput, EncoderOutput, FusionConfig, FusionEncoder};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::policy::{Policy, PolicyConfig, PolicyOutput, PolicyState};

#[derive(Clone, Debug)]
pub struct NavModel {
    pub encoder: FusionEncoder,
    pub policy: Policy,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub encoder: EncoderOutput,
    pub policy: PolicyOutput,
}

/// Plain-value result of a gradient-free forward step.
#[derive(Clone, Debug)]
pub struct ActOutput {
    pub logits: Vec<[f32; 4]>,
    pub values: Vec<f32>,
    pub state: PolicyState,
}

impl NavModel {
    /// Builds the model and its parameters, initialized from `seed`.
    pub fn new(fusion: &FusionConfig, policy: &PolicyConfig, resolution: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = FusionEncoder::new(&mut store, fusion, resolution, &mut rng)?;
        let policy = Policy::new(&mut store, policy, encoder.embed_dim(), &mut rng)?;
        Ok((Self { encoder, policy }, store))
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: &EncoderInput<T>,
        prev_actions: &[usize],
        hidden: &[Tensor<T>],
    ) -> Result<StepOutput> {
        let encoder = self.encoder.forward(g, input)?;
        let h: Vec<Var> = hidden.iter().map(|t| g.input(t.clone())).collect();
        let policy = self.policy.forward(g, encoder.embedding, prev_actions, &h)?;
        Ok(StepOutput { encoder, policy })
    }

    /// Unrolls `steps` time steps over `m` sequences. Inputs are time-major
    /// (`row = t·m + env`); `reset[row]` zeroes the incoming hidden state.
    /// Returns `(T·m)×4` logits and `(T·m)×1` values.
    #[allow(clippy::too_many_arguments)]
    pub fn sequence<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: &EncoderInput<T>,
        prev_actions: &[usize],
        initial: &[Tensor<T>],
        reset: &[bool],
        steps: usize,
        m: usize,
    ) -> Result<(Var, Var)> {
        let rows = steps * m;
        if input.batch() != rows {
            return Err(Error::usage(format!("sequence batch must have {rows} rows")));
        }
        let enc = self.encoder.forward(g, input)?;
        self.sequence_from_embeddings(g, enc.embedding, prev_actions, initial, reset, steps, m)
    }

    /// Recurrent part of [`sequence`](Self::sequence) over precomputed
    /// `(T·m)×D` embeddings `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn sequence_from_embeddings<T: Real>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        prev_actions: &[usize],
        initial: &[Tensor<T>],
        reset: &[bool],
        steps: usize,
        m: usize,
    ) -> Result<(Var, Var)> {
        let rows = steps * m;
        if g.shape(z)[0] != rows || prev_actions.len() != rows || reset.len() != rows {
            return Err(Error::usage(format!("sequence batch must have {rows} rows")));
        }
        let mut hidden: Vec<Var> = initial.iter().map(|t| g.input(t.clone())).collect();
        let (mut logits, mut values) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        for t in 0..steps {
            let idx: Vec<usize> = (t * m..(t + 1) * m).collect();
            let mask: Vec<T> = idx.iter().map(|&r| if reset[r] { T::zero() } else { T::one() }).collect();
            if mask.iter().any(|v| v.is_zero()) {
                hidden = hidden.into_iter().map(|h| g.scale_rows(h, &mask)).collect::<Result<_>>()?;
            }
            let zt = if steps == 1 { z } else { g.gather_rows(z, &idx)? };
            let out = self.policy.forward(g, zt, &prev_actions[t * m..(t + 1) * m], &hidden)?;
            logits.push(out.logits);
            values.push(out.value);
            hidden = out.hidden;
        }
        if steps == 1 {
            return Ok((logits[0], values[0]));
        }
        Ok((g.concat_rows(&logits)?, g.concat_rows(&values)?))
    }

    /// Gradient-free step used by rollouts and evaluation.
    pub fn act(&self, store: &ParamStore<f32>, input: &EncoderInput<f32>, prev_actions: &[usize], state: &PolicyState) -> Result<ActOutput> {
        let mut g = Graph::new(store);
        let out = self.step(&mut g, input, prev_actions, &state.layers)?;
        let logits = g
            .value(out.policy.logits)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let values = g.value(out.policy.value).data().to_vec();
        let state = PolicyState {
            layers: out.policy.hidden.iter().map(|&h| g.value(h).clone()).collect(),
        };
        Ok(ActOutput { logits, values, state })
    }
}
