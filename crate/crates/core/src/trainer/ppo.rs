use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RolloutBuffer;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::EncoderInput;
use crate::model::NavModel;
use crate::numerics::{clip_grad_norm, Adam, Graph, ParamStore, Real, Tensor, Var};
use crate::policy::PolicyState;
use crate::worldsim::RgbImage;

/// Per-row targets of the clipped surrogate objective.
pub struct LossInputs<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f32],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Scalar nodes of the PPO objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub actor: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Builds `actor + value_coef·value − entropy_coef·entropy` from `R×4`
/// logits and `R×1` values.
pub fn ppo_loss<T: Real>(g: &mut Graph<T>, logits: Var, values: Var, inp: &LossInputs, cfg: &TrainConfig) -> Result<LossTerms> {
    let rows = inp.actions.len();
    if inp.old_log_probs.len() != rows || inp.advantages.len() != rows || inp.returns.len() != rows {
        return Err(Error::usage("loss inputs differ in length"));
    }
    let cast = |v: f64| T::from_f64_lossy(v);
    let logp_all = g.log_softmax(logits)?;
    let logp = g.pick_cols(logp_all, inp.actions)?;
    let old = g.input(Tensor::new(vec![rows], inp.old_log_probs.iter().map(|&v| cast(v as f64)).collect())?);
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let adv: Vec<T> = inp.advantages.iter().map(|&a| cast(a)).collect();
    let surr1 = g.mul_const(ratio, &adv)?;
    let eps = cfg.clip_eps;
    let clipped = g.clamp(ratio, cast(1.0 - eps), cast(1.0 + eps));
    let surr2 = g.mul_const(clipped, &adv)?;
    let pessimistic = g.minimum(surr1, surr2)?;
    let mean_surr = g.mean(pessimistic);
    let actor = g.scale(mean_surr, cast(-1.0));

    let ret = g.input(Tensor::new(vec![rows, 1], inp.returns.iter().map(|&r| cast(r)).collect())?);
    let err = g.sub(values, ret)?;
    let sq = g.square(err);
    let value = g.mean(sq);

    let probs = g.exp(logp_all);
    let plogp = g.mul(probs, logp_all)?;
    let s = g.sum(plogp);
    let entropy = g.scale(s, cast(-1.0 / rows as f64));

    let weighted_value = g.scale(value, cast(cfg.value_coef));
    let partial = g.add(actor, weighted_value)?;
    let weighted_entropy = g.scale(entropy, cast(-cfg.entropy_coef));
    let total = g.add(partial, weighted_entropy)?;
    Ok(LossTerms {
        total,
        actor,
        value,
        entropy,
    })
}

/// Loss statistics averaged over every minibatch step of an update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Fraction of rows whose ratio left `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
}

/// Rows of `buf` for a set of environments, time-major within the set.
pub fn minibatch_rows(buf: &RolloutBuffer, envs: &[usize]) -> Vec<usize> {
    (0..buf.steps)
        .flat_map(|t| envs.iter().map(move |&e| t * buf.envs + e))
        .collect()
}

/// Replays one minibatch of whole environment sequences and leaves the
/// loss gradient on `store`. The encoder runs in chunks of `chunk` rows:
/// embeddings are computed without a tape, the recurrent part and loss are
/// differentiated once, and each chunk is then re-run with its embedding
/// gradient as the seed. This bounds memory by the chunk size while giving
/// the same gradient as a single pass.
pub fn minibatch_gradients(
    model: &NavModel,
    store: &mut ParamStore<f32>,
    buf: &RolloutBuffer,
    envs: &[usize],
    cfg: &TrainConfig,
) -> Result<UpdateStats> {
    let rows = minibatch_rows(buf, envs);
    let m = envs.len();
    let chunk = cfg.encoder_chunk.max(1);
    let inputs = rows
        .chunks(chunk)
        .map(|rs| {
            let obs: Vec<&RgbImage> = rs.iter().map(|&r| &buf.observations[r]).collect();
            let goals: Vec<&RgbImage> = rs.iter().map(|&r| &buf.episodes[r].goal_image).collect();
            EncoderInput::from_images(&obs, &goals, model.encoder.config())
        })
        .collect::<Result<Vec<_>>>()?;

    let d = model.encoder.embed_dim();
    let mut embeddings = Vec::with_capacity(rows.len() * d);
    for input in &inputs {
        let mut g = Graph::new(store);
        let out = model.encoder.forward(&mut g, input)?;
        embeddings.extend_from_slice(g.value(out.embedding).data());
    }

    let mut initial = PolicyState::zeros(&model.policy.config, m);
    for (j, &e) in envs.iter().enumerate() {
        initial.set_row(j, &buf.hidden_in[0].row(e));
    }
    let prev: Vec<usize> = rows.iter().map(|&r| buf.prev_actions[r]).collect();
    let reset: Vec<bool> = rows.iter().map(|&r| buf.reset_before(r)).collect();
    let actions: Vec<usize> = rows.iter().map(|&r| buf.actions[r]).collect();
    let old: Vec<f32> = rows.iter().map(|&r| buf.log_probs[r]).collect();
    let adv: Vec<f64> = rows.iter().map(|&r| buf.advantages[r]).collect();
    let ret: Vec<f64> = rows.iter().map(|&r| buf.returns[r]).collect();
    let loss_in = LossInputs {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };

    let (stats, head_grads, dz) = {
        let mut g = Graph::new(store);
        let z = g.input_with_grad(Tensor::new(vec![rows.len(), d], embeddings)?);
        let (logits, values) = model.sequence_from_embeddings(&mut g, z, &prev, &initial.layers, &reset, buf.steps, m)?;
        let terms = ppo_loss(&mut g, logits, values, &loss_in, cfg)?;
        let scalar = |v: Var| g.value(v).data()[0] as f64;
        let total = scalar(terms.total);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite PPO loss {total}")));
        }
        let logp = crate::numerics::log_softmax_row::<f32>;
        let lg = g.value(logits).data();
        let clipped = (0..rows.len())
            .filter(|&i| {
                let lp = logp(&lg[i * 4..i * 4 + 4])[actions[i]];
                ((lp - old[i]).exp() - 1.0).abs() as f64 > cfg.clip_eps
            })
            .count();
        let stats = UpdateStats {
            actor_loss: scalar(terms.actor),
            value_loss: scalar(terms.value),
            entropy: scalar(terms.entropy),
            total_loss: total,
            grad_norm: 0.0,
            clip_fraction: clipped as f64 / rows.len() as f64,
        };
        let grads = g.backward(terms.total)?;
        let dz = grads.wrt(z).expect("embedding input tracks its gradient").to_vec();
        (stats, grads, dz)
    };
    store.zero_grad();
    store.accumulate(&head_grads);
    drop(head_grads);
    for (k, input) in inputs.iter().enumerate() {
        let start = k * chunk * d;
        let seed = &dz[start..start + input.batch() * d];
        let grads = {
            let mut g = Graph::new(store);
            let out = model.encoder.forward(&mut g, input)?;
            let weighted = g.mul_const(out.embedding, seed)?;
            let s = g.sum(weighted);
            g.backward(s)?
        };
        store.accumulate(&grads);
    }
    Ok(stats)
}

/// Runs `epochs × minibatches` clipped-surrogate steps on a buffer whose
/// advantages are already computed. Minibatches split environments, never
/// time, so recurrent state replays from each sequence start. On a
/// non-finite loss or gradient the parameters and optimizer are restored to
/// their state before the update and an error is returned.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &NavModel,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buf.advantages.len() != buf.len() {
        return Err(Error::usage("advantages must be computed before the update"));
    }
    let backup = (store.clone(), adam.clone());
    let result = ppo_epochs(model, store, adam, buf, cfg, lr, rng);
    if result.is_err() {
        (*store, *adam) = backup;
        store.zero_grad();
    }
    result
}

fn ppo_epochs<R: Rng + ?Sized>(
    model: &NavModel,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let per = (buf.envs / cfg.minibatches).max(1);
    let mut sum = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..buf.envs).collect();
        order.shuffle(rng);
        for envs in order.chunks(per) {
            let s = minibatch_gradients(model, store, buf, envs, cfg)?;
            let norm = clip_grad_norm(store, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient norm {norm}")));
            }
            adam.step(store, lr);
            sum.actor_loss += s.actor_loss;
            sum.value_loss += s.value_loss;
            sum.entropy += s.entropy;
            sum.total_loss += s.total_loss;
            sum.clip_fraction += s.clip_fraction;
            sum.grad_norm += norm;
            count += 1.0;
        }
    }
    store.zero_grad();
    Ok(UpdateStats {
        actor_loss: sum.actor_loss / count,
        value_loss: sum.value_loss / count,
        entropy: sum.entropy / count,
        total_loss: sum.total_loss / count,
        grad_norm: sum.grad_norm / count,
        clip_fraction: sum.clip_fraction / count,
    })
}
