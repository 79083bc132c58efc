//! PPO training: shaped reward, environments, rollouts, advantage
//! estimation, clipped-surrogate updates, metrics, and checkpoints.

mod env;
mod gae;
mod ppo;
mod reward;
mod rollout;
mod run;

pub use env::{generate_episodes, generate_worlds, world_seeds, EnvSnapshot, EpisodeSource, NavEnv, Split, StepOutcome};
pub use gae::{gae, normalize};
pub use ppo::{minibatch_gradients, minibatch_rows, ppo_loss, ppo_update, LossInputs, LossTerms, UpdateStats};
pub use reward::compute_reward;
pub use rollout::{collect_rollouts, Actor, Carry, ModelActor, RolloutBuffer};
pub use run::{
    checkpoint_config, checkpoint_path, load_model, probe_episodes, read_metrics, train, TrainOutcome, Trainer,
    UpdateRecord, METRICS_HEADER, RETURN_WINDOW,
};
