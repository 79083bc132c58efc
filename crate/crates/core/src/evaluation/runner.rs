use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EpisodeResult;
use crate::config::EvalConfig;
use crate::error::Result;
use crate::fusion::EncoderInput;
use crate::model::NavModel;
use crate::numerics::ParamStore;
use crate::par;
use crate::policy::{sample_action, PolicyState, START_TOKEN};
use crate::worldsim::{render, step, Action, Camera, Episode, OracleNavigator, Pose, RgbImage, FORWARD_STEP_M};

/// What a controller sees before choosing an action.
pub struct StepContext<'a> {
    pub episode: &'a Episode,
    pub pose: Pose,
    pub step: usize,
    /// Rendered view at `pose`; absent when the controller does not need it.
    pub observation: Option<&'a RgbImage>,
}

/// Anything that picks actions during an episode.
pub trait Controller {
    fn reset(&mut self, episode: &Episode) -> Result<()>;
    fn act(&mut self, ctx: &StepContext) -> Result<Action>;
    fn needs_observation(&self) -> bool {
        true
    }
}

/// One episode's result together with its trajectory.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub result: EpisodeResult,
    /// Poses visited, starting with the start pose.
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
}

/// Per-episode bookkeeping shared by the single and batched runners.
struct Tracker<'a> {
    episode: &'a Episode,
    pose: Pose,
    poses: Vec<Pose>,
    actions: Vec<Action>,
    path_length: f64,
    collisions: usize,
    stopped: bool,
}

impl<'a> Tracker<'a> {
    fn new(episode: &'a Episode) -> Self {
        Self {
            episode,
            pose: episode.start,
            poses: vec![episode.start],
            actions: Vec::new(),
            path_length: 0.0,
            collisions: 0,
            stopped: false,
        }
    }

    /// Applies `a`; returns whether the episode ended on STOP.
    fn apply(&mut self, a: Action, cfg: &EvalConfig) -> bool {
        self.actions.push(a);
        if a == Action::Stop {
            self.stopped = true;
            return true;
        }
        let (next, blocked) = step(self.episode.grid(), &self.pose, a);
        if a == Action::MoveForward {
            if blocked {
                self.collisions += 1;
            }
            if !blocked || cfg.count_blocked_moves {
                self.path_length += FORWARD_STEP_M;
            }
        }
        self.pose = next;
        self.poses.push(next);
        false
    }

    fn finish(self, success_radius: f64) -> EpisodeTrace {
        let final_distance = self.pose.distance_to(&self.episode.goal);
        EpisodeTrace {
            result: EpisodeResult {
                id: self.episode.id,
                band: self.episode.band,
                success: self.stopped && final_distance <= success_radius,
                stopped: self.stopped,
                steps: self.actions.len(),
                path_length: self.path_length,
                shortest_length: self.episode.shortest_length,
                final_distance,
                collisions: self.collisions,
            },
            poses: self.poses,
            actions: self.actions,
        }
    }
}

/// Runs `controller` from the episode start until STOP or the step cap.
/// Success requires STOP within `success_radius` meters of the goal.
pub fn run_episode(
    episode: &Episode,
    controller: &mut dyn Controller,
    camera: &Camera,
    cfg: &EvalConfig,
    success_radius: f64,
) -> Result<EpisodeTrace> {
    controller.reset(episode)?;
    let mut t = Tracker::new(episode);
    for k in 0..cfg.max_steps {
        let obs = if controller.needs_observation() {
            Some(render(episode.grid(), &t.pose, camera)?)
        } else {
            None
        };
        let ctx = StepContext {
            episode,
            pose: t.pose,
            step: k,
            observation: obs.as_ref(),
        };
        let a = controller.act(&ctx)?;
        if t.apply(a, cfg) {
            break;
        }
    }
    Ok(t.finish(success_radius))
}

/// Replays the A* plan computed at reset; STOPs when there is none.
#[derive(Default)]
pub struct OracleController {
    plan: Vec<Action>,
}

impl Controller for OracleController {
    fn reset(&mut self, episode: &Episode) -> Result<()> {
        let mut plan = OracleNavigator::for_episode(episode).plan(episode.start).unwrap_or_default();
        plan.reverse();
        self.plan = plan;
        Ok(())
    }

    fn act(&mut self, _: &StepContext) -> Result<Action> {
        Ok(self.plan.pop().unwrap_or(Action::Stop))
    }

    fn needs_observation(&self) -> bool {
        false
    }
}

/// Cycles through a fixed action list.
pub struct ScriptedController {
    pub actions: Vec<Action>,
}

impl Controller for ScriptedController {
    fn reset(&mut self, _: &Episode) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, ctx: &StepContext) -> Result<Action> {
        Ok(self.actions[ctx.step % self.actions.len()])
    }

    fn needs_observation(&self) -> bool {
        false
    }
}

/// Seed of the action-sampling stream for one evaluated episode.
pub fn episode_seed(seed: u64, episode_id: u64) -> u64 {
    seed ^ episode_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The learned agent, one episode at a time.
pub struct ModelController<'m> {
    model: &'m NavModel,
    store: &'m ParamStore<f32>,
    greedy: bool,
    seed: u64,
    state: PolicyState,
    prev: usize,
    rng: ChaCha8Rng,
}

impl<'m> ModelController<'m> {
    pub fn new(model: &'m NavModel, store: &'m ParamStore<f32>, greedy: bool, seed: u64) -> Self {
        Self {
            model,
            store,
            greedy,
            seed,
            state: PolicyState::zeros(&model.policy.config, 1),
            prev: START_TOKEN,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for ModelController<'_> {
    fn reset(&mut self, episode: &Episode) -> Result<()> {
        self.state = PolicyState::zeros(&self.model.policy.config, 1);
        self.prev = START_TOKEN;
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed(self.seed, episode.id));
        Ok(())
    }

    fn act(&mut self, ctx: &StepContext) -> Result<Action> {
        let obs = ctx.observation.expect("model controller renders observations");
        let input = EncoderInput::from_images(&[obs], &[&ctx.episode.goal_image], self.model.encoder.config())?;
        let out = self.model.act(self.store, &input, &[self.prev], &self.state)?;
        let (a, _) = sample_action(&out.logits[0], &mut self.rng, self.greedy);
        self.state = out.state;
        self.prev = a.index();
        Ok(a)
    }
}

/// Episodes evaluated together per forward pass.
pub const EVAL_BATCH: usize = 32;

/// Evaluates the model on every episode, stepping up to [`EVAL_BATCH`]
/// episodes in lockstep through one batched forward pass. Matches
/// [`run_episode`] with a [`ModelController`] episode by episode.
pub fn evaluate_model(
    model: &NavModel,
    store: &ParamStore<f32>,
    episodes: &[Episode],
    camera: &Camera,
    cfg: &EvalConfig,
    success_radius: f64,
    seed: u64,
) -> Result<Vec<EpisodeTrace>> {
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(EVAL_BATCH) {
        let mut trackers: Vec<Tracker> = chunk.iter().map(Tracker::new).collect();
        let mut rngs: Vec<ChaCha8Rng> = chunk
            .iter()
            .map(|e| ChaCha8Rng::seed_from_u64(episode_seed(seed, e.id)))
            .collect();
        let mut prev = vec![START_TOKEN; chunk.len()];
        let mut active: Vec<usize> = (0..chunk.len()).collect();
        let mut state = PolicyState::zeros(&model.policy.config, chunk.len());
        let mut done = vec![false; chunk.len()];
        for _ in 0..cfg.max_steps {
            if active.is_empty() {
                break;
            }
            let poses: Vec<(usize, Pose)> = active.iter().map(|&i| (i, trackers[i].pose)).collect();
            let obs = par::map(&poses, |(i, p)| render(chunk[*i].grid(), p, camera))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let obs_refs: Vec<&RgbImage> = obs.iter().collect();
            let goal_refs: Vec<&RgbImage> = active.iter().map(|&i| &chunk[i].goal_image).collect();
            let input = EncoderInput::from_images(&obs_refs, &goal_refs, model.encoder.config())?;
            let prev_active: Vec<usize> = active.iter().map(|&i| prev[i]).collect();
            let step_out = model.act(store, &input, &prev_active, &state)?;
            let mut still = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let (a, _) = sample_action(&step_out.logits[row], &mut rngs[i], cfg.greedy);
                prev[i] = a.index();
                if trackers[i].apply(a, cfg) {
                    done[i] = true;
                } else {
                    still.push(row);
                }
            }
            let mut next = PolicyState::zeros(&model.policy.config, still.len());
            for (new_row, &row) in still.iter().enumerate() {
                next.set_row(new_row, &step_out.state.row(row));
            }
            state = next;
            active = still.iter().map(|&row| active[row]).collect();
        }
        out.extend(trackers.into_iter().map(|t| t.finish(success_radius)));
    }
    Ok(out)
}
