use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compute_reward;
use crate::config::{RewardConfig, RunConfig};
use crate::error::{Error, Result};
use crate::worldsim::{
    materialize, read_episode_records, sample_episode, step, Action, Camera, DistanceField, Episode, EpisodeRecord,
    Pose, World, MAX_EPISODE_STEPS,
};

/// Which world seeds an episode set draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::usage(format!("unknown split {other:?}, expected train or heldout"))),
        }
    }
}

/// Random streams derived from the run seed.
pub(crate) mod stream {
    pub const TRAINER: u64 = 1 << 32;
    pub const TRAIN_SET: u64 = (1 << 32) + 1;
    pub const HELDOUT_SET: u64 = (1 << 32) + 2;
    pub const ENV_BASE: u64 = 1;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn world_seeds(config: &RunConfig, split: Split) -> std::ops::Range<u64> {
    let w = &config.world;
    match split {
        Split::Train => 0..w.train_worlds,
        Split::Heldout => w.heldout_seed_offset..w.heldout_seed_offset + w.heldout_worlds,
    }
}

pub fn generate_worlds(config: &RunConfig, split: Split) -> Result<Vec<Arc<World>>> {
    world_seeds(config, split)
        .map(|s| World::generate(s, config.world.size_m, config.world.cell_size))
        .collect()
}

/// A fixed episode set: episode `i` lies in world `i mod W` and band
/// `i mod B`. Deterministic in the config.
pub fn generate_episodes(config: &RunConfig, split: Split, count: usize) -> Result<Vec<Episode>> {
    let worlds = generate_worlds(config, split)?;
    let bands = &config.world.bands;
    let camera = config.world.camera();
    let mut rng = seeded(
        config.seed,
        match split {
            Split::Train => stream::TRAIN_SET,
            Split::Heldout => stream::HELDOUT_SET,
        },
    );
    (0..count)
        .map(|i| sample_episode(&worlds[i % worlds.len()], i as u64, &mut rng, bands[i % bands.len()], &camera))
        .collect()
}

/// Where training episodes come from.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    /// Fresh episodes on uniformly chosen worlds and bands.
    Worlds {
        worlds: Vec<Arc<World>>,
        config: Arc<RunConfig>,
    },
    /// Uniform draws from a fixed set.
    Fixed(Vec<Arc<Episode>>),
}

impl EpisodeSource {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        match &config.episodes.train {
            Some(path) => {
                let eps = materialize(&read_episode_records(path)?, &config.world.camera())?;
                if eps.is_empty() {
                    return Err(Error::config(format!("training episode file {} is empty", path.display())));
                }
                Ok(EpisodeSource::Fixed(eps.into_iter().map(Arc::new).collect()))
            }
            None => Ok(EpisodeSource::Worlds {
                worlds: generate_worlds(config, Split::Train)?,
                config: Arc::new(config.clone()),
            }),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, id: u64) -> Result<Arc<Episode>> {
        match self {
            EpisodeSource::Worlds { worlds, config } => {
                let world = &worlds[rng.random_range(0..worlds.len())];
                let bands = &config.world.bands;
                let band = bands[rng.random_range(0..bands.len())];
                Ok(Arc::new(sample_episode(world, id, rng, band, &config.world.camera())?))
            }
            EpisodeSource::Fixed(eps) => Ok(Arc::clone(&eps[rng.random_range(0..eps.len())])),
        }
    }

    /// Rebuilds a checkpointed episode, reusing a loaded world when possible.
    fn restore(&self, record: &EpisodeRecord, camera: &Camera) -> Result<Arc<Episode>> {
        if let EpisodeSource::Fixed(eps) = self {
            if let Some(e) = eps.iter().find(|e| e.record() == *record) {
                return Ok(Arc::clone(e));
            }
        }
        if let EpisodeSource::Worlds { worlds, .. } = self {
            if let Some(w) = worlds.iter().find(|w| w.seed == record.world_seed) {
                let goal_image = crate::worldsim::render(&w.grid, &record.goal, camera)?;
                return Ok(Arc::new(Episode {
                    id: record.id,
                    world: Arc::clone(w),
                    band: record.band,
                    start: record.start,
                    goal: record.goal,
                    goal_image,
                    shortest_length: record.shortest_length,
                }));
            }
        }
        Ok(Arc::new(materialize(std::slice::from_ref(record), camera)?.remove(0)))
    }
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Total reward of the episode that just ended (when `done`).
    pub episode_return: f64,
}

/// One training environment: the current episode, the agent pose, and a
/// private random stream.
#[derive(Clone, Debug)]
pub struct NavEnv {
    pub id: usize,
    rng: ChaCha8Rng,
    source: Arc<EpisodeSource>,
    episode: Arc<Episode>,
    field: Arc<DistanceField>,
    pose: Pose,
    steps: usize,
    episode_return: f64,
    episodes_started: u64,
}

/// Serializable mutable part of a [`NavEnv`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub rng: ChaCha8Rng,
    pub episode: EpisodeRecord,
    pub pose: Pose,
    pub steps: usize,
    pub episode_return: f64,
    pub episodes_started: u64,
}

impl NavEnv {
    pub fn new(id: usize, seed: u64, source: Arc<EpisodeSource>) -> Result<Self> {
        let mut rng = seeded(seed, stream::ENV_BASE + id as u64);
        let episode = source.sample(&mut rng, Self::episode_id(id, 0))?;
        let field = Arc::new(DistanceField::from_pose(episode.grid(), &episode.goal));
        Ok(Self {
            id,
            rng,
            source,
            pose: episode.start,
            episode,
            field,
            steps: 0,
            episode_return: 0.0,
            episodes_started: 1,
        })
    }

    fn episode_id(env: usize, n: u64) -> u64 {
        ((env as u64) << 40) | n
    }

    pub fn episode(&self) -> &Arc<Episode> {
        &self.episode
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Applies `action`; on STOP or the step cap the episode ends and a new
    /// one is drawn.
    pub fn step(&mut self, action: Action, reward_cfg: &RewardConfig) -> Result<StepOutcome> {
        let prev = self.pose;
        if action != Action::Stop {
            self.pose = step(self.episode.grid(), &self.pose, action).0;
        }
        self.steps += 1;
        let reward = compute_reward(&prev, &self.pose, action, &self.episode.goal, &self.field, reward_cfg);
        self.episode_return += reward;
        let success = action == Action::Stop && self.pose.distance_to(&self.episode.goal) <= reward_cfg.success_radius_m;
        let done = action == Action::Stop || self.steps >= MAX_EPISODE_STEPS;
        let episode_return = self.episode_return;
        if done {
            self.reset()?;
        }
        Ok(StepOutcome {
            reward,
            done,
            success,
            episode_return,
        })
    }

    fn reset(&mut self) -> Result<()> {
        let id = Self::episode_id(self.id, self.episodes_started);
        self.episode = self.source.sample(&mut self.rng, id)?;
        self.field = Arc::new(DistanceField::from_pose(self.episode.grid(), &self.episode.goal));
        self.pose = self.episode.start;
        self.steps = 0;
        self.episode_return = 0.0;
        self.episodes_started += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            rng: self.rng.clone(),
            episode: self.episode.record(),
            pose: self.pose,
            steps: self.steps,
            episode_return: self.episode_return,
            episodes_started: self.episodes_started,
        }
    }

    pub fn restore(id: usize, snap: &EnvSnapshot, source: Arc<EpisodeSource>, camera: &Camera) -> Result<Self> {
        let episode = source.restore(&snap.episode, camera)?;
        let field = Arc::new(DistanceField::from_pose(episode.grid(), &episode.goal));
        Ok(Self {
            id,
            rng: snap.rng.clone(),
            source,
            episode,
            field,
            pose: snap.pose,
            steps: snap.steps,
            episode_return: snap.episode_return,
            episodes_started: snap.episodes_started,
        })
    }
}
