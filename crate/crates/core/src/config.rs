//! Run configuration: one TOML file with full defaulting, dotted-key
//! overrides, and a content hash stamped on every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::policy::PolicyConfig;
use crate::worldsim::{Band, Camera, DEFAULT_CELL_SIZE, MAX_EPISODE_STEPS, SUCCESS_RADIUS_M, TRAIN_BANDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub resolution: usize,
    pub hfov_deg: f64,
    pub cell_size: f64,
    pub size_m: f64,
    /// Training worlds use seeds `0..train_worlds`.
    pub train_worlds: u64,
    /// Held-out worlds use seeds `offset..offset + heldout_worlds`.
    pub heldout_seed_offset: u64,
    pub heldout_worlds: u64,
    pub bands: Vec<Band>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            hfov_deg: 90.0,
            cell_size: DEFAULT_CELL_SIZE,
            size_m: 10.0,
            train_worlds: 20,
            heldout_seed_offset: 1_000_000,
            heldout_worlds: 10,
            bands: TRAIN_BANDS.to_vec(),
        }
    }
}

impl WorldConfig {
    pub fn camera(&self) -> Camera {
        Camera {
            hfov_deg: self.hfov_deg,
            resolution: self.resolution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Optional fixed training episode file; episodes are sampled on the fly
    /// from the training worlds when absent.
    pub train: Option<PathBuf>,
    /// Held-out episode file used by `eval` and `ablate`.
    pub heldout: Option<PathBuf>,
    /// Held-out episodes evaluated greedily while training.
    pub probe_episodes: usize,
    /// Probe every this many updates (and after the last one).
    pub probe_every: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            train: None,
            heldout: None,
            probe_episodes: 16,
            probe_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub lr_decay: bool,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    /// Rows per encoder pass during updates; bounds activation memory.
    pub encoder_chunk: usize,
    /// Write a checkpoint every this many updates (and after the last one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2_000_000,
            rollout_len: 128,
            num_envs: 8,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 2,
            minibatches: 2,
            lr: 2.5e-4,
            lr_decay: true,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            encoder_chunk: 64,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_update(&self) -> u64 {
        (self.rollout_len * self.num_envs) as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_update())
    }

    /// Rollout length of update `index`; the last one is shortened so the
    /// run consumes exactly `total_steps`.
    pub fn rollout_len_at(&self, index: u64) -> usize {
        let done = index * self.steps_per_update();
        let left = (self.total_steps - done.min(self.total_steps)) / self.num_envs as u64;
        left.min(self.rollout_len as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.total_steps", self.total_steps as f64),
            ("train.rollout_len", self.rollout_len as f64),
            ("train.num_envs", self.num_envs as f64),
            ("train.gamma", self.gamma),
            ("train.gae_lambda", self.gae_lambda),
            ("train.epochs", self.epochs as f64),
            ("train.minibatches", self.minibatches as f64),
            ("train.lr", self.lr),
            ("train.value_coef", self.value_coef),
            ("train.max_grad_norm", self.max_grad_norm),
            ("train.adam_eps", self.adam_eps),
            ("train.encoder_chunk", self.encoder_chunk as f64),
            ("train.checkpoint_every", self.checkpoint_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("train.entropy_coef must be non-negative"));
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(Error::config("train.gamma and train.gae_lambda must not exceed 1"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!("train.clip_eps must lie in (0, 1), got {}", self.clip_eps)));
        }
        if !self.num_envs.is_multiple_of(self.minibatches) {
            return Err(Error::config(format!(
                "train.num_envs ({}) must be divisible by train.minibatches ({})",
                self.num_envs, self.minibatches
            )));
        }
        if !self.total_steps.is_multiple_of(self.num_envs as u64) {
            return Err(Error::config(format!(
                "train.total_steps ({}) must be a multiple of train.num_envs ({})",
                self.total_steps, self.num_envs
            )));
        }
        Ok(())
    }
}

/// Shaped reward coefficients; see [`crate::trainer::compute_reward`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub c_d: f64,
    pub c_a: f64,
    pub c_s: f64,
    pub c_slack: f64,
    /// Geodesic distance below which heading progress is rewarded.
    pub angle_gate_m: f64,
    pub success_radius_m: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c_d: 1.0,
            c_a: 0.5,
            c_s: 10.0,
            c_slack: 0.01,
            angle_gate_m: 1.0,
            success_radius_m: SUCCESS_RADIUS_M,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_steps: usize,
    pub greedy: bool,
    /// Count blocked forward moves toward path length.
    pub count_blocked_moves: bool,
    /// Held-out episodes generated by `gen-episodes --split heldout`.
    pub episodes: usize,
    /// Seeds trained per variant by `ablate`.
    pub ablate_seeds: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_steps: MAX_EPISODE_STEPS,
            greedy: true,
            count_blocked_moves: false,
            episodes: 200,
            ablate_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where artifacts go; not part of the hash.
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub episodes: EpisodeConfig,
    pub fusion: FusionConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            episodes: EpisodeConfig::default(),
            fusion: FusionConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::config(e.to_string().trim().to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(toml_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(toml_err)
    }

    /// Applies `section.key=value` overrides; values parse as TOML and fall
    /// back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(toml_err)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for part in &parts[..parts.len() - 1] {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override {key}: {part} is not a section")))?;
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
            node.as_table_mut()
                .ok_or_else(|| Error::config(format!("override {key}: parent is not a section")))?
                .insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&root).map_err(toml_err)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        let w = &self.world;
        if w.resolution < 16 {
            return Err(Error::config(format!("world.resolution must be at least 16, got {}", w.resolution)));
        }
        if !(w.hfov_deg > 30.0 && w.hfov_deg < 150.0) {
            return Err(Error::config(format!("world.hfov_deg must lie in (30, 150), got {}", w.hfov_deg)));
        }
        if !(w.cell_size > 0.0) || !(w.size_m >= 4.0) || w.train_worlds == 0 || w.heldout_worlds == 0 {
            return Err(Error::config("world.cell_size must be positive, world.size_m at least 4, world.train_worlds and world.heldout_worlds positive"));
        }
        if w.heldout_seed_offset < w.train_worlds {
            return Err(Error::config("world.heldout_seed_offset overlaps the training world seeds"));
        }
        if w.bands.is_empty() {
            return Err(Error::config("world.bands must not be empty"));
        }
        for b in &w.bands {
            if !(b.min > self.reward.success_radius_m && b.max > b.min) {
                return Err(Error::config(format!(
                    "world.bands entry [{}, {}] must satisfy success radius < min < max",
                    b.min, b.max
                )));
            }
        }
        if self.eval.max_steps == 0 || self.eval.episodes == 0 || self.eval.ablate_seeds == 0 {
            return Err(Error::config("eval.max_steps, eval.episodes and eval.ablate_seeds must be positive"));
        }
        if self.episodes.probe_every == 0 {
            return Err(Error::config("episodes.probe_every must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// First 12 hex digits of [`hash`](Self::hash), for file names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}
