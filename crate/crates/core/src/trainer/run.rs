use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{seeded, stream};
use super::{collect_rollouts, generate_episodes, ppo_update, Carry, EnvSnapshot, EpisodeSource, ModelActor, NavEnv, Split, UpdateStats};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, spl, success_rate};
use crate::model::NavModel;
use crate::numerics::{Adam, Checkpoint, ParamStore};
use crate::policy::PolicyState;
use crate::worldsim::{materialize, read_episode_records, Episode};

pub const METRICS_HEADER: &str = "step,updates,mean_episode_reward,probe_sr,probe_spl,actor_loss,value_loss,entropy";
/// Completed episodes averaged for `mean_episode_reward`.
pub const RETURN_WINDOW: usize = 100;

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    /// Environment steps consumed so far.
    pub step: u64,
    /// Updates completed so far.
    pub updates: u64,
    pub mean_episode_reward: Option<f64>,
    /// Most recent probe `(SR, SPL)`.
    pub probe: Option<(f64, f64)>,
    pub stats: UpdateStats,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl UpdateRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.updates,
            opt(self.mean_episode_reward),
            opt(self.probe.map(|p| p.0)),
            opt(self.probe.map(|p| p.1)),
            self.stats.actor_loss,
            self.stats.value_loss,
            self.stats.entropy
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerExtra {
    config: String,
    updates: u64,
    env_steps: u64,
    adam_step: u64,
    rng: ChaCha8Rng,
    envs: Vec<EnvSnapshot>,
    prev_actions: Vec<usize>,
    recent_returns: Vec<f64>,
    probe: Option<(f64, f64)>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const HIDDEN: &str = "policy.hidden/";

/// The learner: model, optimizer, environments, and every random stream,
/// advanced one PPO update at a time.
pub struct Trainer {
    config: RunConfig,
    hash: String,
    pub model: NavModel,
    pub store: ParamStore<f32>,
    adam: Adam,
    source: Arc<EpisodeSource>,
    envs: Vec<NavEnv>,
    carry: Carry,
    rng: ChaCha8Rng,
    updates: u64,
    env_steps: u64,
    recent: VecDeque<f64>,
    probe: Option<(f64, f64)>,
    probe_set: Vec<Episode>,
}

/// Held-out episodes scored while training.
pub fn probe_episodes(config: &RunConfig) -> Result<Vec<Episode>> {
    let n = config.episodes.probe_episodes;
    if n == 0 {
        return Ok(Vec::new());
    }
    match &config.episodes.heldout {
        Some(path) => {
            let records = read_episode_records(path)?;
            materialize(&records[..n.min(records.len())], &config.world.camera())
        }
        None => generate_episodes(config, Split::Heldout, n),
    }
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = NavModel::new(&config.fusion, &config.policy, config.world.resolution, config.seed)?;
        let mut adam = Adam::new(&store);
        adam.eps = config.train.adam_eps;
        let source = Arc::new(EpisodeSource::from_config(config)?);
        let envs = (0..config.train.num_envs)
            .map(|i| NavEnv::new(i, config.seed, Arc::clone(&source)))
            .collect::<Result<Vec<_>>>()?;
        let carry = Carry::new(PolicyState::zeros(&config.policy, envs.len()));
        Ok(Self {
            hash: config.hash(),
            config: config.clone(),
            model,
            store,
            adam,
            source,
            envs,
            carry,
            rng: seeded(config.seed, stream::TRAINER),
            updates: 0,
            env_steps: 0,
            recent: VecDeque::new(),
            probe: None,
            probe_set: probe_episodes(config)?,
        })
    }

    /// Rebuilds a trainer exactly as it was when `ckpt` was written.
    pub fn from_checkpoint(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let hash = config.hash();
        if ckpt.config_hash != hash {
            return Err(Error::config(format!(
                "config hash mismatch: checkpoint has {}, config has {hash}",
                ckpt.config_hash
            )));
        }
        let extra: TrainerExtra = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::config(format!("checkpoint lacks trainer state: {e}")))?;
        let mut t = Self::new(config)?;
        ckpt.load_into(&mut t.store)?;
        let names: Vec<String> = t.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.buffer(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::config(format!("checkpoint lacks optimizer state for {name}")))
            };
            t.adam.first[i] = get(ADAM_M)?;
            t.adam.second[i] = get(ADAM_V)?;
        }
        t.adam.step = extra.adam_step;
        for (l, layer) in t.carry.state.layers.iter_mut().enumerate() {
            let b = ckpt
                .buffer(&format!("{HIDDEN}{l}"))
                .ok_or_else(|| Error::config(format!("checkpoint lacks hidden state {l}")))?;
            if b.shape() != layer.shape() {
                return Err(Error::config(format!("hidden state {l} has shape {:?}", b.shape())));
            }
            *layer = b.clone();
        }
        if extra.envs.len() != t.envs.len() {
            return Err(Error::config("checkpoint environment count differs from config"));
        }
        let camera = config.world.camera();
        t.envs = extra
            .envs
            .iter()
            .enumerate()
            .map(|(i, s)| NavEnv::restore(i, s, Arc::clone(&t.source), &camera))
            .collect::<Result<_>>()?;
        t.carry.prev_actions = extra.prev_actions;
        t.rng = extra.rng;
        t.updates = extra.updates;
        t.env_steps = extra.env_steps;
        t.recent = extra.recent_returns.into();
        t.probe = extra.probe;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn is_finished(&self) -> bool {
        self.updates >= self.config.train.total_updates()
    }

    fn learning_rate(&self) -> f64 {
        let t = &self.config.train;
        if t.lr_decay {
            t.lr * (1.0 - self.updates as f64 / t.total_updates() as f64)
        } else {
            t.lr
        }
    }

    /// Greedy `(SR, SPL)` on the probe set with the current parameters.
    pub fn run_probe(&self) -> Result<Option<(f64, f64)>> {
        if self.probe_set.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let eval = crate::config::EvalConfig {
            greedy: true,
            ..cfg.eval.clone()
        };
        let traces = evaluate_model(
            &self.model,
            &self.store,
            &self.probe_set,
            &cfg.world.camera(),
            &eval,
            cfg.reward.success_radius_m,
            cfg.seed,
        )?;
        let results: Vec<_> = traces.into_iter().map(|t| t.result).collect();
        Ok(Some((success_rate(&results)?, spl(&results)?)))
    }

    /// Collects one rollout, computes advantages, and applies PPO.
    pub fn update(&mut self) -> Result<UpdateRecord> {
        if self.is_finished() {
            return Err(Error::usage("training budget already consumed"));
        }
        let cfg = self.config.clone();
        let steps = cfg.train.rollout_len_at(self.updates);
        let camera = cfg.world.camera();
        let mut buf = {
            let actor = ModelActor {
                model: &self.model,
                store: &self.store,
            };
            collect_rollouts(&mut self.envs, &actor, &mut self.carry, steps, &camera, &cfg.reward)?
        };
        buf.compute_advantages(cfg.train.gamma, cfg.train.gae_lambda);
        let lr = self.learning_rate();
        let stats = ppo_update(&self.model, &mut self.store, &mut self.adam, &buf, &cfg.train, lr, &mut self.rng)?;
        for (ret, _) in &buf.finished {
            self.recent.push_back(*ret);
            if self.recent.len() > RETURN_WINDOW {
                self.recent.pop_front();
            }
        }
        self.updates += 1;
        self.env_steps += buf.len() as u64;
        let total = cfg.train.total_updates();
        if self.updates.is_multiple_of(cfg.episodes.probe_every) || self.updates == total {
            self.probe = self.run_probe()?;
        }
        let mean_episode_reward = (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64);
        log::info!(
            "update {}/{} steps {} lr {:.3e} actor {:.4} value {:.4} entropy {:.4} clip {:.3}",
            self.updates,
            total,
            self.env_steps,
            lr,
            stats.actor_loss,
            stats.value_loss,
            stats.entropy,
            stats.clip_fraction
        );
        Ok(UpdateRecord {
            step: self.env_steps,
            updates: self.updates,
            mean_episode_reward,
            probe: self.probe,
            stats,
        })
    }

    /// Everything needed to continue bit-for-bit: parameters, optimizer
    /// moments, recurrent state, environments, and random streams.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store, &self.hash);
        for ((_, p), (m, v)) in self.store.iter().zip(self.adam.first.iter().zip(&self.adam.second)) {
            ck.buffers.push((format!("{ADAM_M}{}", p.name), m.clone()));
            ck.buffers.push((format!("{ADAM_V}{}", p.name), v.clone()));
        }
        for (l, layer) in self.carry.state.layers.iter().enumerate() {
            ck.buffers.push((format!("{HIDDEN}{l}"), layer.clone()));
        }
        let extra = TrainerExtra {
            config: self.config.to_toml_string()?,
            updates: self.updates,
            env_steps: self.env_steps,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            envs: self.envs.iter().map(NavEnv::snapshot).collect(),
            prev_actions: self.carry.prev_actions.clone(),
            recent_returns: self.recent.iter().copied().collect(),
            probe: self.probe,
        };
        ck.extra = serde_json::to_value(extra)?;
        Ok(ck)
    }
}

/// The run config stored in a training checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let text = ckpt
        .extra
        .get("config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::config("checkpoint does not embed its run config"))?;
    let config = RunConfig::from_toml_str(text)?;
    if config.hash() != ckpt.config_hash {
        return Err(Error::config("embedded config does not match the checkpoint hash"));
    }
    Ok(config)
}

/// Loads model and parameters from a checkpoint, using its embedded config.
pub fn load_model(path: &Path) -> Result<(RunConfig, NavModel, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let config = checkpoint_config(&ck)?;
    let (model, mut store) = NavModel::new(&config.fusion, &config.policy, config.world.resolution, config.seed)?;
    ck.load_into(&mut store)?;
    Ok((config, model, store))
}

/// Artifacts of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<UpdateRecord>,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

pub fn checkpoint_path(out_dir: &Path, updates: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("update_{updates:06}.ckpt"))
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{what} {}", path.display());
    move |e| Error::io(ctx, e)
}

/// Metrics file contents up to and including update `keep`.
fn truncated_metrics(path: &Path, hash: &str, keep: u64) -> Result<String> {
    let mut out = format!("# config_hash={hash}\n{METRICS_HEADER}\n");
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(2) {
        let updates: Option<u64> = line.split(',').nth(1).and_then(|v| v.parse().ok());
        if updates.is_some_and(|u| u <= keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains until the budget is consumed (or `stop_after` more updates have
/// run), writing `config.toml`, `metrics.csv` with one row per update, and
/// checkpoints under `output_dir`. With `resume`, continues from that
/// checkpoint after checking its config hash.
pub fn train(config: &RunConfig, resume: Option<&Path>, stop_after: Option<u64>) -> Result<TrainOutcome> {
    let out = &config.output_dir;
    fs::create_dir_all(out.join("checkpoints")).map_err(io_err(out, "create"))?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(config, &Checkpoint::load(path)?)?,
        None => Trainer::new(config)?,
    };
    let config_path = out.join("config.toml");
    fs::write(&config_path, config.to_toml_string()?).map_err(io_err(&config_path, "write"))?;
    let metrics = out.join("metrics.csv");
    let head = truncated_metrics(&metrics, trainer.config_hash(), if resume.is_some() { trainer.updates() } else { 0 })?;
    fs::write(&metrics, head).map_err(io_err(&metrics, "write"))?;

    let total = config.train.total_updates();
    let mut outcome = TrainOutcome {
        records: Vec::new(),
        metrics: metrics.clone(),
        checkpoints: Vec::new(),
    };
    let mut ran = 0;
    while !trainer.is_finished() && stop_after.is_none_or(|n| ran < n) {
        let rec = trainer.update()?;
        ran += 1;
        let mut f = fs::OpenOptions::new().append(true).open(&metrics).map_err(io_err(&metrics, "open"))?;
        writeln!(f, "{}", rec.csv_row()).map_err(io_err(&metrics, "write"))?;
        let u = trainer.updates();
        let stopping = stop_after.is_some_and(|n| ran >= n);
        if u % config.train.checkpoint_every == 0 || u == total || stopping {
            let path = checkpoint_path(out, u);
            trainer.checkpoint()?.save(&path)?;
            outcome.checkpoints.push(path);
        }
        outcome.records.push(rec);
    }
    Ok(outcome)
}

/// Reads metric rows back, skipping the hash line and header.
pub fn read_metrics(path: &Path) -> Result<(String, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(io_err(path, "read"))?;
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing config hash line".into(),
        })?
        .to_string();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "unexpected header".into(),
        });
    }
    Ok((hash, lines.map(str::to_string).collect()))
}
