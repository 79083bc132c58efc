mod ablate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use goalnav::config::RunConfig;
use goalnav::evaluation::{evaluate_model, export_cam_panels, run_episode, EvalReport, ModelController};
use goalnav::imaging::{match_visualization, save_png_with_text, trajectory_map};
use goalnav::keypoints::{detect, match_detections, DEFAULT_MAX_POINTS};
use goalnav::trainer::{generate_episodes, load_model, train, Split};
use goalnav::worldsim::{materialize, read_episode_records, render, write_episodes, Episode};
use goalnav::{Error, Result};

#[derive(Parser)]
#[command(name = "goalnav", version, about = "Image-goal navigation experiments on procedural worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.total_steps=4096`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root that relative output paths resolve against.
    #[arg(long, env = "GOALNAV_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a fixed episode set as line-delimited JSON.
    GenEpisodes {
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Defaults to `<output_dir>/episodes_<split>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with PPO, writing metrics and checkpoints to the output dir.
    Train {
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many updates.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode file; defaults to the held-out set of the checkpoint's config.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Defaults to the checkpoint path with an `.eval.json` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        axis: ablate::Axis,
        /// Environment steps per run; defaults to `train.total_steps`.
        #[arg(long)]
        budget: Option<u64>,
        /// Seeds per variant; defaults to `eval.ablate_seeds`.
        #[arg(long)]
        seeds: Option<u64>,
        /// Defaults to `<output_dir>/ablate_<axis>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export EigenCAM panels and a trajectory map for one episode.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Index into the episode set.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        timesteps: Vec<usize>,
        /// Defaults to `<checkpoint dir>/visualize`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump keypoint matches between an episode's start view and goal view.
    Keypoints {
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Defaults to `<output_dir>/keypoints`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Common {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_root.join(p)
        }
    }

    /// Config file plus overrides, with the output dir under the output root.
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut config = base.with_overrides(&self.overrides)?;
        config.output_dir = self.resolve(&config.output_dir);
        Ok(config)
    }

    /// A checkpoint's embedded config with evaluation-only overrides.
    fn checkpoint_config(&self, config: RunConfig) -> Result<RunConfig> {
        if let Some(bad) = self.overrides.iter().find(|o| !o.starts_with("eval.")) {
            return Err(Error::usage(format!(
                "only eval.* fields can be overridden for a trained checkpoint, got {bad:?}"
            )));
        }
        config.with_overrides(&self.overrides)
    }
}

/// Episodes from a file, or the config's held-out set.
fn episode_set(config: &RunConfig, file: Option<&Path>, count: usize) -> Result<Vec<Episode>> {
    let file = file.map(Path::to_path_buf).or_else(|| config.episodes.heldout.clone());
    match file {
        Some(path) => materialize(&read_episode_records(&path)?, &config.world.camera()),
        None => generate_episodes(config, Split::Heldout, count),
    }
}

fn pick(episodes: Vec<Episode>, index: usize) -> Result<Episode> {
    let n = episodes.len();
    episodes
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::usage(format!("episode {index} outside the episode set of {n}")))
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match cli.command {
        Command::GenEpisodes { split, count, out } => {
            let config = common.run_config()?;
            let name = match split {
                Split::Train => "episodes_train.jsonl",
                Split::Heldout => "episodes_heldout.jsonl",
            };
            let path = out.map(|p| common.resolve(&p)).unwrap_or_else(|| config.output_dir.join(name));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            }
            let records: Vec<_> = generate_episodes(&config, split, count)?.iter().map(Episode::record).collect();
            write_episodes(&path, &records)?;
            println!("{}", path.display());
        }
        Command::Train { resume, stop_after } => {
            let config = common.run_config()?;
            log::info!("training into {} (config {})", config.output_dir.display(), config.short_hash());
            let outcome = train(&config, resume.as_deref(), stop_after)?;
            if let Some(last) = outcome.records.last() {
                log::info!("finished at update {} after {} env steps", last.updates, last.step);
            }
            println!("{}", outcome.metrics.display());
            if let Some(ckpt) = outcome.last_checkpoint() {
                println!("{}", ckpt.display());
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            out,
        } => {
            let (config, model, store) = load_model(&checkpoint)?;
            let hash = config.hash();
            let config = common.checkpoint_config(config)?;
            let eps = episode_set(&config, episodes.as_deref(), config.eval.episodes)?;
            let traces = evaluate_model(
                &model,
                &store,
                &eps,
                &config.world.camera(),
                &config.eval,
                config.reward.success_radius_m,
                config.seed,
            )?;
            let report = EvalReport::new(&hash, Some(&checkpoint), traces.into_iter().map(|t| t.result).collect())?;
            let path = out.map(|p| common.resolve(&p)).unwrap_or_else(|| checkpoint.with_extension("eval.json"));
            report.save(&path)?;
            log::info!(
                "SR {:.3} SPL {:.3} over {} episodes",
                report.overall.success_rate,
                report.overall.spl,
                report.episodes.len()
            );
            println!("{}", path.display());
        }
        Command::Ablate {
            axis,
            budget,
            seeds,
            out,
        } => {
            let mut config = common.run_config()?;
            if let Some(b) = budget {
                config.train.total_steps = b;
                config.validate()?;
            }
            let seeds = seeds.unwrap_or(config.eval.ablate_seeds);
            let path = out
                .map(|p| common.resolve(&p))
                .unwrap_or_else(|| config.output_dir.join(format!("ablate_{axis}.csv")));
            let rows = ablate::sweep(&config, axis, seeds, &path)?;
            println!("{}", path.display());
            return Ok(rows.iter().all(|r| r.error.is_none()));
        }
        Command::Visualize {
            checkpoint,
            episodes,
            episode,
            timesteps,
            out,
        } => {
            let (config, model, store) = load_model(&checkpoint)?;
            let hash = config.hash();
            let config = common.checkpoint_config(config)?;
            let ep = pick(episode_set(&config, episodes.as_deref(), episode + 1)?, episode)?;
            let camera = config.world.camera();
            let mut controller = ModelController::new(&model, &store, config.eval.greedy, config.seed);
            let trace = run_episode(&ep, &mut controller, &camera, &config.eval, config.reward.success_radius_m)?;
            let dir = out.map(|p| common.resolve(&p)).unwrap_or_else(|| {
                checkpoint.parent().unwrap_or(Path::new(".")).join("visualize")
            });
            let panels = export_cam_panels(&model, &store, &ep, &trace.poses, &timesteps, &camera, &dir, &hash)?;
            let map = trajectory_map(ep.grid(), &trace.poses, &ep.goal, 8);
            let map_path = dir.join(format!("traj_ep{}.png", ep.id));
            save_png_with_text(&map, &map_path, &[("config_hash", &hash)])?;
            for p in panels.iter().chain([&map_path]) {
                println!("{}", p.display());
            }
        }
        Command::Keypoints { episodes, episode, out } => {
            let config = common.run_config()?;
            let ep = pick(episode_set(&config, episodes.as_deref(), episode + 1)?, episode)?;
            let obs = render(ep.grid(), &ep.start, &config.world.camera())?;
            let (g, o) = (detect(&ep.goal_image, DEFAULT_MAX_POINTS), detect(&obs, DEFAULT_MAX_POINTS));
            let matches = match_detections(&g, &o);
            let dir = out.map(|p| common.resolve(&p)).unwrap_or_else(|| config.output_dir.join("keypoints"));
            let path = dir.join(format!("matches_ep{}.png", ep.id));
            let canvas = match_visualization(&ep.goal_image, &obs, &matches, 4);
            save_png_with_text(&canvas, &path, &[("config_hash", &config.hash())])?;
            log::info!("{} goal and {} view keypoints, {} matches", g.len(), o.len(), matches.pairs.len());
            println!("{}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
