//! WebAssembly bindings for a single-page demo. One procedural world and
//! episode per seed; the page drives the agent and renders three views.

use goalnav::config::RunConfig;
use goalnav::evaluation::cam_panel;
use goalnav::fusion::{BackboneSpec, FusionConfig, Mechanism};
use goalnav::imaging::{match_visualization, to_canvas, trajectory_map};
use goalnav::keypoints::{detect, match_detections, DEFAULT_MAX_POINTS};
use goalnav::model::NavModel;
use goalnav::numerics::ParamStore;
use goalnav::policy::PolicyConfig;
use goalnav::trainer::{generate_episodes, Split};
use goalnav::worldsim::{render, step, Action, Camera, Episode, Pose, RgbImage};
use wasm_bindgen::prelude::*;

const MAP_SCALE: u32 = 6;
const MATCH_SCALE: u32 = 3;

/// An RGBA image handed to the page.
#[wasm_bindgen]
pub struct Frame {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Pixels in row-major RGBA order.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Frame {
    fn from_rgb(width: u32, height: u32, rgb: &[u8]) -> Self {
        let rgba = rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Self { width, height, rgba }
    }
}

#[wasm_bindgen]
pub struct Demo {
    episode: Episode,
    camera: Camera,
    path: Vec<Pose>,
    stopped: bool,
    collisions: usize,
    model: NavModel,
    store: ParamStore<f32>,
}

fn err(e: goalnav::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
impl Demo {
    /// Builds world `seed` with one episode and a small randomly initialized
    /// mid-fusion encoder for the activation maps.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, resolution: usize) -> Result<Demo, String> {
        let mut config = RunConfig::default();
        config.seed = seed;
        config.world.resolution = resolution;
        config.world.heldout_seed_offset = seed;
        config.world.heldout_worlds = 1;
        let episode = generate_episodes(&config, Split::Heldout, 1).map_err(err)?.remove(0);
        let fusion = FusionConfig {
            backbone: BackboneSpec::with_widths(8, [8, 16, 16, 32], 32),
            ..FusionConfig::with_mechanism(Mechanism::Mid)
        };
        let policy = PolicyConfig {
            hidden_size: 16,
            action_embed_dim: 4,
            recurrent_layers: 1,
        };
        let (model, store) = NavModel::new(&fusion, &policy, resolution, seed).map_err(err)?;
        Ok(Demo {
            path: vec![episode.start],
            camera: config.world.camera(),
            episode,
            stopped: false,
            collisions: 0,
            model,
            store,
        })
    }

    /// Applies an action by index (0 forward, 1 left, 2 right, 3 STOP).
    pub fn act(&mut self, action: usize) -> Result<(), String> {
        let a = Action::from_index(action).ok_or_else(|| format!("no action with index {action}"))?;
        if self.stopped {
            return Ok(());
        }
        if a == Action::Stop {
            self.stopped = true;
            return Ok(());
        }
        let pose = *self.path.last().expect("path starts at the start pose");
        let (next, blocked) = step(self.episode.grid(), &pose, a);
        self.collisions += usize::from(blocked);
        self.path.push(next);
        Ok(())
    }

    /// Progress summary as JSON.
    pub fn status(&self) -> String {
        let pose = self.path.last().expect("non-empty path");
        let d = pose.distance_to(&self.episode.goal);
        format!(
            "{{\"steps\":{},\"distance_m\":{d:.3},\"shortest_m\":{:.3},\"collisions\":{},\"stopped\":{},\"success\":{}}}",
            self.path.len() - 1,
            self.episode.shortest_length,
            self.collisions,
            self.stopped,
            self.stopped && d <= 1.0
        )
    }

    fn view(&self) -> Result<RgbImage, String> {
        render(self.episode.grid(), self.path.last().expect("non-empty path"), &self.camera).map_err(err)
    }

    pub fn observation(&self) -> Result<Frame, String> {
        let c = to_canvas(&self.view()?);
        Ok(Frame::from_rgb(c.width(), c.height(), c.as_raw()))
    }

    pub fn goal(&self) -> Frame {
        let c = to_canvas(&self.episode.goal_image);
        Frame::from_rgb(c.width(), c.height(), c.as_raw())
    }

    /// Top-down map with the path so far.
    pub fn map(&self) -> Frame {
        let c = trajectory_map(self.episode.grid(), &self.path, &self.episode.goal, MAP_SCALE);
        Frame::from_rgb(c.width(), c.height(), c.as_raw())
    }

    /// Goal view beside the current view with keypoint matches drawn.
    pub fn matches(&self) -> Result<Frame, String> {
        let view = self.view()?;
        let m = match_detections(
            &detect(&self.episode.goal_image, DEFAULT_MAX_POINTS),
            &detect(&view, DEFAULT_MAX_POINTS),
        );
        let c = match_visualization(&self.episode.goal_image, &view, &m, MATCH_SCALE);
        Ok(Frame::from_rgb(c.width(), c.height(), c.as_raw()))
    }

    /// View, goal, and EigenCAM overlays before and after FiLM modulation.
    pub fn eigencam(&self) -> Result<Frame, String> {
        let c = cam_panel(&self.model, &self.store, &self.view()?, &self.episode.goal_image).map_err(err)?;
        Ok(Frame::from_rgb(c.width(), c.height(), c.as_raw()))
    }
}
