use std::path::{Path, PathBuf};

use image::RgbImage as Canvas;

use crate::error::{Error, Result};
use crate::fusion::{eigencam, EncoderInput, Mechanism};
use crate::imaging::{overlay, save_png_with_text, tile_horizontal, to_canvas};
use crate::model::NavModel;
use crate::numerics::{Graph, ParamStore, Var};
use crate::worldsim::{render, Camera, Episode, Pose, RgbImage};

const OVERLAY_ALPHA: f32 = 0.5;

/// EigenCAM maps of one view pair: `(pre, post, h, w)`. For mid fusion these
/// are the deepest FiLM site before and after modulation; otherwise `pre` is
/// the last observation block and `post` is absent.
pub fn cam_maps(
    model: &NavModel,
    store: &ParamStore<f32>,
    obs: &RgbImage,
    goal: &RgbImage,
) -> Result<(Vec<f32>, Option<Vec<f32>>, usize, usize)> {
    let input = EncoderInput::<f32>::from_images(&[obs], &[goal], model.encoder.config())?;
    let mut g = Graph::new(store);
    let out = model.encoder.forward(&mut g, &input)?;
    let trace = &out.obs_trace;
    let (pre, post) = if model.encoder.config().mechanism == Mechanism::Mid {
        (*trace.film_pre.last().expect("mid fusion modulates"), trace.film_post.last().copied())
    } else {
        (*trace.blocks.last().expect("backbone has blocks"), None)
    };
    let cam = |g: &Graph<f32>, v: Var| {
        let s = g.shape(v);
        let (c, h, w) = (s[1], s[2], s[3]);
        Ok::<_, Error>((eigencam(g.value(v).data(), c, h, w)?, h, w))
    };
    let (pre_map, h, w) = cam(&g, pre)?;
    let post_map = post.map(|v| cam(&g, v).map(|m| m.0)).transpose()?;
    Ok((pre_map, post_map, h, w))
}

/// Observation, goal, pre-fusion overlay, post-fusion overlay; the last
/// frame is black when the mechanism has no fusion site inside the encoder.
pub fn cam_panel(model: &NavModel, store: &ParamStore<f32>, obs: &RgbImage, goal: &RgbImage) -> Result<Canvas> {
    let (pre, post, h, w) = cam_maps(model, store, obs, goal)?;
    let size = obs.width() as u32;
    let post_frame = match post {
        Some(m) => overlay(obs, &m, h, w, OVERLAY_ALPHA),
        None => Canvas::new(size, size),
    };
    Ok(tile_horizontal(&[
        to_canvas(obs),
        to_canvas(goal),
        overlay(obs, &pre, h, w, OVERLAY_ALPHA),
        post_frame,
    ]))
}

/// Writes `cam_ep{id}_t{step}.png` for each requested timestep of a
/// trajectory; PNGs carry the config hash as text metadata.
#[allow(clippy::too_many_arguments)]
pub fn export_cam_panels(
    model: &NavModel,
    store: &ParamStore<f32>,
    episode: &Episode,
    poses: &[Pose],
    timesteps: &[usize],
    camera: &Camera,
    out_dir: &Path,
    config_hash: &str,
) -> Result<Vec<PathBuf>> {
    if let Some(&bad) = timesteps.iter().find(|&&t| t >= poses.len()) {
        return Err(Error::usage(format!(
            "timestep {bad} outside the episode's range 0..={}",
            poses.len().saturating_sub(1)
        )));
    }
    let mut written = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let obs = render(episode.grid(), &poses[t], camera)?;
        let panel = cam_panel(model, store, &obs, &episode.goal_image)?;
        let path = out_dir.join(format!("cam_ep{}_t{t:03}.png", episode.id));
        save_png_with_text(&panel, &path, &[("config_hash", config_hash)])?;
        written.push(path);
    }
    Ok(written)
}
