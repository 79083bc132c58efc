//! Episode runner, SR and SPL metrics, reports, and activation panels.

mod cam;
mod metrics;
mod runner;

pub use cam::{cam_maps, cam_panel, export_cam_panels};
pub use metrics::{spl, success_rate, Aggregate, EpisodeResult, EvalReport};
pub use runner::{
    episode_seed, evaluate_model, run_episode, Controller, EpisodeTrace, ModelController, OracleController,
    ScriptedController, StepContext, EVAL_BATCH,
};
