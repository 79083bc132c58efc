//! Procedural indoor worlds, egocentric raycast rendering, agent motion,
//! geodesic distances, and episode sampling.

mod episode;
mod geodesic;
mod grid;
mod motion;
mod oracle;
mod render;

pub use episode::{
    materialize, read_episode_records, sample_episode, write_episodes, Band, Episode, EpisodeRecord, World,
    MAX_EPISODE_STEPS, SUCCESS_RADIUS_M, TRAIN_BANDS,
};
pub use geodesic::{descend, geodesic_distance, neighbors, DistanceField, MoveCount};
pub use grid::{generate_world, generate_world_with, OccupancyGrid, DEFAULT_CELL_SIZE, PALETTE_SIZE};
pub use motion::{pose_is_valid, segment_is_clear, step, Action, Pose, AGENT_CLEARANCE_M, FORWARD_STEP_M, TURN_DEG};
pub use oracle::OracleNavigator;
pub use render::{render, Camera, RgbImage, DEFAULT_HFOV_DEG, DEFAULT_RESOLUTION};
