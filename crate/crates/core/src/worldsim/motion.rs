use std::f64::consts::TAU;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::OccupancyGrid;

pub const FORWARD_STEP_M: f64 = 0.25;
pub const TURN_DEG: f64 = 30.0;
/// Radius of the point agent when checking forward motion.
pub const AGENT_CLEARANCE_M: f64 = 0.1;

/// Heading resolution: 2^36 ticks per 30° turn, so turns and full rotations
/// are exact.
const TICKS_PER_TURN: u64 = 1 << 36;
const TICKS_PER_REV: u64 = 12 * TICKS_PER_TURN;

/// Discrete agent action; integer codes follow declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    MoveForward = 0,
    TurnLeft = 1,
    TurnRight = 2,
    Stop = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// Agent pose. `theta` is counter-clockwise from +x, kept in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    ticks: u64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        let turns = (theta / TAU).rem_euclid(1.0);
        let ticks = ((turns * TICKS_PER_REV as f64).round() as u64) % TICKS_PER_REV;
        Self { x, y, ticks }
    }

    pub fn theta(&self) -> f64 {
        self.ticks as f64 / TICKS_PER_REV as f64 * TAU
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Rotated by a whole number of 30° turns (positive is left).
    pub fn turned(&self, turns: i64) -> Pose {
        let delta = (turns.rem_euclid(12) as u64) * TICKS_PER_TURN;
        Pose {
            ticks: (self.ticks + delta) % TICKS_PER_REV,
            ..*self
        }
    }

    pub fn with_position(&self, x: f64, y: f64) -> Pose {
        Pose { x, y, ..*self }
    }

    /// Absolute heading difference folded into `[0, π]`.
    pub fn heading_error(&self, other: &Pose) -> f64 {
        let d = (self.theta() - other.theta()).rem_euclid(TAU);
        d.min(TAU - d)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    x: f64,
    y: f64,
    theta: f64,
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            x: self.x,
            y: self.y,
            theta: self.theta(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Ok(Pose::new(r.x, r.y, r.theta))
    }
}

/// True when the pose lies inside a free cell.
pub fn pose_is_valid(grid: &OccupancyGrid, pose: &Pose) -> bool {
    matches!(grid.cell_of(pose.x, pose.y), Some((i, j)) if grid.is_free(i, j))
}

/// True when the straight segment between two points keeps the agent
/// clearance everywhere.
pub fn segment_is_clear(grid: &OccupancyGrid, from: (f64, f64), to: (f64, f64)) -> bool {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let samples = ((len / 0.05).ceil() as usize).max(1);
    (0..=samples).all(|k| {
        let t = k as f64 / samples as f64;
        let (x, y) = (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1));
        grid.clearance(x, y, AGENT_CLEARANCE_M) >= AGENT_CLEARANCE_M
    })
}

/// Applies one action. Forward motion is blocking: a move that would bring
/// the agent within its clearance of a wall leaves the pose unchanged.
pub fn step(grid: &OccupancyGrid, pose: &Pose, action: Action) -> (Pose, bool) {
    match action {
        Action::MoveForward => {
            let th = pose.theta();
            let (nx, ny) = (pose.x + FORWARD_STEP_M * th.cos(), pose.y + FORWARD_STEP_M * th.sin());
            if segment_is_clear(grid, (pose.x, pose.y), (nx, ny)) {
                (pose.with_position(nx, ny), false)
            } else {
                (*pose, true)
            }
        }
        Action::TurnLeft => (pose.turned(1), false),
        Action::TurnRight => (pose.turned(-1), false),
        Action::Stop => (*pose, false),
    }
}
