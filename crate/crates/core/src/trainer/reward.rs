use crate::config::RewardConfig;
use crate::worldsim::{Action, DistanceField, Pose};

/// Shaped reward for the transition `prev → pose` under `action`:
/// geodesic progress, heading progress once within the angle gate, a bonus
/// for stopping within the success radius, and a constant slack penalty.
/// `field` holds geodesic distances to the goal.
pub fn compute_reward(
    prev: &Pose,
    pose: &Pose,
    action: Action,
    goal: &Pose,
    field: &DistanceField,
    cfg: &RewardConfig,
) -> f64 {
    let (d_prev, d_cur) = (field.distance_at(prev.x, prev.y), field.distance_at(pose.x, pose.y));
    let progress = if d_prev.is_finite() && d_cur.is_finite() {
        d_prev - d_cur
    } else {
        0.0
    };
    let angle = if d_cur < cfg.angle_gate_m {
        prev.heading_error(goal) - pose.heading_error(goal)
    } else {
        0.0
    };
    let success = action == Action::Stop && pose.distance_to(goal) <= cfg.success_radius_m;
    cfg.c_d * progress + cfg.c_a * angle + if success { cfg.c_s } else { 0.0 } - cfg.c_slack
}
