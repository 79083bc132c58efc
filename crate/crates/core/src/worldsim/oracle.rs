use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::{step, Action, DistanceField, Episode, OccupancyGrid, Pose, FORWARD_STEP_M};

/// Stop once this close (straight line) to the goal.
const STOP_RADIUS_M: f64 = 0.5;
/// Position quantum for duplicate detection during search.
const STATE_QUANTUM_M: f64 = 0.05;
/// Hard cap on expanded states per plan.
const MAX_EXPANSIONS: usize = 400_000;

/// Privileged planner that searches the agent's own action space.
///
/// A* runs over `(position, heading)` states generated by the real motion
/// model, so the returned action sequence replays exactly. Positions are
/// bucketed on a fine lattice to keep the frontier finite. The heuristic is
/// the geodesic distance to the goal in forward steps, which is slightly
/// inadmissible near walls; plans are short, not always shortest.
pub struct OracleNavigator<'a> {
    grid: &'a OccupancyGrid,
    field: DistanceField,
    goal: Pose,
}

type Key = (i64, i64, u8);

fn key(p: &Pose) -> Key {
    let turn = (p.theta() / 30f64.to_radians()).round() as i64;
    (
        (p.x / STATE_QUANTUM_M).round() as i64,
        (p.y / STATE_QUANTUM_M).round() as i64,
        turn.rem_euclid(12) as u8,
    )
}

impl<'a> OracleNavigator<'a> {
    pub fn new(grid: &'a OccupancyGrid, goal: Pose) -> Self {
        Self {
            grid,
            field: DistanceField::from_pose(grid, &goal),
            goal,
        }
    }

    pub fn for_episode(episode: &'a Episode) -> Self {
        Self::new(episode.grid(), episode.goal)
    }

    pub fn field(&self) -> &DistanceField {
        &self.field
    }

    fn heuristic(&self, p: &Pose) -> u64 {
        let d = self.field.distance_at(p.x, p.y).min(p.distance_to(&self.goal) * 4.0);
        // Scaled by 4 to break ties toward progress; costs are in quarter steps.
        ((d - STOP_RADIUS_M).max(0.0) / FORWARD_STEP_M * 4.0).round() as u64
    }

    /// Action sequence from `start` ending with STOP, or `None` if the goal
    /// region is unreachable within the search budget.
    pub fn plan(&self, start: Pose) -> Option<Vec<Action>> {
        let mut states = vec![start];
        let mut parent: Vec<Option<(usize, Action)>> = vec![None];
        let mut best: HashMap<Key, u64> = HashMap::from([(key(&start), 0)]);
        let mut open = BinaryHeap::new();
        open.push(Reverse((self.heuristic(&start), 0u64, 0usize)));
        let mut expanded = 0;
        while let Some(Reverse((_, g, idx))) = open.pop() {
            let pose = states[idx];
            if best.get(&key(&pose)).is_some_and(|&b| b < g) {
                continue;
            }
            if pose.distance_to(&self.goal) <= STOP_RADIUS_M {
                let mut actions = vec![Action::Stop];
                let mut cur = idx;
                while let Some((prev, a)) = parent[cur] {
                    actions.push(a);
                    cur = prev;
                }
                actions.reverse();
                return Some(actions);
            }
            expanded += 1;
            if expanded > MAX_EXPANSIONS {
                return None;
            }
            for a in [Action::MoveForward, Action::TurnLeft, Action::TurnRight] {
                let (next, blocked) = step(self.grid, &pose, a);
                if blocked {
                    continue;
                }
                let ng = g + 4;
                let k = key(&next);
                if best.get(&k).is_some_and(|&b| b <= ng) {
                    continue;
                }
                best.insert(k, ng);
                states.push(next);
                parent.push(Some((idx, a)));
                open.push(Reverse((ng + self.heuristic(&next), ng, states.len() - 1)));
            }
        }
        None
    }

    /// First action of a fresh plan from `pose`; STOP when no plan exists.
    pub fn act(&self, pose: &Pose) -> Action {
        self.plan(*pose).map_or(Action::Stop, |p| p[0])
    }

    /// Executes one plan from `start`, truncated to `max_steps`; returns the
    /// visited poses (including the start) and the action sequence.
    pub fn rollout(&self, start: Pose, max_steps: usize) -> (Vec<Pose>, Vec<Action>) {
        let mut poses = vec![start];
        let mut actions = Vec::new();
        let mut pose = start;
        for a in self.plan(start).unwrap_or_default().into_iter().take(max_steps) {
            actions.push(a);
            if a == Action::Stop {
                break;
            }
            pose = step(self.grid, &pose, a).0;
            poses.push(pose);
        }
        (poses, actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{sample_episode, Camera, World, TRAIN_BANDS};
    use rand::SeedableRng;

    #[test]
    fn plans_replay_to_the_goal() {
        let world = World::generate(5, 10.0, 0.25).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&world, 0, &mut rng, TRAIN_BANDS[2], &Camera::default()).unwrap();
        let nav = OracleNavigator::for_episode(&ep);
        let (poses, actions) = nav.rollout(ep.start, 500);
        assert_eq!(actions.last(), Some(&Action::Stop));
        assert!(poses.last().unwrap().distance_to(&ep.goal) <= STOP_RADIUS_M);
    }
}
