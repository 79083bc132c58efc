use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_world_with, render, Camera, DistanceField, OccupancyGrid, OracleNavigator, Pose, RgbImage, AGENT_CLEARANCE_M};
use crate::error::{Error, Result};

/// Stopping within this Euclidean distance of the goal counts as success.
pub const SUCCESS_RADIUS_M: f64 = 1.0;
pub const MAX_EPISODE_STEPS: usize = 500;

const START_ATTEMPTS: usize = 64;

/// Geodesic start–goal distance range, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.min, self.max)
    }
}

/// Easy / medium / hard training mixture.
pub const TRAIN_BANDS: [Band; 3] = [Band::new(1.5, 3.0), Band::new(3.0, 5.0), Band::new(5.0, 8.0)];

/// A generated world with the seed that produced it.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub size_m: f64,
    pub grid: OccupancyGrid,
}

impl World {
    pub fn generate(seed: u64, size_m: f64, cell_size: f64) -> Result<Arc<World>> {
        Ok(Arc::new(World {
            seed,
            size_m,
            grid: generate_world_with(seed, size_m, cell_size)?,
        }))
    }
}

/// One navigation task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub id: u64,
    pub world: Arc<World>,
    pub band: Band,
    pub start: Pose,
    pub goal: Pose,
    pub goal_image: RgbImage,
    pub shortest_length: f64,
}

impl Episode {
    pub fn world_seed(&self) -> u64 {
        self.world.seed
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.world.grid
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            id: self.id,
            world_seed: self.world.seed,
            world_size_m: self.world.size_m,
            cell_size: self.world.grid.cell_size(),
            band: self.band,
            start: self.start,
            goal: self.goal,
            shortest_length: self.shortest_length,
        }
    }
}

fn agent_cells(grid: &OccupancyGrid) -> Vec<(usize, usize)> {
    grid.free_cells()
        .filter(|(i, j)| {
            let (x, y) = grid.cell_center(*i, *j);
            grid.clearance(x, y, AGENT_CLEARANCE_M) >= AGENT_CLEARANCE_M
        })
        .collect()
}

/// Samples start and goal cells whose geodesic distance lies in `band`;
/// both headings are uniform. The goal image is rendered with `camera`.
pub fn sample_episode<R: Rng + ?Sized>(
    world: &Arc<World>,
    id: u64,
    rng: &mut R,
    band: Band,
    camera: &Camera,
) -> Result<Episode> {
    if !(band.min > SUCCESS_RADIUS_M) || !(band.max > band.min) {
        return Err(Error::config(format!(
            "distance band [{}, {}] must satisfy {SUCCESS_RADIUS_M} < min < max",
            band.min, band.max
        )));
    }
    let grid = &world.grid;
    let cells = agent_cells(grid);
    if cells.is_empty() {
        return Err(Error::Sampling(format!("world {} has no free cells", world.seed)));
    }
    for _ in 0..START_ATTEMPTS {
        let start_cell = *cells.choose(rng).expect("non-empty");
        let field = DistanceField::from_cell(grid, start_cell);
        let goals: Vec<(usize, usize)> = cells
            .iter()
            .copied()
            .filter(|(i, j)| band.contains(field.cell_distance(*i, *j)))
            .collect();
        let Some(&goal_cell) = goals.choose(rng) else { continue };
        let (sx, sy) = grid.cell_center(start_cell.0, start_cell.1);
        let (gx, gy) = grid.cell_center(goal_cell.0, goal_cell.1);
        let start = Pose::new(sx, sy, rng.random_range(0.0..std::f64::consts::TAU));
        let goal = Pose::new(gx, gy, rng.random_range(0.0..std::f64::consts::TAU));
        // Grid connectivity ignores the agent's clearance and heading lattice,
        // so confirm the agent itself can complete the episode.
        let navigable = OracleNavigator::new(grid, goal)
            .plan(start)
            .is_some_and(|p| p.len() <= MAX_EPISODE_STEPS);
        if !navigable {
            continue;
        }
        let goal_image = render(grid, &goal, camera)?;
        return Ok(Episode {
            id,
            world: Arc::clone(world),
            band,
            start,
            goal,
            goal_image,
            shortest_length: field.cell_distance(goal_cell.0, goal_cell.1),
        });
    }
    Err(Error::Sampling(format!(
        "no start/goal pair in band [{}, {}] on world {} after {START_ATTEMPTS} attempts",
        band.min, band.max, world.seed
    )))
}

/// Serialized form of an episode; goal images are re-rendered on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u64,
    pub world_seed: u64,
    pub world_size_m: f64,
    pub cell_size: f64,
    pub band: Band,
    pub start: Pose,
    pub goal: Pose,
    pub shortest_length: f64,
}

pub fn write_episodes(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_episode_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Rebuilds episodes from records, regenerating each world once.
pub fn materialize(records: &[EpisodeRecord], camera: &Camera) -> Result<Vec<Episode>> {
    let mut worlds: Vec<Arc<World>> = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let world = match worlds
            .iter()
            .find(|w| w.seed == r.world_seed && w.size_m == r.world_size_m && w.grid.cell_size() == r.cell_size)
        {
            Some(w) => Arc::clone(w),
            None => {
                let w = World::generate(r.world_seed, r.world_size_m, r.cell_size)?;
                worlds.push(Arc::clone(&w));
                w
            }
        };
        let goal_image = render(&world.grid, &r.goal, camera)?;
        out.push(Episode {
            id: r.id,
            world,
            band: r.band,
            start: r.start,
            goal: r.goal,
            goal_image,
            shortest_length: r.shortest_length,
        });
    }
    Ok(out)
}
