use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use super::{OccupancyGrid, Pose};

/// Path cost as counts of straight and diagonal cell moves.
///
/// Costs `a + b·√2` with distinct integer pairs never tie, so keeping the
/// pair (rather than a running float) makes shortest distances independent
/// of relaxation order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MoveCount {
    pub straight: u32,
    pub diagonal: u32,
}

impl MoveCount {
    pub fn cells(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * SQRT_2
    }

    fn then(self, diagonal: bool) -> Self {
        if diagonal {
            Self {
                diagonal: self.diagonal + 1,
                ..self
            }
        } else {
            Self {
                straight: self.straight + 1,
                ..self
            }
        }
    }
}

impl Ord for MoveCount {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cells()
            .total_cmp(&other.cells())
            .then(self.straight.cmp(&other.straight))
    }
}

impl PartialOrd for MoveCount {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 8-connected neighbors of a free cell; diagonals may not cut corners.
pub fn neighbors(grid: &OccupancyGrid, i: usize, j: usize) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
    const OFFSETS: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let (i, j) = (i as isize, j as isize);
    OFFSETS.into_iter().filter_map(move |(di, dj)| {
        let (ni, nj) = (i + di, j + dj);
        if grid.is_occupied(ni, nj) {
            return None;
        }
        let diagonal = di != 0 && dj != 0;
        if diagonal && (grid.is_occupied(i + di, j) || grid.is_occupied(i, j + dj)) {
            return None;
        }
        Some((ni as usize, nj as usize, diagonal))
    })
}

/// Single-source shortest move counts over free cells.
#[derive(Clone, Debug)]
pub struct DistanceField {
    width: usize,
    cell_size: f64,
    source: (usize, usize),
    cost: Vec<Option<MoveCount>>,
}

#[derive(PartialEq, Eq)]
struct Frontier(MoveCount, usize);

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl DistanceField {
    pub fn from_cell(grid: &OccupancyGrid, source: (usize, usize)) -> Self {
        let w = grid.width();
        let mut cost: Vec<Option<MoveCount>> = vec![None; w * grid.height()];
        let mut heap = BinaryHeap::new();
        if grid.is_free(source.0, source.1) {
            let k = source.1 * w + source.0;
            cost[k] = Some(MoveCount::default());
            heap.push(Frontier(MoveCount::default(), k));
        }
        while let Some(Frontier(c, k)) = heap.pop() {
            if cost[k].is_some_and(|best| c > best) {
                continue;
            }
            for (ni, nj, diagonal) in neighbors(grid, k % w, k / w) {
                let nk = nj * w + ni;
                let next = c.then(diagonal);
                if cost[nk].is_none_or(|best| next < best) {
                    cost[nk] = Some(next);
                    heap.push(Frontier(next, nk));
                }
            }
        }
        Self {
            width: w,
            cell_size: grid.cell_size(),
            source,
            cost,
        }
    }

    /// Field rooted at the cell containing `pose`.
    pub fn from_pose(grid: &OccupancyGrid, pose: &Pose) -> Self {
        let cell = grid.cell_of(pose.x, pose.y).unwrap_or((0, 0));
        Self::from_cell(grid, cell)
    }

    pub fn source(&self) -> (usize, usize) {
        self.source
    }

    pub fn moves(&self, i: usize, j: usize) -> Option<MoveCount> {
        self.cost.get(j * self.width + i).copied().flatten()
    }

    /// Geodesic meters from the source to cell `(i, j)`; infinite when
    /// unreachable.
    pub fn cell_distance(&self, i: usize, j: usize) -> f64 {
        self.moves(i, j)
            .map(|m| m.cells() * self.cell_size)
            .unwrap_or(f64::INFINITY)
    }

    /// Geodesic meters from the source to the cell containing a point.
    pub fn distance_at(&self, x: f64, y: f64) -> f64 {
        let (i, j) = ((x / self.cell_size).floor(), (y / self.cell_size).floor());
        if i < 0.0 || j < 0.0 {
            return f64::INFINITY;
        }
        self.cell_distance(i as usize, j as usize)
    }
}

/// Shortest free-space path length between the cells containing `a` and
/// `b` (8-connected, diagonal moves cost √2 cells). Infinite when either
/// pose is outside free space or the pair is disconnected.
pub fn geodesic_distance(grid: &OccupancyGrid, a: &Pose, b: &Pose) -> f64 {
    let (Some(ca), Some(cb)) = (grid.cell_of(a.x, a.y), grid.cell_of(b.x, b.y)) else {
        return f64::INFINITY;
    };
    if !grid.is_free(ca.0, ca.1) || !grid.is_free(cb.0, cb.1) {
        return f64::INFINITY;
    }
    if ca == cb {
        return 0.0;
    }
    DistanceField::from_cell(grid, cb).cell_distance(ca.0, ca.1)
}

/// One shortest cell path from `from` to the field's source, following
/// strictly decreasing cost.
pub fn descend(grid: &OccupancyGrid, field: &DistanceField, from: (usize, usize)) -> Option<Vec<(usize, usize)>> {
    let mut path = vec![from];
    let mut cur = from;
    let mut cur_cost = field.moves(cur.0, cur.1)?;
    while cur != field.source() {
        let next = neighbors(grid, cur.0, cur.1)
            .filter_map(|(i, j, d)| {
                let c = field.moves(i, j)?;
                (c.then(d) == cur_cost).then_some(((i, j), c))
            })
            .min_by(|a, b| a.1.cmp(&b.1))?;
        cur = next.0;
        cur_cost = next.1;
        path.push(cur);
    }
    Some(path)
}
