use std::collections::{HashMap, VecDeque};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_CELL_SIZE: f64 = 0.25;
/// Number of distinct wall colors.
pub const PALETTE_SIZE: u8 = 12;

const MAX_ATTEMPTS: usize = 8;

/// Discretized floorplan. `true` cells are occupied.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cell_size: f64,
    cells: Vec<bool>,
    palette: Vec<u8>,
}

impl OccupancyGrid {
    /// Builds a grid from a row-major occupancy mask, validating every
    /// invariant. Walls all get color 0.
    pub fn from_cells(width: usize, height: usize, cell_size: f64, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::config(format!(
                "{width}x{height} grid needs {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        let grid = Self {
            width,
            height,
            cell_size,
            palette: vec![0; cells.len()],
            cells,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Out-of-range cells count as occupied.
    pub fn is_occupied(&self, i: isize, j: isize) -> bool {
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return true;
        }
        self.cells[j as usize * self.width + i as usize]
    }

    pub fn is_free(&self, i: usize, j: usize) -> bool {
        !self.is_occupied(i as isize, j as isize)
    }

    /// Palette index of an occupied cell.
    pub fn color_id(&self, i: usize, j: usize) -> u8 {
        self.palette[j * self.width + i]
    }

    /// Cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (i, j) = ((x / self.cell_size) as usize, (y / self.cell_size) as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.cell_size, (j as f64 + 0.5) * self.cell_size)
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |j| (0..self.width).map(move |i| (i, j))).filter(|(i, j)| self.is_free(*i, *j))
    }

    /// Distance from a point to the nearest occupied cell, capped at `radius`.
    pub fn clearance(&self, x: f64, y: f64, radius: f64) -> f64 {
        let cs = self.cell_size;
        let (i0, i1) = (((x - radius) / cs).floor() as isize, ((x + radius) / cs).floor() as isize);
        let (j0, j1) = (((y - radius) / cs).floor() as isize, ((y + radius) / cs).floor() as isize);
        let mut best = radius;
        for j in j0..=j1 {
            for i in i0..=i1 {
                if !self.is_occupied(i, j) {
                    continue;
                }
                let (lx, ly) = (i as f64 * cs, j as f64 * cs);
                let dx = (lx - x).max(0.0).max(x - (lx + cs));
                let dy = (ly - y).max(0.0).max(y - (ly + cs));
                best = best.min((dx * dx + dy * dy).sqrt());
            }
        }
        best
    }

    /// Number of 4-connected components of free space.
    pub fn free_components(&self) -> usize {
        let mut seen = vec![false; self.cells.len()];
        let mut count = 0;
        for start in 0..self.cells.len() {
            if self.cells[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(k) = queue.pop_front() {
                let (i, j) = ((k % self.width) as isize, (k / self.width) as isize);
                for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (ni, nj) = (i + di, j + dj);
                    if self.is_occupied(ni, nj) {
                        continue;
                    }
                    let nk = nj as usize * self.width + ni as usize;
                    if !seen[nk] {
                        seen[nk] = true;
                        queue.push_back(nk);
                    }
                }
            }
        }
        count
    }

    pub fn border_occupied(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).all(|i| self.cells[i] && self.cells[(h - 1) * w + i])
            && (0..h).all(|j| self.cells[j * w] && self.cells[j * w + w - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size.is_nan() || self.cell_size <= 0.0 {
            return Err(Error::config("cell_size must be positive"));
        }
        if self.width < 3 || self.height < 3 {
            return Err(Error::config("grid must be at least 3x3"));
        }
        if !self.border_occupied() {
            return Err(Error::config("border cells must be occupied"));
        }
        if self.free_components() != 1 {
            return Err(Error::config("free space must form one connected component"));
        }
        Ok(())
    }
}

/// Procedural indoor layout: a lattice of rooms joined by doorways, with
/// some merged rooms, loops, and pillars. Deterministic in `seed`.
pub fn generate_world(seed: u64, size_m: f64) -> Result<OccupancyGrid> {
    generate_world_with(seed, size_m, DEFAULT_CELL_SIZE)
}

pub fn generate_world_with(seed: u64, size_m: f64, cell_size: f64) -> Result<OccupancyGrid> {
    if !(size_m >= 4.0) {
        return Err(Error::config(format!("world size {size_m} m is below 4 m")));
    }
    if !(cell_size > 0.0) || cell_size > size_m / 8.0 {
        return Err(Error::config(format!("cell size {cell_size} m does not fit a {size_m} m world")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let grid = layout(&mut rng, size_m, cell_size);
        if grid.validate().is_ok() {
            return Ok(grid);
        }
    }
    Err(Error::Generation {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

/// Wall line positions along one axis, spaced by random room sizes.
fn splits(rng: &mut ChaCha8Rng, n: usize, min_room: usize, max_room: usize) -> Vec<usize> {
    let mut lines = vec![0];
    let mut pos = 0;
    loop {
        let remaining = n - 1 - pos;
        if remaining <= max_room + 1 {
            lines.push(n - 1);
            break;
        }
        let room = rng.random_range(min_room..=max_room);
        if remaining - (room + 1) < min_room + 1 {
            lines.push(n - 1);
            break;
        }
        pos += room + 1;
        lines.push(pos);
    }
    lines
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Segment {
    /// Vertical wall line `line` spanning room row `span`.
    Vertical { line: usize, span: usize },
    Horizontal { line: usize, span: usize },
    Pillar(usize),
}

fn layout(rng: &mut ChaCha8Rng, size_m: f64, cs: f64) -> OccupancyGrid {
    let n = (size_m / cs).round() as usize;
    let cells_for = |m: f64| ((m / cs).round() as usize).max(3);
    let (min_room, max_room) = (cells_for(1.5), cells_for(2.75));
    let xs = splits(rng, n, min_room, max_room);
    let ys = splits(rng, n, min_room, max_room);
    let (rx, ry) = (xs.len() - 1, ys.len() - 1);

    let mut occ = vec![false; n * n];
    let mut seg: Vec<Option<Segment>> = vec![None; n * n];
    for (li, &x) in xs.iter().enumerate() {
        for (span, w) in ys.windows(2).enumerate() {
            for y in w[0]..=w[1] {
                occ[y * n + x] = true;
                seg[y * n + x].get_or_insert(Segment::Vertical { line: li, span });
            }
        }
    }
    for (li, &y) in ys.iter().enumerate() {
        for (span, w) in xs.windows(2).enumerate() {
            for x in w[0]..=w[1] {
                occ[y * n + x] = true;
                seg[y * n + x].get_or_insert(Segment::Horizontal { line: li, span });
            }
        }
    }

    // Random spanning tree over rooms, then a few extra connections.
    let room = |a: usize, b: usize| b * rx + a;
    let mut visited = vec![false; rx * ry];
    let mut stack = vec![(rng.random_range(0..rx), rng.random_range(0..ry))];
    visited[room(stack[0].0, stack[0].1)] = true;
    let mut links: Vec<((usize, usize), (usize, usize))> = Vec::new();
    while let Some(&(a, b)) = stack.last() {
        let mut nbrs: Vec<(usize, usize)> = Vec::new();
        if a > 0 {
            nbrs.push((a - 1, b));
        }
        if a + 1 < rx {
            nbrs.push((a + 1, b));
        }
        if b > 0 {
            nbrs.push((a, b - 1));
        }
        if b + 1 < ry {
            nbrs.push((a, b + 1));
        }
        nbrs.retain(|(c, d)| !visited[room(*c, *d)]);
        match nbrs.choose(rng) {
            Some(&next) => {
                visited[room(next.0, next.1)] = true;
                links.push(((a, b), next));
                stack.push(next);
            }
            None => {
                stack.pop();
            }
        }
    }
    for a in 0..rx {
        for b in 0..ry {
            if a + 1 < rx && rng.random_bool(0.25) {
                links.push(((a, b), (a + 1, b)));
            }
            if b + 1 < ry && rng.random_bool(0.25) {
                links.push(((a, b), (a, b + 1)));
            }
        }
    }

    let door = cells_for(0.9);
    for ((a, b), (c, d)) in links {
        let merge = rng.random_bool(0.15);
        if a != c {
            // Shared vertical wall at xs[max(a,c)], spanning rows ys[b]..ys[b+1].
            let x = xs[a.max(c)];
            let (lo, hi) = (ys[b] + 1, ys[b + 1] - 1);
            let (from, to) = opening(rng, lo, hi, door, merge);
            for y in from..=to {
                occ[y * n + x] = false;
            }
        } else {
            let y = ys[b.max(d)];
            let (lo, hi) = (xs[a] + 1, xs[a + 1] - 1);
            let (from, to) = opening(rng, lo, hi, door, merge);
            for x in from..=to {
                occ[y * n + x] = false;
            }
        }
    }

    // Pillars, kept only when free space stays connected.
    let mut pillar_count = 0;
    for b in 0..ry {
        for a in 0..rx {
            if !rng.random_bool(0.5) {
                continue;
            }
            let side = rng.random_range(1..=2usize);
            let (x0, x1) = (xs[a] + 2, xs[a + 1].saturating_sub(2 + side));
            let (y0, y1) = (ys[b] + 2, ys[b + 1].saturating_sub(2 + side));
            if x1 < x0 || y1 < y0 {
                continue;
            }
            let (px, py) = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
            let cells: Vec<usize> = (py..py + side)
                .flat_map(|y| (px..px + side).map(move |x| y * n + x))
                .collect();
            if cells.iter().any(|k| occ[*k]) {
                continue;
            }
            for k in &cells {
                occ[*k] = true;
            }
            let probe = OccupancyGrid {
                width: n,
                height: n,
                cell_size: cs,
                cells: occ.clone(),
                palette: vec![0; n * n],
            };
            if probe.free_components() != 1 {
                for k in &cells {
                    occ[*k] = false;
                }
                continue;
            }
            for k in cells {
                seg[k] = Some(Segment::Pillar(pillar_count));
            }
            pillar_count += 1;
        }
    }

    let mut colors: HashMap<Segment, u8> = HashMap::new();
    let mut keys: Vec<Segment> = Vec::new();
    for s in seg.iter().flatten() {
        if !colors.contains_key(s) {
            colors.insert(*s, 0);
            keys.push(*s);
        }
    }
    for k in keys {
        colors.insert(k, rng.random_range(0..PALETTE_SIZE));
    }
    let palette = seg
        .iter()
        .map(|s| s.map(|s| colors[&s]).unwrap_or(0))
        .collect();
    OccupancyGrid {
        width: n,
        height: n,
        cell_size: cs,
        cells: occ,
        palette,
    }
}

/// Door interval inside `[lo, hi]`; a merge opens the whole span.
fn opening(rng: &mut ChaCha8Rng, lo: usize, hi: usize, door: usize, merge: bool) -> (usize, usize) {
    let span = hi + 1 - lo;
    if merge || span <= door + 1 {
        return (lo, hi);
    }
    let start = rng.random_range(lo + 1..=hi + 1 - door);
    (start, start + door - 1)
}
