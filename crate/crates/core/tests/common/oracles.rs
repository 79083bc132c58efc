//! Independent reference implementations shared by the integration suites.

use std::collections::HashMap;

use goalnav::worldsim::OccupancyGrid;
use petgraph::graph::{NodeIndex, UnGraph};

#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ic * h + iy as usize) * w + ix as usize] * wt[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Independent 8-connected graphwith no corner cutting and f64 weights.
pub fn oracle_graph(grid: &OccupancyGrid) -> (UnGraph<(), f64>, HashMap<(usize, usize), NodeIndex>) {
    let mut g = UnGraph::new_undirected();
    let mut nodes = HashMap::new();
    for (i, j) in grid.free_cells() {
        nodes.insert((i, j), g.add_node(()));
    }
    let free = |i: isize, j: isize| !grid.is_occupied(i, j);
    for (&(i, j), &n) in &nodes {
        let (i, j) = (i as isize, j as isize);
        for (di, dj) in [(1, 0), (0, 1), (1, 1), (1, -1)] {
            let (ni, nj) = (i + di, j + dj);
            if !free(ni, nj) {
                continue;
            }
            let diagonal = di != 0 && dj != 0;
            if diagonal && !(free(i + di, j) && free(i, j + dj)) {
                continue;
            }
            let w = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            g.add_edge(n, nodes[&(ni as usize, nj as usize)], w * grid.cell_size());
        }
    }
    (g, nodes)
}

/// λ-return oracle: explicit n-step returns blended with weights
/// `(1−λ)λ^{n−1}`, the tail weight going to the longest available return.
pub fn lambda_return_oracle(r: &[f64], v: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let len = r.len();
    let value_at = |k: usize| if k < len { v[k] } else { bootstrap };
    (0..len)
        .map(|t| {
            // Returns for n = 1..=horizon; beyond an episode end they stay fixed.
            let mut end = len;
            for k in t..len {
                if dones[k] {
                    end = k + 1;
                    break;
                }
            }
            let terminal = end < len || dones[len - 1];
            let horizon = end - t;
            let n_step = |n: usize| {
                let mut g = 0.0;
                for k in 0..n {
                    g += gamma.powi(k as i32) * r[t + k];
                }
                if !(terminal && t + n == end) {
                    g += gamma.powi(n as i32) * value_at(t + n);
                }
                g
            };
            let mut blended = 0.0;
            for n in 1..horizon {
                blended += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
            }
            blended += lambda.powi(horizon as i32 - 1) * n_step(horizon);
            blended - v[t]
        })
        .collect()
}

pub fn correlation(x: &[f32], y: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().map(|v| *v as f64).sum::<f64>() / n;
    let my = y.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (*a as f64 - mx, *b as f64 - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx * syy).sqrt()
}
