use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Projection of a `C×H×W` activation map onto its first principal
/// component, min-max scaled to `[0, 1]`. The sign is chosen so the map
/// correlates positively with per-location activation magnitude. A map with
/// no variance gives all zeros.
pub fn eigencam(z: &[f32], c: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    let n = h * w;
    if z.len() != c * n || c == 0 || n == 0 {
        return Err(Error::config(format!("activation of length {} is not {c}×{h}×{w}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigencam input contains non-finite values".into()));
    }
    // Rows are locations, columns channels.
    let x = DMatrix::<f64>::from_fn(n, c, |loc, ch| z[ch * n + loc] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let (top, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let scale = x.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    if lambda <= 1e-12 * scale {
        return Ok(vec![0.0; n]);
    }
    let v = eig.eigenvectors.column(top);
    let mut proj: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect();
    let norms: Vec<f64> = (0..n).map(|i| x.row(i).norm()).collect();
    let nm = norms.iter().sum::<f64>() / n as f64;
    let pm = proj.iter().sum::<f64>() / n as f64;
    let cov_sign: f64 = proj.iter().zip(&norms).map(|(p, q)| (p - pm) * (q - nm)).sum();
    if cov_sign < 0.0 {
        proj.iter_mut().for_each(|p| *p = -*p);
    }
    let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
    if hi - lo <= 1e-12 * (hi.abs() + lo.abs()).max(1e-300) {
        return Ok(vec![0.0; n]);
    }
    Ok(proj.iter().map(|p| ((p - lo) / (hi - lo)) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_zero() {
        assert_eq!(eigencam(&[2.5; 3 * 4 * 4], 3, 4, 4).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn values_in_unit_range() {
        let z: Vec<f32> = (0..5 * 6 * 6).map(|i| ((i * 37 % 11) as f32).sin()).collect();
        let m = eigencam(&z, 5, 6, 6).unwrap();
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.contains(&0.0) && m.contains(&1.0));
    }
}
