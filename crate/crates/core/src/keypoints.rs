//! Harris corners with normalized patch descriptors and mutual nearest
//! neighbour matching. Feeds the keypoint branch of skip fusion.

use crate::worldsim::RgbImage;

pub const DEFAULT_MAX_POINTS: usize = 64;
pub const DEFAULT_TOP_K: usize = 16;
pub const NMS_RADIUS: usize = 5;
pub const PATCH: usize = 8;
pub const RATIO: f32 = 0.9;
const HARRIS_K: f32 = 0.04;
/// Responses below this fraction of the strongest corner are dropped.
const RELATIVE_THRESHOLD: f32 = 0.01;
/// Absolute floor so flat images produce nothing.
const ABSOLUTE_THRESHOLD: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

/// Keypoints of one image with their unit-norm descriptors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detections {
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<[f32; PATCH * PATCH]>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub x: f32,
    pub y: f32,
    pub x2: f32,
    pub y2: f32,
    /// Cosine similarity clamped to `[0, 1]`.
    pub score: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub width: usize,
    pub height: usize,
    pub pairs: Vec<Match>,
}

fn gaussian_blur(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    const K: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let norm: f32 = K.iter().sum();
    let at = |v: &[f32], x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        v[y * w + x]
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|k| K[k] * at(src, x as isize + k as isize - 2, y as isize)).sum::<f32>() / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|k| K[k] * at(&tmp, x as isize, y as isize + k as isize - 2)).sum::<f32>() / norm;
        }
    }
    out
}

/// Harris response map over a grayscale image.
pub fn harris_response(gray: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray[y * w + x]
    };
    let (mut xx, mut yy, mut xy) = (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let k = y as usize * w + x as usize;
            xx[k] = gx * gx;
            yy[k] = gy * gy;
            xy[k] = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (gaussian_blur(&xx, w, h), gaussian_blur(&yy, w, h), gaussian_blur(&xy, w, h));
    (0..w * h)
        .map(|k| {
            let tr = sxx[k] + syy[k];
            sxx[k] * syy[k] - sxy[k] * sxy[k] - HARRIS_K * tr * tr
        })
        .collect()
}

fn descriptor(gray: &[f32], w: usize, cx: usize, cy: usize) -> Option<[f32; PATCH * PATCH]> {
    let half = PATCH / 2;
    let mut d = [0.0f32; PATCH * PATCH];
    for py in 0..PATCH {
        for px in 0..PATCH {
            d[py * PATCH + px] = gray[(cy + py - half) * w + cx + px - half];
        }
    }
    let mean = d.iter().sum::<f32>() / d.len() as f32;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

/// Up to `max_points` Harris corners, strongest first, after non-maximum
/// suppression. Points too close to the border for a full patch are skipped.
pub fn detect(image: &RgbImage, max_points: usize) -> Detections {
    let (w, h) = (image.width(), image.height());
    let mut out = Detections {
        width: w,
        height: h,
        ..Default::default()
    };
    let half = PATCH / 2;
    if w < PATCH || h < PATCH {
        return out;
    }
    let gray = image.grayscale();
    let resp = harris_response(&gray, w, h);
    let peak = resp.iter().copied().fold(0.0f32, f32::max);
    let threshold = (peak * RELATIVE_THRESHOLD).max(ABSOLUTE_THRESHOLD);
    let r = NMS_RADIUS as isize;
    let mut candidates = Vec::new();
    for y in half..=h - half {
        for x in half..=w - half {
            let v = resp[y * w + x];
            if v <= threshold {
                continue;
            }
            // Strict maximum, ties resolved toward the earlier raster index.
            let mut is_max = true;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let other = resp[ny as usize * w + nx as usize];
                    let earlier = (ny, nx) < (y as isize, x as isize);
                    if other > v || (other == v && earlier) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                candidates.push((v, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    for (score, x, y) in candidates {
        if out.keypoints.len() == max_points {
            break;
        }
        if let Some(d) = descriptor(&gray, w, x, y) {
            out.keypoints.push(Keypoint {
                x: x as f32,
                y: y as f32,
                score,
            });
            out.descriptors.push(d);
        }
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest neighbour of each row of `from` in `to`, with whether it passes
/// the distance ratio test.
fn nearest(from: &Detections, to: &Detections) -> Vec<Option<(usize, bool)>> {
    from.descriptors
        .iter()
        .map(|d| {
            let mut best: Option<(f32, usize)> = None;
            let mut second = f32::INFINITY;
            for (j, e) in to.descriptors.iter().enumerate() {
                let dist = (2.0 - 2.0 * dot(d, e)).max(0.0).sqrt();
                match best {
                    Some((bd, _)) if dist >= bd => second = second.min(dist),
                    _ => {
                        if let Some((bd, _)) = best {
                            second = second.min(bd);
                        }
                        best = Some((dist, j));
                    }
                }
            }
            best.map(|(bd, j)| (j, bd < RATIO * second))
        })
        .collect()
}

/// Mutual nearest neighbours that pass the ratio test in both directions,
/// sorted by descending similarity.
pub fn match_detections(a: &Detections, b: &Detections) -> MatchSet {
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let mut pairs = Vec::new();
    for (i, nn) in ab.iter().enumerate() {
        let Some((j, ok)) = *nn else { continue };
        if ok && ba[j] == Some((i, true)) {
            let (p, q) = (a.keypoints[i], b.keypoints[j]);
            pairs.push(Match {
                x: p.x,
                y: p.y,
                x2: q.x,
                y2: q.y,
                score: dot(&a.descriptors[i], &b.descriptors[j]).clamp(0.0, 1.0),
            });
        }
    }
    pairs.sort_by(|p, q| q.score.total_cmp(&p.score).then(p.y.total_cmp(&q.y)).then(p.x.total_cmp(&q.x)));
    MatchSet {
        width: a.width,
        height: a.height,
        pairs,
    }
}

/// `(x, y, x', y')` of the top `k` pairs normalized by image size, padded
/// with −1 to length `4k`.
pub fn topk_flatten(m: &MatchSet, k: usize) -> Vec<f32> {
    let mut out = vec![-1.0; 4 * k];
    let (w, h) = (m.width.max(1) as f32, m.height.max(1) as f32);
    for (slot, p) in out.chunks_exact_mut(4).zip(&m.pairs) {
        slot.copy_from_slice(&[p.x / w, p.y / h, p.x2 / w, p.y2 / h]);
    }
    out
}

/// Full keypoint branch: detect in both images, match goal to observation,
/// flatten.
pub fn keypoint_vector(goal: &RgbImage, obs: &RgbImage, k: usize) -> Vec<f32> {
    let (g, o) = (detect(goal, DEFAULT_MAX_POINTS), detect(obs, DEFAULT_MAX_POINTS));
    topk_flatten(&match_detections(&g, &o), k)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn square(size: usize, x0: usize, y0: usize, side: usize) -> RgbImage {
        let mut img = RgbImage::new(size);
        for y in 0..size {
            for x in 0..size {
                let inside = (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y);
                let v = if inside { 0.9 } else { 0.1 };
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let mut img = RgbImage::new(32);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, [0.5, 0.5, 0.5]);
            }
        }
        assert!(detect(&img, 64).is_empty());
    }

    #[test]
    fn square_yields_its_four_corners() {
        let det = detect(&square(64, 20, 24, 20), 64);
        assert_eq!(det.len(), 4, "{:?}", det.keypoints);
        let corners = [(20.0, 24.0), (39.0, 24.0), (20.0, 43.0), (39.0, 43.0)];
        for (cx, cy) in corners {
            let near = det.keypoints.iter().any(|k| (k.x - cx).abs() <= 2.0 && (k.y - cy).abs() <= 2.0);
            assert!(near, "no keypoint near ({cx}, {cy}): {:?}", det.keypoints);
        }
        for d in &det.descriptors {
            let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_and_normalization() {
        let empty = MatchSet {
            width: 64,
            height: 64,
            pairs: vec![],
        };
        assert_eq!(topk_flatten(&empty, 8), vec![-1.0; 32]);
        let one = MatchSet {
            width: 64,
            height: 64,
            pairs: vec![Match {
                x: 32.0,
                y: 32.0,
                x2: 32.0,
                y2: 32.0,
                score: 1.0,
            }],
        };
        assert_eq!(topk_flatten(&one, 1), vec![0.5; 4]);
        let v = topk_flatten(&one, 3);
        assert_eq!(&v[4..], &[-1.0; 8]);
    }
}
