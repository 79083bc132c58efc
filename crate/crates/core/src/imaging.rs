//! PNG export, heatmap overlays, and top-down trajectory maps.

use std::path::Path;

use image::{Rgb, RgbImage as Canvas};

use crate::error::{Error, Result};
use crate::keypoints::MatchSet;
use crate::worldsim::{OccupancyGrid, Pose, RgbImage};

pub fn to_canvas(img: &RgbImage) -> Canvas {
    let mut c = Canvas::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.get(x, y);
            c.put_pixel(x as u32, y as u32, Rgb([quantize(r), quantize(g), quantize(b)]));
        }
    }
    c
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(canvas: &Canvas, path: &Path) -> Result<()> {
    save_png_with_text(canvas, path, &[])
}

/// Writes an 8-bit RGB PNG carrying `text` as `tEXt` chunks.
pub fn save_png_with_text(canvas: &Canvas, path: &Path, text: &[(&str, &str)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
    }
    let png_err = |e: png::EncodingError| Error::io(format!("encode {}", path.display()), std::io::Error::other(e));
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), canvas.width(), canvas.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
    }
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(canvas.as_raw()).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Places canvases left to right on a black strip.
pub fn tile_horizontal(frames: &[Canvas]) -> Canvas {
    let w: u32 = frames.iter().map(|f| f.width()).sum();
    let h = frames.iter().map(|f| f.height()).max().unwrap_or(0);
    let mut out = Canvas::new(w, h);
    let mut x0 = 0;
    for f in frames {
        image::imageops::replace(&mut out, f, x0 as i64, 0);
        x0 += f.width();
    }
    out
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Bilinear upsampling of an `h×w` map to `size×size`.
pub fn resize_map(map: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = ((y as f32 + 0.5) * h as f32 / size as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..size {
            let fx = ((x as f32 + 0.5) * w as f32 / size as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(w - 1);
            let top = map[y0 * w + x0] * (1.0 - tx) + map[y0 * w + x1] * tx;
            let bot = map[y1 * w + x0] * (1.0 - tx) + map[y1 * w + x1] * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Blends a `[0, 1]` heatmap (any resolution) over an image.
pub fn overlay(img: &RgbImage, heat: &[f32], h: usize, w: usize, alpha: f32) -> Canvas {
    let size = img.width();
    let up = resize_map(heat, h, w, size);
    let mut c = Canvas::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let base = img.get(x, y);
            let hc = jet(up[y * size + x]);
            let px = [0, 1, 2].map(|k| quantize((1.0 - alpha) * base[k] + alpha * hc[k]));
            c.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    c
}

pub const START_COLOR: Rgb<u8> = Rgb([40, 200, 60]);
pub const GOAL_COLOR: Rgb<u8> = Rgb([220, 40, 40]);
pub const PATH_COLOR: Rgb<u8> = Rgb([40, 90, 230]);

/// Top-down map: walls dark, free space light, agent path as a polyline,
/// start and goal as filled squares.
pub fn trajectory_map(grid: &OccupancyGrid, path: &[Pose], goal: &Pose, scale: u32) -> Canvas {
    let (w, h) = (grid.width() as u32 * scale, grid.height() as u32 * scale);
    let mut c = Canvas::from_pixel(w, h, Rgb([235, 235, 230]));
    for j in 0..grid.height() {
        for i in 0..grid.width() {
            if !grid.is_free(i, j) {
                for dy in 0..scale {
                    for dx in 0..scale {
                        c.put_pixel(i as u32 * scale + dx, j as u32 * scale + dy, Rgb([60, 60, 60]));
                    }
                }
            }
        }
    }
    let to_px = |p: &Pose| {
        let k = scale as f64 / grid.cell_size();
        (p.x * k, p.y * k)
    };
    for seg in path.windows(2) {
        let (a, b) = (to_px(&seg[0]), to_px(&seg[1]));
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for t in 0..=n {
            let f = t as f64 / n as f64;
            let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                c.put_pixel(x as u32, y as u32, PATH_COLOR);
            }
        }
    }
    let mut mark = |p: &Pose, color: Rgb<u8>| {
        let (x, y) = to_px(p);
        let r = (scale as i64).max(2);
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    c.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    };
    if let Some(start) = path.first() {
        mark(start, START_COLOR);
    }
    mark(goal, GOAL_COLOR);
    c
}

pub const MATCH_COLOR: Rgb<u8> = Rgb([255, 210, 0]);

/// Two views side by side with a line per match (pixel coordinates of
/// each view), scaled up by `scale`.
pub fn match_visualization(a: &RgbImage, b: &RgbImage, matches: &MatchSet, scale: u32) -> Canvas {
    let up = |img: &RgbImage| {
        let c = to_canvas(img);
        image::imageops::resize(&c, c.width() * scale, c.height() * scale, image::imageops::FilterType::Nearest)
    };
    let mut c = tile_horizontal(&[up(a), up(b)]);
    let k = scale as f32;
    let offset = a.width() as f32 * k;
    let centre = k / 2.0;
    for m in &matches.pairs {
        let (x0, y0) = (m.x * k + centre, m.y * k + centre);
        let (x1, y1) = (offset + m.x2 * k + centre, m.y2 * k + centre);
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for t in 0..=n {
            let f = t as f32 / n as f32;
            let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            if x >= 0.0 && y >= 0.0 && (x as u32) < c.width() && (y as u32) < c.height() {
                c.put_pixel(x as u32, y as u32, MATCH_COLOR);
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constant_maps() {
        let up = resize_map(&[0.3; 4], 2, 2, 8);
        assert!(up.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }
}
