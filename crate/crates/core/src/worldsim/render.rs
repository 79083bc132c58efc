use super::{pose_is_valid, OccupancyGrid, Pose};
use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_HFOV_DEG: f64 = 90.0;

const WALL_HEIGHT_M: f64 = 2.0;
const CAMERA_HEIGHT_M: f64 = 1.0;
const TILE_M: f64 = 1.0;

const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.25, 0.22],
    [0.22, 0.55, 0.85],
    [0.30, 0.75, 0.35],
    [0.92, 0.75, 0.20],
    [0.60, 0.35, 0.75],
    [0.95, 0.55, 0.25],
    [0.25, 0.75, 0.75],
    [0.85, 0.40, 0.65],
    [0.55, 0.55, 0.25],
    [0.45, 0.30, 0.20],
    [0.70, 0.70, 0.80],
    [0.20, 0.30, 0.55],
];

/// Square RGB image, planar channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    size: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn from_planar(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::config(format!("{size}x{size} RGB needs {} values", 3 * size * size)));
        }
        Ok(Self { size, data })
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    /// `3×H×W` planar values.
    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let p = self.size * self.size;
        let k = y * self.size + x;
        [self.data[k], self.data[p + k], self.data[2 * p + k]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let p = self.size * self.size;
        let k = y * self.size + x;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * p + k] = v.clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luma per pixel, row-major.
    pub fn grayscale(&self) -> Vec<f32> {
        let p = self.size * self.size;
        (0..p)
            .map(|k| 0.299 * self.data[k] + 0.587 * self.data[p + k] + 0.114 * self.data[2 * p + k])
            .collect()
    }
}

/// Camera intrinsics shared by observations and goal images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub hfov_deg: f64,
    pub resolution: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            hfov_deg: DEFAULT_HFOV_DEG,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

struct Hit {
    distance: f64,
    /// Position along the wall face, in meters.
    along: f64,
    color: u8,
    y_side: bool,
}

/// Walks the ray through the grid (DDA) until it enters an occupied cell.
/// `dir` need not be unit length; the returned distance is measured along
/// the camera axis.
fn cast(grid: &OccupancyGrid, ox: f64, oy: f64, dir: (f64, f64)) -> Hit {
    let cs = grid.cell_size();
    let (px, py) = (ox / cs, oy / cs);
    let (mut i, mut j) = (px.floor() as isize, py.floor() as isize);
    let delta_x = if dir.0 == 0.0 { f64::INFINITY } else { (1.0 / dir.0).abs() };
    let delta_y = if dir.1 == 0.0 { f64::INFINITY } else { (1.0 / dir.1).abs() };
    let (step_i, mut side_x) = if dir.0 < 0.0 {
        (-1, (px - i as f64) * delta_x)
    } else {
        (1, (i as f64 + 1.0 - px) * delta_x)
    };
    let (step_j, mut side_y) = if dir.1 < 0.0 {
        (-1, (py - j as f64) * delta_y)
    } else {
        (1, (j as f64 + 1.0 - py) * delta_y)
    };
    let limit = 4 * (grid.width() + grid.height());
    let mut y_side = false;
    for _ in 0..limit {
        if side_x < side_y {
            side_x += delta_x;
            i += step_i;
            y_side = false;
        } else {
            side_y += delta_y;
            j += step_j;
            y_side = true;
        }
        if grid.is_occupied(i, j) {
            break;
        }
    }
    let perp = if y_side { side_y - delta_y } else { side_x - delta_x };
    let along = if y_side { px + perp * dir.0 } else { py + perp * dir.1 } * cs;
    let color = if i >= 0 && j >= 0 && (i as usize) < grid.width() && (j as usize) < grid.height() {
        grid.color_id(i as usize, j as usize)
    } else {
        0
    };
    Hit {
        distance: (perp * cs).max(1e-6),
        along,
        color,
        y_side,
    }
}

fn shade(distance: f64) -> f32 {
    (1.0 / (1.0 + 0.35 * distance)) as f32
}

/// Column-wise raycast rendering of the agent's egocentric view.
pub fn render(grid: &OccupancyGrid, pose: &Pose, camera: &Camera) -> Result<RgbImage> {
    if !(camera.hfov_deg > 30.0 && camera.hfov_deg < 150.0) {
        return Err(Error::config(format!("hfov {}° outside (30°, 150°)", camera.hfov_deg)));
    }
    if camera.resolution < 8 {
        return Err(Error::config("resolution must be at least 8 pixels"));
    }
    if !pose_is_valid(grid, pose) {
        return Err(Error::usage(format!("pose ({:.3}, {:.3}) is not in free space", pose.x, pose.y)));
    }
    let res = camera.resolution;
    let half = res as f64 / 2.0;
    let tan_half = (camera.hfov_deg.to_radians() / 2.0).tan();
    let focal = half / tan_half;
    let th = pose.theta();
    let dir = (th.cos(), th.sin());
    let right = (th.sin(), -th.cos());
    let mut img = RgbImage::new(res);

    for col in 0..res {
        let cam_x = (2.0 * (col as f64 + 0.5) / res as f64 - 1.0) * tan_half;
        let ray = (dir.0 + right.0 * cam_x, dir.1 + right.1 * cam_x);
        let hit = cast(grid, pose.x, pose.y, ray);
        let top = half - focal * (WALL_HEIGHT_M - CAMERA_HEIGHT_M) / hit.distance;
        let bottom = half + focal * CAMERA_HEIGHT_M / hit.distance;
        let base = PALETTE[hit.color as usize % PALETTE.len()];
        let freq = 2.0 + (hit.color % 4) as f64;
        let stripe = if (hit.along * freq).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.62 };
        let side = if hit.y_side { 0.8 } else { 1.0 };
        let wall_k = shade(hit.distance) * stripe * side;
        let wall = [base[0] * wall_k, base[1] * wall_k, base[2] * wall_k];

        for row in 0..res {
            let yc = row as f64 + 0.5;
            let rgb = if yc >= top && yc < bottom {
                wall
            } else if yc >= bottom {
                // Floor: project the pixel back onto the ground plane.
                let d = focal * CAMERA_HEIGHT_M / (yc - half);
                let (wx, wy) = (pose.x + ray.0 * d, pose.y + ray.1 * d);
                let tile = ((wx / TILE_M).floor() as i64 + (wy / TILE_M).floor() as i64).rem_euclid(2);
                let k = shade(d) * if tile == 0 { 0.55 } else { 0.38 };
                [0.9 * k, 0.8 * k, 0.65 * k]
            } else {
                let d = focal * (WALL_HEIGHT_M - CAMERA_HEIGHT_M) / (half - yc);
                let k = 0.35 + 0.5 * shade(d);
                [0.92 * k, 0.92 * k, 0.95 * k]
            };
            img.set(col, row, rgb);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::generate_world;

    fn corridor() -> OccupancyGrid {
        // 5 rows tall, 40 cells long, walls at both ends.
        let (w, h) = (40, 5);
        let mut cells = vec![false; w * h];
        for j in 0..h {
            for i in 0..w {
                cells[j * w + i] = i == 0 || j == 0 || i == w - 1 || j == h - 1;
            }
        }
        OccupancyGrid::from_cells(w, h, 0.25, cells).unwrap()
    }

    fn center_brightness(img: &RgbImage) -> f32 {
        let m = img.width() / 2;
        img.get(m, m).iter().sum()
    }

    #[test]
    fn near_walls_render_brighter_than_far_walls() {
        let g = corridor();
        // End wall face at x = 9.75; facing +x.
        let near = render(&g, &Pose::new(9.45, 0.625, 0.0), &Camera::default()).unwrap();
        let far = render(&g, &Pose::new(6.75, 0.625, 0.0), &Camera::default()).unwrap();
        assert!(center_brightness(&near) > center_brightness(&far));
        // The near wall fills the center column top to bottom.
        let m = near.width() / 2;
        let wall = near.get(m, m);
        assert_eq!(near.get(m, 2), wall);
        assert_eq!(near.get(m, near.height() - 3), wall);
    }

    #[test]
    fn rendering_is_deterministic_and_periodic_in_heading() {
        let g = generate_world(11, 10.0).unwrap();
        let (i, j) = g.free_cells().nth(30).unwrap();
        let (x, y) = g.cell_center(i, j);
        let cam = Camera::default();
        let a = render(&g, &Pose::new(x, y, 0.4), &cam).unwrap();
        assert_eq!(a, render(&g, &Pose::new(x, y, 0.4), &cam).unwrap());
        assert_eq!(a, render(&g, &Pose::new(x, y, 0.4 + std::f64::consts::TAU), &cam).unwrap());
        assert!(a.planar().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn occupied_pose_and_bad_fov_are_rejected() {
        let g = corridor();
        assert!(matches!(
            render(&g, &Pose::new(0.1, 0.1, 0.0), &Camera::default()),
            Err(Error::Usage(_))
        ));
        let cam = Camera {
            hfov_deg: 170.0,
            resolution: 64,
        };
        assert!(render(&g, &Pose::new(1.0, 0.6, 0.0), &cam).is_err());
    }
}
