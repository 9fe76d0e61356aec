//! Procedural scenes of box-shaped vehicles on flat ground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::Scene;
use crate::box_geom::{bev_intersection, Box3D};
use crate::kitti_io::{Point, PointCloud};
use crate::voxel_grid::VoxelizerConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub ground_z: f64,
    pub max_cars: usize,
    pub ground_points: usize,
    pub roof_points: usize,
    pub side_points: usize,
    /// yaw jitter around the two axis directions
    pub yaw_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            ground_z: -1.7,
            max_cars: 3,
            ground_points: 1500,
            roof_points: 300,
            side_points: 120,
            yaw_jitter: 0.2,
        }
    }
}

fn local_to_world(b: &Box3D, u: f64, v: f64) -> (f64, f64) {
    let (s, c) = b.yaw.sin_cos();
    (b.x + u * c - v * s, b.y + u * s + v * c)
}

/// Points on the roof and on the side faces visible from the origin.
fn car_surface(b: &Box3D, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut pts = Vec::new();
    let top = b.z_max();
    for _ in 0..cfg.roof_points {
        let (x, y) = local_to_world(b, rng.random_range(-0.5..0.5) * b.l, rng.random_range(-0.5..0.5) * b.w);
        pts.push(Point::new(x, y, top - 0.01, rng.random_range(0.3..0.9)));
    }
    // faces as (local normal u, v) with half extents
    let faces = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
    for (nu, nv) in faces {
        let (cx, cy) = local_to_world(b, nu * 0.5 * b.l, nv * 0.5 * b.w);
        let (s, c) = b.yaw.sin_cos();
        let (wx, wy) = (nu * c - nv * s, nu * s + nv * c);
        if wx * cx + wy * cy >= 0.0 {
            continue;
        }
        for _ in 0..cfg.side_points {
            let t = rng.random_range(-0.5..0.5);
            let (u, v) = if nu != 0.0 { (nu * 0.5 * b.l * 0.98, t * b.w) } else { (t * b.l, nv * 0.5 * b.w * 0.98) };
            let (x, y) = local_to_world(b, u, v);
            pts.push(Point::new(x, y, b.z_min() + rng.random_range(0.2..0.98) * b.h, rng.random_range(0.3..0.9)));
        }
    }
    pts
}

/// One scene with 1..=`max_cars` non-overlapping cars inside the voxel range.
pub fn synthetic_scene(range: &VoxelizerConfig, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Scene {
    let [x0, y0, _] = range.range_min;
    let [x1, y1, _] = range.range_max;
    let n_cars = rng.random_range(1..=cfg.max_cars.max(1));
    let mut boxes: Vec<Box3D> = Vec::new();
    for _ in 0..50 {
        if boxes.len() == n_cars {
            break;
        }
        let w = rng.random_range(1.5..1.75);
        let l: f64 = rng.random_range(3.6..4.2);
        let h = rng.random_range(1.45..1.65);
        let axis = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 };
        let yaw = axis + rng.random_range(-cfg.yaw_jitter..=cfg.yaw_jitter);
        let margin = 0.5 * l.hypot(w) + 0.1;
        if x1 - x0 <= 2.0 * margin || y1 - y0 <= 2.0 * margin {
            break;
        }
        let x = rng.random_range(x0 + margin..x1 - margin);
        let y = rng.random_range(y0 + margin..y1 - margin);
        let b = Box3D::new(x, y, cfg.ground_z + 0.5 * h, w, l, h, yaw);
        let padded = Box3D { w: w + 0.6, l: l + 0.6, ..b };
        if boxes.iter().all(|o| bev_intersection(&padded, o) == 0.0) {
            boxes.push(b);
        }
    }
    let mut points = Vec::new();
    for b in &boxes {
        points.extend(car_surface(b, cfg, rng));
    }
    for _ in 0..cfg.ground_points {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        if boxes.iter().any(|b| b.contains_bev(x, y)) {
            continue;
        }
        points.push(Point::new(x, y, cfg.ground_z + rng.random_range(-0.03..0.03), rng.random_range(0.05..0.3)));
    }
    Scene {
        cloud: PointCloud::new(points),
        boxes,
    }
}

/// `n` scenes; scene `i` draws from stream `i` of `seed`.
pub fn synthetic_dataset(range: &VoxelizerConfig, cfg: &SyntheticConfig, n: usize, seed: u64) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synthetic_scene(range, cfg, &mut rng)
        })
        .collect()
}
