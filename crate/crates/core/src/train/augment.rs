//! Ground-truth sampling, per-box jitter and global rotation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ground::GroundPlane;
use crate::box_geom::{bev_intersection, wrap_angle, Box3D};
use crate::error::{Error, Result};
use crate::kitti_io::{read_point_cloud, write_point_cloud, Point, PointCloud};

/// A point cloud with its ground-truth boxes (LiDAR frame).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
}

/// One stored object: its box and the points cropped from inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSample {
    pub bbox: Box3D,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    pub samples: Vec<GtSample>,
}

impl GtDatabase {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut samples = Vec::new();
        for s in scenes {
            for b in &s.boxes {
                let points = s.cloud.points.iter().filter(|p| b.contains(p.xyz())).copied().collect();
                samples.push(GtSample { bbox: *b, points });
            }
        }
        GtDatabase { samples }
    }

    /// `NNNNNN.bin` point file plus `NNNNNN.txt` box line per sample.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            write_point_cloud(dir.join(format!("{i:06}.bin")), &PointCloud::new(s.points.clone()))?;
            let b = s.bbox;
            let line = format!("{} {} {} {} {} {} {}\n", b.x, b.y, b.z, b.w, b.l, b.h, b.yaw);
            let p = dir.join(format!("{i:06}.txt"));
            fs::write(&p, line).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        names.sort();
        let mut samples = Vec::new();
        for txt in names {
            let text = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { path: txt.display().to_string(), line: 1, msg: e.to_string() })?;
            if vals.len() != 7 {
                return Err(Error::Parse { path: txt.display().to_string(), line: 1, msg: format!("expected 7 box values, got {}", vals.len()) });
            }
            let cloud = read_point_cloud(txt.with_extension("bin"))?;
            samples.push(GtSample {
                bbox: Box3D::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]),
                points: cloud.points,
            });
        }
        Ok(GtDatabase { samples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Database samples drawn per scene (each may be rejected).
    pub samples: usize,
    /// Variance of the per-axis Gaussian box translation.
    pub noise_var: f64,
    /// Per-box yaw jitter drawn from `U[−v, v]`; 0 disables.
    pub box_yaw_noise: f64,
    /// Global rotation drawn from `U[−v, v]`; 0 disables.
    pub global_rotation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            samples: 5,
            noise_var: 0.25,
            box_yaw_noise: std::f64::consts::PI / 20.0,
            global_rotation: std::f64::consts::FRAC_PI_2,
        }
    }
}

fn rotate_z(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn collides(b: &Box3D, others: &[Box3D]) -> bool {
    others.iter().any(|o| bev_intersection(b, o) > 0.0)
}

/// Rigidly move `b` and the points inside it by a yaw `rot` about its center
/// followed by `shift`.
fn move_box(b: &Box3D, rot: f64, shift: [f64; 3], points: &mut [Point], members: &[usize]) -> Box3D {
    for &i in members {
        let p = &mut points[i];
        let [dx, dy] = rotate_z([p.x - b.x, p.y - b.y], rot);
        p.x = b.x + dx + shift[0];
        p.y = b.y + dy + shift[1];
        p.z += shift[2];
    }
    Box3D {
        x: b.x + shift[0],
        y: b.y + shift[1],
        z: b.z + shift[2],
        yaw: wrap_angle(b.yaw + rot),
        ..*b
    }
}

/// Paste database samples onto the ground plane, jitter every box, then
/// rotate the whole scene about the z axis.
pub fn augment_scene(scene: &Scene, db: &GtDatabase, plane: &GroundPlane, cfg: &AugmentConfig, rng: &mut impl Rng) -> Scene {
    let mut points = scene.cloud.points.clone();
    let mut boxes = scene.boxes.clone();

    if !db.samples.is_empty() {
        for _ in 0..cfg.samples {
            let s = &db.samples[rng.random_range(0..db.samples.len())];
            let mut b = s.bbox;
            let dz = plane.z_at(b.x, b.y) + 0.5 * b.h - b.z;
            b.z += dz;
            if collides(&b, &boxes) {
                continue;
            }
            points.extend(s.points.iter().map(|p| Point { z: p.z + dz, ..*p }));
            boxes.push(b);
        }
    }

    let std = cfg.noise_var.max(0.0).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for k in 0..boxes.len() {
        let shift = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let rot = if cfg.box_yaw_noise > 0.0 { rng.random_range(-cfg.box_yaw_noise..=cfg.box_yaw_noise) } else { 0.0 };
        if shift == [0.0; 3] && rot == 0.0 {
            continue;
        }
        let b = boxes[k];
        let members: Vec<usize> = (0..points.len()).filter(|&i| b.contains(points[i].xyz())).collect();
        let mut trial = points.clone();
        let moved = move_box(&b, rot, shift, &mut trial, &members);
        let others: Vec<Box3D> = boxes.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, o)| *o).collect();
        // A jitter that would make boxes overlap is dropped for that box.
        if collides(&moved, &others) {
            continue;
        }
        points = trial;
        boxes[k] = moved;
    }

    let angle = if cfg.global_rotation > 0.0 { rng.random_range(-cfg.global_rotation..=cfg.global_rotation) } else { 0.0 };
    let mut out = Scene {
        cloud: PointCloud::new(points),
        boxes,
    };
    if angle != 0.0 {
        rotate_scene(&mut out, angle);
    }
    out
}

/// Rotate points and boxes about the z axis through the origin.
pub fn rotate_scene(scene: &mut Scene, angle: f64) {
    for p in &mut scene.cloud.points {
        [p.x, p.y] = rotate_z([p.x, p.y], angle);
    }
    for b in &mut scene.boxes {
        [b.x, b.y] = rotate_z([b.x, b.y], angle);
        b.yaw = wrap_angle(b.yaw + angle);
    }
}
