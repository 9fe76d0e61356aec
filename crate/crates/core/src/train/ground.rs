//! RANSAC ground-plane estimation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::PointCloud;

/// `a·x + b·y + c·z + d = 0` with unit normal and `c > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub d: f64,
}

impl GroundPlane {
    /// Oriented so the normal points up; fails for a vertical plane.
    pub fn new(normal: [f64; 3], d: f64) -> Result<Self> {
        let n = Vector3::from(normal);
        let len = n.norm();
        if !(len > 1e-12) || normal[2].abs() < 1e-12 {
            return Err(Error::Singular(format!("plane normal {normal:?} is degenerate or vertical")));
        }
        let s = normal[2].signum() / len;
        Ok(GroundPlane {
            normal: [normal[0] * s, normal[1] * s, normal[2] * s],
            d: d * s,
        })
    }

    pub fn flat(z: f64) -> Self {
        GroundPlane { normal: [0.0, 0.0, 1.0], d: -z }
    }

    /// Signed height of `p` above the plane.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.d
    }

    /// Plane height at `(x, y)`.
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        -(self.normal[0] * x + self.normal[1] * y + self.d) / self.normal[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_tol: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 100,
            inlier_tol: 0.1,
            seed: 0,
        }
    }
}

fn plane_through(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<(Vector3<f64>, f64)> {
    let (a, b, c) = (Vector3::from(a), Vector3::from(b), Vector3::from(c));
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    let scale = (b - a).norm() * (c - a).norm();
    if len <= 1e-9 * scale.max(1e-300) {
        return None;
    }
    let n = n / len;
    Some((n, -n.dot(&a)))
}

/// Least-squares plane of `pts`: normal is the smallest-eigenvalue direction
/// of their scatter matrix.
fn refit(pts: &[[f64; 3]]) -> (Vector3<f64>, f64) {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let mut s = Matrix3::zeros();
    for p in pts {
        let d = Vector3::from(*p) - c;
        s += d * d.transpose();
    }
    let eig = SymmetricEigen::new(s);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    (normal, -normal.dot(&c))
}

/// Seeded RANSAC over 3-point samples, then a least-squares refit on the
/// inliers of the best sample.
pub fn fit_ground_plane(cloud: &PointCloud, cfg: &RansacConfig) -> Result<GroundPlane> {
    let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.xyz()).collect();
    if pts.len() < 3 {
        return Err(Error::Invalid(format!("plane fit needs at least 3 points, got {}", pts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    let count = |n: &Vector3<f64>, d: f64| pts.iter().filter(|p| (n.dot(&Vector3::from(**p)) + d).abs() <= cfg.inlier_tol).count();
    for _ in 0..cfg.iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, pts.len(), 3);
        let Some((n, d)) = plane_through(pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]) else {
            continue;
        };
        let c = count(&n, d);
        if best.as_ref().is_none_or(|b| c > b.0) {
            best = Some((c, n, d));
        }
    }
    if best.is_none() {
        // Random triples may all have been collinear; try every triple in order.
        'outer: for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                for k in j + 1..pts.len() {
                    if let Some((n, d)) = plane_through(pts[i], pts[j], pts[k]) {
                        best = Some((count(&n, d), n, d));
                        break 'outer;
                    }
                }
            }
        }
    }
    let (_, n, d) = best.ok_or_else(|| Error::Singular("no three non-collinear points".into()))?;
    let inliers: Vec<[f64; 3]> = pts.iter().copied().filter(|p| (n.dot(&Vector3::from(*p)) + d).abs() <= cfg.inlier_tol).collect();
    let (n, d) = if inliers.len() >= 3 { refit(&inliers) } else { (n, d) };
    GroundPlane::new([n[0], n[1], n[2]], d)
}
