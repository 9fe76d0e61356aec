//! Oriented boxes, anchors, the residual codec, rotated IoU and oriented NMS.
//!
//! Boxes live in the LiDAR frame: `x` forward, `y` left, `z` up. The yaw is
//! measured counterclockwise about `+z` from `+x`, and the box length `l` runs
//! along the heading while the width `w` is lateral.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Oriented 3D box with a volumetric center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, yaw: f64) -> Self {
        Box3D {
            x,
            y,
            z,
            w,
            l,
            h,
            yaw,
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Box3D::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn bev_area(&self) -> f64 {
        self.w.max(0.0) * self.l.max(0.0)
    }

    pub fn volume(&self) -> f64 {
        self.bev_area() * self.h.max(0.0)
    }

    pub fn z_min(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// BEV corners in counterclockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + u * c - v * s, self.y + u * s + v * c])
    }

    /// Whether a BEV point lies inside the rotated rectangle (boundary inclusive).
    pub fn contains_bev(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= 0.5 * self.l && v.abs() <= 0.5 * self.w
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_bev(p[0], p[1]) && p[2] >= self.z_min() && p[2] <= self.z_max()
    }

    /// Radius of the BEV circumscribed circle.
    pub fn bev_radius(&self) -> f64 {
        0.5 * (self.w * self.w + self.l * self.l).sqrt()
    }
}

/// A scored box produced by the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    pub direction: bool,
}

impl Detection {
    pub fn new(bbox: Box3D, score: f64) -> Self {
        Detection {
            bbox,
            score,
            direction: direction_bit(bbox.yaw),
        }
    }
}

/// Direction bin of a yaw: set iff the wrapped angle is non-negative.
pub fn direction_bit(yaw: f64) -> bool {
    wrap_angle(yaw) >= 0.0
}

/// Residual encoding of `gt` against `anchor`.
pub fn encode(gt: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    [
        (gt.x - anchor.x) / diag,
        (gt.y - anchor.y) / diag,
        (gt.z - anchor.z) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        gt.yaw - anchor.yaw,
    ]
}

/// Inverse of [`encode`]. The direction bit picks between the two headings
/// that share the regressed axis.
pub fn decode(res: &[f64; 7], anchor: &Box3D, direction: bool) -> Box3D {
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    let mut yaw = wrap_angle(anchor.yaw + res[6]);
    if direction_bit(yaw) != direction {
        yaw = wrap_angle(yaw + PI);
    }
    Box3D {
        x: res[0] * diag + anchor.x,
        y: res[1] * diag + anchor.y,
        z: res[2] * anchor.h + anchor.z,
        w: res[3].exp() * anchor.w,
        l: res[4].exp() * anchor.l,
        h: res[5].exp() * anchor.h,
        yaw,
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            let p_in = dp >= 0.0;
            let q_in = dq >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Exact area of the intersection of the two BEV rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    if a.bev_area() <= 0.0 || b.bev_area() <= 0.0 {
        return 0.0;
    }
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let r = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy > r * r {
        return 0.0;
    }
    let inter = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&inter).max(0.0)
}

/// Rotated-rectangle IoU in the BEV plane.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: BEV intersection times z overlap over the volume union.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy oriented NMS. Returns indices of the kept detections in descending
/// score order; equal scores keep input order.
pub fn oriented_nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = keep
            .iter()
            .any(|&k| bev_iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn oriented_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    oriented_nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Anchor dimensions and placement shared by every BEV cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSpec {
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub z: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            w: 1.6,
            l: 3.9,
            h: 1.56,
            z: -1.0,
        }
    }
}

/// Two anchors (yaw 0 and π/2) per BEV cell.
///
/// Flat anchor index is `(a * ny + iy) * nx + ix`, the same layout as a
/// `(2, ny, nx)` channel-major class map.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub spec: AnchorSpec,
}

pub const ANCHOR_YAWS: [f64; 2] = [0.0, std::f64::consts::FRAC_PI_2];

impl AnchorGrid {
    pub fn new(nx: usize, ny: usize, x_min: f64, y_min: f64, cell: f64, spec: AnchorSpec) -> Self {
        AnchorGrid {
            nx,
            ny,
            x_min,
            y_min,
            cell,
            spec,
        }
    }

    pub fn len(&self) -> usize {
        2 * self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, a: usize, iy: usize, ix: usize) -> usize {
        (a * self.ny + iy) * self.nx + ix
    }

    /// (anchor slot, iy, ix) of a flat index.
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let ix = idx % self.nx;
        let iy = (idx / self.nx) % self.ny;
        let a = idx / (self.nx * self.ny);
        (a, iy, ix)
    }

    pub fn anchor(&self, idx: usize) -> Box3D {
        let (a, iy, ix) = self.unravel(idx);
        Box3D {
            x: self.x_min + (ix as f64 + 0.5) * self.cell,
            y: self.y_min + (iy as f64 + 0.5) * self.cell,
            z: self.spec.z,
            w: self.spec.w,
            l: self.spec.l,
            h: self.spec.h,
            yaw: ANCHOR_YAWS[a],
        }
    }

    pub fn anchors(&self) -> Vec<Box3D> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }
}
