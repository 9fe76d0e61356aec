//! KITTI file formats and the camera/LiDAR box-frame conversion.
//!
//! Point clouds are raw little-endian `f32 × 4` records with no header.
//! Labels, calibrations and results are whitespace-separated text.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::box_geom::{wrap_angle, Box3D, Detection};
use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Truncated {
            len: bytes.len(),
            record: RECORD_BYTES,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut v = [0f32; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let b = &rec[4 * k..4 * k + 4];
            *slot = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        if v.iter().any(|f| !f.is_finite()) {
            return Err(Error::Invalid(format!(
                "point record {i} has non-finite values {v:?}"
            )));
        }
        points.push(Point::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64));
    }
    Ok(PointCloud { points })
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes)
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_point_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// One line of a KITTI label or result file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// left, top, right, bottom in pixels
    pub bbox: [f64; 4],
    /// h, w, l in meters
    pub dims: [f64; 3],
    /// bottom-face center in the rectified camera frame
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn has_valid_dims(&self) -> bool {
        self.dims.iter().all(|&d| d > 0.0)
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.6} {:.2} {:.2} {:.2} {:.2} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y,
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score:.6}");
        }
        s
    }
}

fn parse_f64(tok: &str, what: &str, src: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        path: src.to_string(),
        line,
        msg: format!("bad {what} value {tok:?}"),
    })
}

/// Parse label text. `src` names the input in diagnostics; line numbers are 1-based.
pub fn parse_labels(text: &str, src: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 15 && toks.len() != 16 {
            return Err(Error::Parse {
                path: src.to_string(),
                line: n,
                msg: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let f = |k: usize, what: &str| parse_f64(toks[k], what, src, n);
        let occlusion = toks[2].parse::<f64>().map_err(|_| Error::Parse {
            path: src.to_string(),
            line: n,
            msg: format!("bad occlusion value {:?}", toks[2]),
        })? as i32;
        out.push(LabelRecord {
            class: toks[0].to_string(),
            truncation: f(1, "truncation")?,
            occlusion,
            alpha: f(3, "alpha")?,
            bbox: [f(4, "bbox")?, f(5, "bbox")?, f(6, "bbox")?, f(7, "bbox")?],
            dims: [f(8, "height")?, f(9, "width")?, f(10, "length")?],
            location: [f(11, "x")?, f(12, "y")?, f(13, "z")?],
            rotation_y: f(14, "rotation_y")?,
            score: if toks.len() == 16 {
                Some(f(15, "score")?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibMatrices {
    /// R0_rect
    pub rect: Matrix3<f64>,
    /// Tr_velo_to_cam
    pub velo_to_cam: Matrix3x4<f64>,
    /// P2
    pub proj: Matrix3x4<f64>,
}

const ORTHO_TOL: f64 = 1e-4;

fn is_orthonormal(m: &Matrix3<f64>) -> bool {
    (m.transpose() * m - Matrix3::identity()).abs().max() < ORTHO_TOL
}

impl CalibMatrices {
    pub fn identity() -> Self {
        // LiDAR axes mapped onto the camera convention: x right = -y_lidar,
        // y down = -z_lidar, z forward = x_lidar.
        CalibMatrices {
            rect: Matrix3::identity(),
            velo_to_cam: Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0),
            proj: Matrix3x4::new(
                721.5377, 0.0, 609.5593, 0.0, 0.0, 721.5377, 172.854, 0.0, 0.0, 0.0, 1.0, 0.0,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_orthonormal(&self.rect) {
            return Err(Error::Invalid("R0_rect is not orthonormal".into()));
        }
        let rot: Matrix3<f64> = self.velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        if !is_orthonormal(&rot) {
            return Err(Error::Invalid(
                "Tr_velo_to_cam rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    fn rotation_translation(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rot = self.velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.velo_to_cam.fixed_view::<3, 1>(0, 3).into_owned();
        (rot, t)
    }

    pub fn lidar_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let (rot, t) = self.rotation_translation();
        let q = self.rect * (rot * Vector3::from(p) + t);
        [q.x, q.y, q.z]
    }

    pub fn rect_to_lidar(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let (rot, t) = self.rotation_translation();
        let rect_inv = self
            .rect
            .try_inverse()
            .ok_or_else(|| Error::Singular("R0_rect".into()))?;
        let rot_inv = rot
            .try_inverse()
            .ok_or_else(|| Error::Singular("Tr_velo_to_cam".into()))?;
        let q = rot_inv * (rect_inv * Vector3::from(p) - t);
        Ok([q.x, q.y, q.z])
    }
}

fn parse_matrix<const N: usize>(vals: &[f64], key: &str, src: &str, line: usize) -> Result<[f64; N]> {
    vals.try_into().map_err(|_| Error::Parse {
        path: src.to_string(),
        line,
        msg: format!("{key} needs {N} values, found {}", vals.len()),
    })
}

pub fn parse_calib(text: &str, src: &str) -> Result<CalibMatrices> {
    let mut rect = None;
    let mut velo = None;
    let mut proj = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let vals = rest
            .split_whitespace()
            .map(|t| parse_f64(t, key, src, n))
            .collect::<Result<Vec<_>>>()?;
        match key.trim() {
            "R0_rect" | "R_rect" => {
                let v: [f64; 9] = parse_matrix(&vals, key, src, n)?;
                rect = Some(Matrix3::from_row_slice(&v));
            }
            "Tr_velo_to_cam" | "Tr_velo_cam" => {
                let v: [f64; 12] = parse_matrix(&vals, key, src, n)?;
                velo = Some(Matrix3x4::from_row_slice(&v));
            }
            "P2" => {
                let v: [f64; 12] = parse_matrix(&vals, key, src, n)?;
                proj = Some(Matrix3x4::from_row_slice(&v));
            }
            _ => {}
        }
    }
    let missing = |k: &str| Error::Parse {
        path: src.to_string(),
        line: 0,
        msg: format!("missing {k}"),
    };
    let calib = CalibMatrices {
        rect: rect.ok_or_else(|| missing("R0_rect"))?,
        velo_to_cam: velo.ok_or_else(|| missing("Tr_velo_to_cam"))?,
        proj: proj.ok_or_else(|| missing("P2"))?,
    };
    calib.validate()?;
    Ok(calib)
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<CalibMatrices> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib(&text, &path.display().to_string())
}

pub fn calib_to_text(calib: &CalibMatrices) -> String {
    let row = |vals: Vec<f64>| {
        vals.iter()
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let m34 = |m: &Matrix3x4<f64>| row((0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect());
    let m33 = |m: &Matrix3<f64>| row((0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect());
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        m34(&calib.proj),
        m33(&calib.rect),
        m34(&calib.velo_to_cam)
    )
}

/// Convert a camera-frame label into a LiDAR-frame box with a volumetric center.
pub fn camera_box_to_lidar(label: &LabelRecord, calib: &CalibMatrices) -> Result<Box3D> {
    let [h, w, l] = label.dims;
    let [x, y, z] = calib.rect_to_lidar(label.location)?;
    Ok(Box3D {
        x,
        y,
        z: z + 0.5 * h,
        w,
        l,
        h,
        yaw: wrap_angle(-label.rotation_y - FRAC_PI_2),
    })
}

/// Camera-frame bottom center and rotation_y of a LiDAR box.
pub fn lidar_box_to_camera(b: &Box3D, calib: &CalibMatrices) -> ([f64; 3], f64) {
    let loc = calib.lidar_to_rect([b.x, b.y, b.z - 0.5 * b.h]);
    (loc, wrap_angle(-b.yaw - FRAC_PI_2))
}

/// KITTI result record for a detection. Image boxes are not projected and are
/// written as zeros.
pub fn detection_to_label(det: &Detection, calib: &CalibMatrices, class: &str) -> LabelRecord {
    let (location, rotation_y) = lidar_box_to_camera(&det.bbox, calib);
    let alpha = wrap_angle(rotation_y - location[0].atan2(location[2]));
    LabelRecord {
        class: class.to_string(),
        truncation: -1.0,
        occlusion: -1,
        alpha,
        bbox: [0.0; 4],
        dims: [det.bbox.h, det.bbox.w, det.bbox.l],
        location,
        rotation_y,
        score: Some(det.score),
    }
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection], calib: &CalibMatrices) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for d in dets {
        text.push_str(&detection_to_label(d, calib, "Car").to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One LiDAR-frame box per line: `x y z w l h theta [score]`.
pub fn format_lidar_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, d.score
        );
    }
    s
}

/// Parse LiDAR-frame box lines. A missing score column reads as 1.0.
pub fn parse_lidar_detections(text: &str, src: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 7 && toks.len() != 8 {
            return Err(Error::Parse {
                path: src.to_string(),
                line: n,
                msg: format!("expected 7 or 8 fields, found {}", toks.len()),
            });
        }
        let v = toks
            .iter()
            .map(|t| parse_f64(t, "box", src, n))
            .collect::<Result<Vec<_>>>()?;
        let b = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
        out.push(Detection::new(b, v.get(7).copied().unwrap_or(1.0)));
    }
    Ok(out)
}

pub fn read_lidar_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lidar_detections(&text, &path.display().to_string())
}

pub fn write_lidar_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_lidar_detections(dets)).map_err(|e| Error::io(path, e))
}
