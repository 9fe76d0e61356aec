//! Car detection metrics under the KITTI protocol: difficulty strata, greedy
//! per-frame matching, interpolated average precision (AP) and average
//! orientation similarity (AOS), for both 3D and BEV overlap.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::box_geom::{bev_iou, iou3d, Box3D, Detection};
use crate::error::{Error, Result};
use crate::kitti_io::{camera_box_to_lidar, CalibMatrices, LabelRecord};

/// Overlap a detection needs with a car to count as a true positive.
pub const CAR_IOU_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// 11 recall points `0, 0.1, …, 1`.
    #[default]
    R11,
    /// 40 recall points `1/40, …, 1`.
    R40,
}

impl ApMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ApMode::R11 => "r11",
            ApMode::R40 => "r40",
        }
    }

    pub fn recall_points(self) -> Vec<f64> {
        match self {
            ApMode::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            ApMode::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r11" => Ok(ApMode::R11),
            "r40" => Ok(ApMode::R40),
            _ => Err(Error::Config(format!("unknown AP mode {s:?} (expected r11 or r40)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// Admission rule of one difficulty stratum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRule {
    /// minimum image-box height in pixels
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyRule {
    pub const EASY: DifficultyRule = DifficultyRule {
        min_height: 40.0,
        max_occlusion: 0,
        max_truncation: 0.15,
    };
    pub const MODERATE: DifficultyRule = DifficultyRule {
        min_height: 25.0,
        max_occlusion: 1,
        max_truncation: 0.30,
    };
    pub const HARD: DifficultyRule = DifficultyRule {
        min_height: 25.0,
        max_occlusion: 2,
        max_truncation: 0.50,
    };

    pub fn admits(&self, gt: &EvalGt) -> bool {
        gt.height_px >= self.min_height && gt.occlusion <= self.max_occlusion && gt.truncation <= self.max_truncation
    }

    /// True if every ground truth admitted by `self` is admitted by `other`.
    pub fn is_subset_of(&self, other: &DifficultyRule) -> bool {
        self.min_height >= other.min_height && self.max_occlusion <= other.max_occlusion && self.max_truncation <= other.max_truncation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrataRules {
    pub easy: DifficultyRule,
    pub moderate: DifficultyRule,
    pub hard: DifficultyRule,
}

impl Default for StrataRules {
    fn default() -> Self {
        StrataRules {
            easy: DifficultyRule::EASY,
            moderate: DifficultyRule::MODERATE,
            hard: DifficultyRule::HARD,
        }
    }
}

impl StrataRules {
    pub fn rule(&self, d: Difficulty) -> &DifficultyRule {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Moderate => &self.moderate,
            Difficulty::Hard => &self.hard,
        }
    }

    /// Strata must be nested: easy within moderate within hard.
    pub fn validate(&self) -> Result<()> {
        for r in [&self.easy, &self.moderate, &self.hard] {
            if !(r.min_height.is_finite() && r.max_truncation.is_finite()) {
                return Err(Error::Config("difficulty thresholds must be finite".into()));
            }
        }
        if !self.easy.is_subset_of(&self.moderate) || !self.moderate.is_subset_of(&self.hard) {
            return Err(Error::Config("difficulty strata must be nested easy ⊆ moderate ⊆ hard".into()));
        }
        Ok(())
    }
}

/// What a ground-truth box is for the purposes of matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtKind {
    Car,
    /// a similar class (van) whose detections are neither rewarded nor penalized
    Neighbor,
    /// an unlabeled region; detections overlapping it are ignored
    DontCare,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub bbox: Box3D,
    pub kind: GtKind,
    pub height_px: f64,
    pub occlusion: i32,
    pub truncation: f64,
}

impl EvalGt {
    /// A fully visible car.
    pub fn car(bbox: Box3D) -> Self {
        EvalGt {
            bbox,
            kind: GtKind::Car,
            height_px: 100.0,
            occlusion: 0,
            truncation: 0.0,
        }
    }
}

/// Ground truths relevant to car evaluation. Other classes are dropped, as are
/// DontCare regions without a usable 3D extent.
pub fn gts_from_labels(labels: &[LabelRecord], calib: &CalibMatrices) -> Result<Vec<EvalGt>> {
    let mut out = Vec::new();
    for l in labels {
        let kind = match l.class.as_str() {
            "Car" => GtKind::Car,
            "Van" => GtKind::Neighbor,
            "DontCare" if l.has_valid_dims() => GtKind::DontCare,
            _ => continue,
        };
        out.push(EvalGt {
            bbox: camera_box_to_lidar(l, calib)?,
            kind,
            height_px: l.bbox_height(),
            occlusion: l.occlusion,
            truncation: l.truncation,
        });
    }
    Ok(out)
}

/// Role of each ground truth within one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtStatus {
    Care,
    Ignored,
}

/// Per-stratum status of every ground truth: cars failing the rule are
/// ignored, neighbors and DontCare regions are always ignored.
pub fn stratify(gts: &[EvalGt], rule: &DifficultyRule) -> Vec<GtStatus> {
    gts.iter()
        .map(|g| match g.kind {
            GtKind::Car if rule.admits(g) => GtStatus::Care,
            _ => GtStatus::Ignored,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetOutcome {
    /// matched ground truth index and yaw difference `gt − det`
    Tp { gt: usize, dtheta: f64 },
    Fp,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub outcomes: Vec<DetOutcome>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching of detections (sorted by descending score) to ground
/// truths. Each detection takes the unmatched cared-for ground truth of highest
/// overlap at or above `threshold`; failing that, a detection overlapping an
/// ignored ground truth is ignored, otherwise it is a false positive.
pub fn match_frame(
    dets: &[Detection],
    gts: &[Box3D],
    status: &[GtStatus],
    iou_fn: fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> FrameMatch {
    debug_assert_eq!(gts.len(), status.len());
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            let iou = iou_fn(&d.bbox, g);
            if iou < threshold {
                continue;
            }
            match status[j] {
                GtStatus::Ignored => hits_ignored = true,
                GtStatus::Care if !gt_matched[j] => {
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                GtStatus::Care => {}
            }
        }
        outcomes.push(match best {
            Some((j, _)) => {
                gt_matched[j] = true;
                DetOutcome::Tp {
                    gt: j,
                    dtheta: gts[j].yaw - d.bbox.yaw,
                }
            }
            None if hits_ignored => DetOutcome::Ignored,
            None => DetOutcome::Fp,
        });
    }
    FrameMatch { outcomes, gt_matched }
}

/// A detection's score and outcome, pooled across frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredOutcome {
    pub score: f64,
    pub outcome: DetOutcome,
}

/// Sampled precision envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl Curve {
    pub fn mean_percent(&self) -> f64 {
        100.0 * self.precision.iter().sum::<f64>() / self.precision.len() as f64
    }
}

/// Ranked outcomes with ignored detections removed. Ties keep input order.
fn ranked(outcomes: &[ScoredOutcome]) -> Vec<ScoredOutcome> {
    let mut r: Vec<ScoredOutcome> = outcomes.iter().copied().filter(|o| o.outcome != DetOutcome::Ignored).collect();
    r.sort_by(|a, b| b.score.total_cmp(&a.score));
    r
}

/// `value(k, tp, similarity)` at each rank against recall at that rank, enveloped (maximum
/// over ranks with recall ≥ r) and sampled at the mode's recall points.
fn envelope(ranked: &[ScoredOutcome], num_gt: usize, mode: ApMode, value: impl Fn(usize, usize, f64) -> f64) -> Curve {
    let mut points = Vec::with_capacity(ranked.len());
    let (mut tp, mut sim) = (0usize, 0.0);
    for (k, o) in ranked.iter().enumerate() {
        if let DetOutcome::Tp { dtheta, .. } = o.outcome {
            tp += 1;
            sim += 0.5 * (1.0 + dtheta.cos());
        }
        points.push((tp as f64 / num_gt as f64, value(k + 1, tp, sim)));
    }
    // suffix maximum so that envelope(i) = max over ranks ≥ i
    let mut best = vec![0.0f64; points.len() + 1];
    for i in (0..points.len()).rev() {
        best[i] = best[i + 1].max(points[i].1);
    }
    let recall = mode.recall_points();
    let precision = recall
        .iter()
        .map(|&r| {
            // recall is non-decreasing in rank, so the first rank reaching r starts the suffix
            points.iter().position(|&(rec, _)| rec >= r).map_or(0.0, |i| best[i])
        })
        .collect();
    Curve { recall, precision }
}

/// Interpolated precision curve; `None` when there are no cared-for ground truths.
pub fn precision_curve(outcomes: &[ScoredOutcome], num_gt: usize, mode: ApMode) -> Option<Curve> {
    if num_gt == 0 {
        return None;
    }
    let r = ranked(outcomes);
    Some(envelope(&r, num_gt, mode, |k, tp, _| tp as f64 / k as f64))
}

/// Average precision in percent; `None` when there are no cared-for ground truths.
pub fn average_precision(outcomes: &[ScoredOutcome], num_gt: usize, mode: ApMode) -> Option<f64> {
    precision_curve(outcomes, num_gt, mode).map(|c| c.mean_percent())
}

/// Average orientation similarity in percent: precision replaced by the
/// summed `(1 + cos Δθ) / 2` over true positives in the ranked prefix, divided
/// by the prefix length.
pub fn aos(outcomes: &[ScoredOutcome], num_gt: usize, mode: ApMode) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let r = ranked(outcomes);
    Some(envelope(&r, num_gt, mode, |k, _, sim| sim / k as f64).mean_percent())
}

/// Detections and ground truths of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub gts: Vec<EvalGt>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: ApMode,
    pub rules: StrataRules,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: CAR_IOU_THRESHOLD,
            mode: ApMode::R11,
            rules: StrataRules::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("eval IoU threshold {} not in (0, 1]", self.iou_threshold)));
        }
        self.rules.validate()
    }
}

/// Metrics of one stratum; `None` where no cared-for ground truth exists.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumResult {
    pub difficulty: Difficulty,
    pub num_gt: usize,
    pub ap_3d: Option<f64>,
    pub ap_bev: Option<f64>,
    pub aos: Option<f64>,
    pub curve_3d: Option<Curve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mode: ApMode,
    pub iou_threshold: f64,
    pub strata: Vec<StratumResult>,
}

fn pooled(frames: &[EvalFrame], statuses: &[Vec<GtStatus>], iou_fn: fn(&Box3D, &Box3D) -> f64, threshold: f64) -> Vec<ScoredOutcome> {
    let per_frame: Vec<Vec<ScoredOutcome>> = frames
        .par_iter()
        .zip(statuses)
        .map(|(f, status)| {
            let mut dets = f.dets.clone();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let boxes: Vec<Box3D> = f.gts.iter().map(|g| g.bbox).collect();
            let m = match_frame(&dets, &boxes, status, iou_fn, threshold);
            dets.iter()
                .zip(m.outcomes)
                .map(|(d, outcome)| ScoredOutcome { score: d.score, outcome })
                .collect()
        })
        .collect();
    per_frame.into_iter().flatten().collect()
}

/// Evaluate all frames in every stratum. Detection scores must be finite.
pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    if frames.iter().flat_map(|f| &f.dets).any(|d| !d.score.is_finite()) {
        return Err(Error::Numeric("non-finite detection score".into()));
    }
    let strata = Difficulty::ALL
        .iter()
        .map(|&d| {
            let rule = cfg.rules.rule(d);
            let statuses: Vec<Vec<GtStatus>> = frames.iter().map(|f| stratify(&f.gts, rule)).collect();
            let num_gt = statuses.iter().flatten().filter(|&&s| s == GtStatus::Care).count();
            let o3 = pooled(frames, &statuses, iou3d, cfg.iou_threshold);
            let ob = pooled(frames, &statuses, bev_iou, cfg.iou_threshold);
            StratumResult {
                difficulty: d,
                num_gt,
                ap_3d: average_precision(&o3, num_gt, cfg.mode),
                ap_bev: average_precision(&ob, num_gt, cfg.mode),
                aos: aos(&o3, num_gt, cfg.mode),
                curve_3d: precision_curve(&o3, num_gt, cfg.mode),
            }
        })
        .collect();
    Ok(EvalResult {
        mode: cfg.mode,
        iou_threshold: cfg.iou_threshold,
        strata,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl EvalResult {
    pub fn stratum(&self, d: Difficulty) -> &StratumResult {
        self.strata.iter().find(|s| s.difficulty == d).expect("all strata evaluated")
    }

    /// Plain-text table: rows 3D / BEV / orientation, columns easy / moderate / hard.
    pub fn table(&self) -> String {
        let mut s = format!("Car AP ({}) @ IoU {:.2}\n", self.mode.as_str().to_uppercase(), self.iou_threshold);
        let _ = writeln!(s, "{:<12}{:>10}{:>10}{:>10}", "", "Easy", "Mod.", "Hard");
        type Pick = fn(&StratumResult) -> Option<f64>;
        let rows: [(&str, Pick); 3] = [("3D", |r| r.ap_3d), ("BEV", |r| r.ap_bev), ("Orientation", |r| r.aos)];
        for (name, pick) in rows {
            let _ = write!(s, "{name:<12}");
            for d in Difficulty::ALL {
                let _ = write!(s, "{:>10}", cell(pick(self.stratum(d))));
            }
            s.push('\n');
        }
        s
    }

    /// `key=value` lines with full precision; absent values read `none`.
    pub fn key_values(&self) -> String {
        let mut s = format!("mode={}\niou_threshold={}\n", self.mode, self.iou_threshold);
        for r in &self.strata {
            let d = r.difficulty.as_str();
            let v = |x: Option<f64>| x.map_or_else(|| "none".to_string(), |x| x.to_string());
            let _ = writeln!(s, "{d}.num_gt={}", r.num_gt);
            let _ = writeln!(s, "{d}.ap_3d={}", v(r.ap_3d));
            let _ = writeln!(s, "{d}.ap_bev={}", v(r.ap_bev));
            let _ = writeln!(s, "{d}.aos={}", v(r.aos));
            if let Some(c) = &r.curve_3d {
                let p: Vec<String> = c.precision.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(s, "{d}.precision_3d={}", p.join(","));
            }
        }
        s
    }
}
