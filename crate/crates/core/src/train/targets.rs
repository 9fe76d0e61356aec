//! Anchor target assignment.

use crate::box_geom::{bev_iou, direction_bit, encode, iou3d, AnchorGrid, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

/// IoU thresholds for anchor matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
    /// Match on BEV IoU instead of 3D IoU.
    pub bev: bool,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            positive: 0.6,
            negative: 0.45,
            bev: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<AnchorLabel>,
    pub matched: Vec<Option<usize>>,
    pub residuals: Vec<[f64; 7]>,
    pub direction: Vec<bool>,
    pub max_iou: Vec<f64>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }

    pub fn is_positive(&self, idx: usize) -> bool {
        self.labels[idx] == AnchorLabel::Positive
    }
}

/// Label anchors by their best IoU over `gts`; the best anchor of every gt is
/// forced positive.
pub fn assign_targets(grid: &AnchorGrid, gts: &[Box3D], th: &MatchThresholds) -> TargetAssignment {
    let n = grid.len();
    let anchors = grid.anchors();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    // per gt: (iou, anchor)
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let reach = gt.bev_radius() + anchors.first().map_or(0.0, Box3D::bev_radius);
        for (ai, a) in anchors.iter().enumerate() {
            if (a.x - gt.x).hypot(a.y - gt.y) > reach {
                continue;
            }
            let iou = if th.bev { bev_iou(a, gt) } else { iou3d(a, gt) };
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = Some(gi);
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, Some(ai));
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best_iou
        .iter()
        .map(|&iou| {
            if iou >= th.positive {
                AnchorLabel::Positive
            } else if iou < th.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();
    let mut matched: Vec<Option<usize>> = (0..n).map(|i| if labels[i] == AnchorLabel::Positive { best_gt[i] } else { None }).collect();
    for (gi, &(_, ai)) in gt_best.iter().enumerate() {
        if let Some(ai) = ai {
            if labels[ai] != AnchorLabel::Positive {
                labels[ai] = AnchorLabel::Positive;
                matched[ai] = Some(gi);
            }
        }
    }
    let mut residuals = vec![[0.0; 7]; n];
    let mut direction = vec![false; n];
    for i in 0..n {
        if let Some(gi) = matched[i] {
            residuals[i] = encode(&gts[gi], &anchors[i]);
            direction[i] = direction_bit(gts[gi].yaw);
        }
    }
    TargetAssignment {
        labels,
        matched,
        residuals,
        direction,
        max_iou: best_iou,
    }
}
