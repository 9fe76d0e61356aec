//! Classification, localization, direction and total losses.

use super::targets::{AnchorLabel, TargetAssignment};
use crate::box_geom::AnchorGrid;
use crate::depth_head::{PartOutput, PartSpec, ANCHORS_PER_CELL, BOX_PARAMS, DIR_BINS};
use crate::error::{shape_err, Result};
use crate::nn_core::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub dir: f64,
    pub seg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            loc: 2.0,
            dir: 0.2,
            seg: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.loc, self.dir, self.seg, self.focal_alpha, self.focal_gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.focal_alpha > 1.0 {
            return Err(crate::Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PartLoss {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub parts: Vec<PartLoss>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,L_S,L_loc_1,L_loc_2,L_loc_3,L_cls_1,L_cls_2,L_cls_3,L_dir_1,L_dir_2,L_dir_3";

    /// `step,total,L_S,L_loc_*,L_cls_*,L_dir_*` with full float precision.
    pub fn csv_row(&self, step: usize) -> String {
        let mut cols = vec![step.to_string(), self.total.to_string(), self.seg.to_string()];
        cols.extend(self.parts.iter().map(|p| p.loc.to_string()));
        cols.extend(self.parts.iter().map(|p| p.cls.to_string()));
        cols.extend(self.parts.iter().map(|p| p.dir.to_string()));
        cols.join(",")
    }
}

/// `λ_S·L_S + Σ_p (λ_loc·L_loc + L_cls + λ_dir·L_dir)`.
pub fn total_loss(parts: &[PartLoss], seg: f64, w: &LossWeights) -> LossReport {
    let mut total = w.seg * seg;
    for p in parts {
        total += w.loc * p.loc + p.cls + w.dir * p.dir;
    }
    LossReport {
        total,
        seg,
        parts: parts.to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss over non-ignored anchors divided by `max(1, #positive)`.
pub fn focal_loss(logits: &[f64], labels: &[AnchorLabel], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut pos = 0usize;
    for (&z, &l) in logits.iter().zip(labels) {
        let (zt, at) = match l {
            AnchorLabel::Ignored => continue,
            AnchorLabel::Positive => {
                pos += 1;
                (z, alpha)
            }
            AnchorLabel::Negative => (-z, 1.0 - alpha),
        };
        let pt = 1.0 / (1.0 + (-zt).exp());
        total += at * (1.0 - pt).powf(gamma) * softplus(-zt);
    }
    total / pos.max(1) as f64
}

fn smooth_l1(u: f64) -> f64 {
    let u = u.abs();
    if u < 1.0 {
        0.5 * u * u
    } else {
        u - 0.5
    }
}

/// SmoothL1 over the seven residuals of positive anchors divided by `#positive`.
pub fn loc_loss(pred: &[[f64; 7]], target: &[[f64; 7]], positive: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pos = 0usize;
    for ((p, t), &is_pos) in pred.iter().zip(target).zip(positive) {
        if is_pos {
            pos += 1;
            total += p.iter().zip(t).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
        }
    }
    total / pos.max(1) as f64
}

/// Two-bin softmax cross-entropy on positive anchors divided by `#positive`.
pub fn dir_loss(logits: &[[f64; 2]], bits: &[bool], positive: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pos = 0usize;
    for ((z, &bit), &is_pos) in logits.iter().zip(bits).zip(positive) {
        if is_pos {
            pos += 1;
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            total += lse - z[bit as usize];
        }
    }
    total / pos.max(1) as f64
}

/// Loss terms of one head part as graph scalars `(loc, cls, dir)`.
pub fn part_losses(
    g: &mut Graph,
    out: &PartOutput,
    part: &PartSpec,
    targets: &[&TargetAssignment],
    grid: &AnchorGrid,
    w: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let [batch, na, h, pw] = g.value(out.cls).dims4()?;
    if batch != targets.len() || na != ANCHORS_PER_CELL || h != grid.ny || pw != part.width() {
        return Err(shape_err!("class map {:?} does not match part [{}, {}) and {} targets", [batch, na, h, pw], part.lo, part.hi, targets.len()));
    }
    let cells = h * pw;
    let mut cls_labels = vec![0i8; batch * na * cells];
    let mut reg_target = vec![0.0; batch * na * BOX_PARAMS * cells];
    let mut reg_weight = vec![0.0; reg_target.len()];
    let mut dir_target = vec![-1i32; batch * na * cells];
    let mut positives = 0usize;
    for (b, t) in targets.iter().enumerate() {
        for a in 0..na {
            for y in 0..h {
                for lx in 0..pw {
                    let idx = grid.index(a, y, part.lo + lx);
                    let cell = y * pw + lx;
                    let slot = (b * na + a) * cells + cell;
                    cls_labels[slot] = match t.labels[idx] {
                        AnchorLabel::Positive => 1,
                        AnchorLabel::Negative => 0,
                        AnchorLabel::Ignored => -1,
                    };
                    if t.labels[idx] == AnchorLabel::Positive {
                        positives += 1;
                        for k in 0..BOX_PARAMS {
                            let r = (b * na * BOX_PARAMS + a * BOX_PARAMS + k) * cells + cell;
                            reg_target[r] = t.residuals[idx][k];
                            reg_weight[r] = 1.0;
                        }
                        dir_target[slot] = t.direction[idx] as i32;
                    }
                }
            }
        }
    }
    let norm = positives.max(1) as f64;
    let loc = g.smooth_l1(out.reg, reg_target, reg_weight, norm)?;
    let cls = g.focal_loss(out.cls, cls_labels, w.focal_alpha, w.focal_gamma, norm)?;
    let dir = g.softmax_ce(out.dir, dir_target, DIR_BINS, norm)?;
    Ok((loc, cls, dir))
}

/// Combine graph loss terms with the configured weights.
pub fn total_loss_var(g: &mut Graph, parts: &[(Var, Var, Var)], seg: Var, w: &LossWeights) -> Result<(Var, LossReport)> {
    let mut terms = vec![(seg, w.seg)];
    let mut report = Vec::new();
    for &(loc, cls, dir) in parts {
        terms.extend([(loc, w.loc), (cls, 1.0), (dir, w.dir)]);
        report.push(PartLoss {
            loc: g.value(loc).item(),
            cls: g.value(cls).item(),
            dir: g.value(dir).item(),
        });
    }
    let total = g.weighted_sum(&terms)?;
    let mut rep = total_loss(&report, g.value(seg).item(), w);
    rep.total = g.value(total).item();
    Ok((total, rep))
}
