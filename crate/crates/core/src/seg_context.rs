//! Semantic context encoder: BEV foreground masks, the segmentation branch
//! producing a probability map `M`, the detection branch producing features
//! `F`, and the re-weighting `R = (1 + M) · F`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::box_geom::Box3D;
use crate::error::{shape_err, Error, Result};
use crate::nn_core::layers::{BatchNorm, Conv2d, ConvBnRelu};
use crate::nn_core::{ConvSpec, Graph, Mode, ParamStore, Var};
use crate::voxel_grid::{SparseVoxelGrid, VoxelizerConfig};

/// Probability clamp used by the segmentation loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskKind {
    /// Cells holding a non-empty voxel whose center falls inside a box.
    #[default]
    Voxel,
    /// Cells whose center falls inside a box.
    Box,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Voxel => "voxel",
            MaskKind::Box => "box",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(MaskKind::Voxel),
            "box" => Ok(MaskKind::Box),
            _ => Err(Error::Config(format!("unknown mask kind {s:?} (expected voxel or box)"))),
        }
    }
}

/// Binary BEV labels, row-major `(h, w)` with rows along y and columns along x.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<bool>,
    pub prob: Option<Vec<f64>>,
}

impl SemanticMask {
    pub fn empty(h: usize, w: usize) -> Self {
        SemanticMask {
            h,
            w,
            labels: vec![false; h * w],
            prob: None,
        }
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.labels[row * self.w + col]
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    /// IoU between labels and `prob ≥ 0.5`; 1 when both are empty.
    pub fn iou(&self, prob: &[f64]) -> Result<f64> {
        if prob.len() != self.labels.len() {
            return Err(shape_err!("mask has {} cells, probability map {}", self.labels.len(), prob.len()));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&l, &p) in self.labels.iter().zip(prob) {
            let pred = p >= 0.5;
            inter += (l && pred) as usize;
            union += (l || pred) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Binary graymap (`P5`) of the labels, or of the probabilities if present.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        match &self.prob {
            Some(p) => out.extend(p.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
            None => out.extend(self.labels.iter().map(|&l| if l { 255 } else { 0 })),
        }
        out
    }
}

/// BEV shape `(h, w)` of a grid after down-sampling by `stride`.
pub fn bev_shape(grid_shape: [usize; 3], stride: usize) -> (usize, usize) {
    (grid_shape[1] / stride, grid_shape[0] / stride)
}

/// Rasterize ground-truth boxes into BEV labels at `stride` voxels per cell.
pub fn make_mask(
    grid: &SparseVoxelGrid,
    cfg: &VoxelizerConfig,
    boxes: &[Box3D],
    kind: MaskKind,
    stride: usize,
) -> Result<SemanticMask> {
    if stride == 0 {
        return Err(Error::Config("bev stride must be >= 1".into()));
    }
    let (h, w) = bev_shape(grid.shape, stride);
    let [vx, vy, _] = cfg.voxel_size;
    let (cx, cy) = (vx * stride as f64, vy * stride as f64);
    let mut box_mask = SemanticMask::empty(h, w);
    for row in 0..h {
        let y = cfg.range_min[1] + (row as f64 + 0.5) * cy;
        for col in 0..w {
            let x = cfg.range_min[0] + (col as f64 + 0.5) * cx;
            box_mask.labels[row * w + col] = boxes.iter().any(|b| b.contains_bev(x, y));
        }
    }
    if kind == MaskKind::Box {
        return Ok(box_mask);
    }
    // A cell must also pass the box rule, so voxel-type labels are a subset.
    let mut mask = SemanticMask::empty(h, w);
    for &[ix, iy, _] in &grid.indices {
        let (col, row) = (ix / stride, iy / stride);
        if col >= w || row >= h || !box_mask.is_foreground(row, col) {
            continue;
        }
        let x = cfg.range_min[0] + (ix as f64 + 0.5) * vx;
        let y = cfg.range_min[1] + (iy as f64 + 0.5) * vy;
        if boxes.iter().any(|b| b.contains_bev(x, y)) {
            mask.labels[row * w + col] = true;
        }
    }
    Ok(mask)
}

/// Two 3×3 conv/BN layers with an additive skip, then ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    a: ConvBnRelu,
    b_conv: Conv2d,
    b_bn: BatchNorm,
    proj: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            a: ConvBnRelu::new(store, &format!("{name}.a"), ConvSpec::new(cin, cout, 3), rng),
            b_conv: Conv2d::new(store, &format!("{name}.b.conv"), ConvSpec::new(cout, cout, 3).bias(false), rng),
            b_bn: BatchNorm::new(store, &format!("{name}.b.bn"), cout),
            proj: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.proj"), ConvSpec::new(cin, cout, 1).bias(false), rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let a = self.a.forward(g, store, x, mode)?;
        let c = self.b_conv.forward(g, store, a)?;
        let n = self.b_bn.forward(g, store, c, mode)?;
        g.discard(&[a, c]);
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let s = g.add(n, skip)?;
        let y = g.relu(s);
        g.discard(&[n, s]);
        if skip != x {
            g.discard(&[skip]);
        }
        Ok(y)
    }
}

/// Feature-pyramid segmentation branch producing a one-channel probability map.
#[derive(Debug, Clone)]
pub struct SegBranch {
    res: Vec<ResBlock>,
    fuse_mid: ConvBnRelu,
    fuse_top: ConvBnRelu,
    head: Conv2d,
}

impl SegBranch {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, rng: &mut impl Rng) -> Self {
        let res = (1..=5)
            .map(|i| {
                let c = if i == 1 { cin } else { width };
                ResBlock::new(store, &format!("{name}.res{i}"), c, width, rng)
            })
            .collect();
        SegBranch {
            res,
            fuse_mid: ConvBnRelu::new(store, &format!("{name}.fuse_mid"), ConvSpec::new(2 * width, width, 3), rng),
            fuse_top: ConvBnRelu::new(store, &format!("{name}.fuse_top"), ConvSpec::new(2 * width, width, 3), rng),
            head: Conv2d::new_head(store, &format!("{name}.head"), ConvSpec::new(width, 1, 1), rng),
        }
    }

    /// Returns `M` with shape `(b, 1, h, w)`.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, bev: Var, mode: Mode) -> Result<Var> {
        let [_, _, h, w] = g.value(bev).dims4()?;
        if h < 4 || w < 4 {
            return Err(shape_err!("segmentation branch needs at least 4x4 input, got {h}x{w}"));
        }
        let c1 = self.res[0].forward(g, store, bev, mode)?;
        let p1 = g.maxpool2(c1)?;
        let c2 = self.res[1].forward(g, store, p1, mode)?;
        g.discard(&[p1]);
        let p2 = g.maxpool2(c2)?;
        let c3 = self.res[2].forward(g, store, p2, mode)?;
        g.discard(&[p2]);

        let [_, _, h2, w2] = g.value(c2).dims4()?;
        let u3 = g.upsample2(c3, h2, w2)?;
        let cat = g.concat_channels(&[u3, c2])?;
        g.discard(&[c3, u3, c2]);
        let f2 = self.fuse_mid.forward(g, store, cat, mode)?;
        g.discard(&[cat]);
        let r4 = self.res[3].forward(g, store, f2, mode)?;
        g.discard(&[f2]);

        let u4 = g.upsample2(r4, h, w)?;
        let cat = g.concat_channels(&[u4, c1])?;
        g.discard(&[r4, u4, c1]);
        let f1 = self.fuse_top.forward(g, store, cat, mode)?;
        g.discard(&[cat]);
        let r5 = self.res[4].forward(g, store, f1, mode)?;
        g.discard(&[f1]);
        let logits = self.head.forward(g, store, r5)?;
        g.discard(&[r5]);
        let m = g.sigmoid(logits);
        g.discard(&[logits]);
        Ok(m)
    }

    /// Bias of the 1×1 output layer.
    pub fn head_bias(&self) -> Option<crate::nn_core::ParamId> {
        self.head.bias
    }
}

/// One down-sampling and one up-sampling stage; the output is concatenated
/// with the input, doubling the channel count.
#[derive(Debug, Clone)]
pub struct DetBranch {
    down: ConvBnRelu,
    mid: ConvBnRelu,
    up: ConvBnRelu,
}

impl DetBranch {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        DetBranch {
            down: ConvBnRelu::new(store, &format!("{name}.down"), ConvSpec::new(channels, channels, 3).stride(2), rng),
            mid: ConvBnRelu::new(store, &format!("{name}.mid"), ConvSpec::new(channels, channels, 3), rng),
            up: ConvBnRelu::new(store, &format!("{name}.up"), ConvSpec::new(channels, channels, 3), rng),
        }
    }

    /// Returns `F` with twice the input channels at input resolution.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, bev: Var, mode: Mode) -> Result<Var> {
        let [_, _, h, w] = g.value(bev).dims4()?;
        let d = self.down.forward(g, store, bev, mode)?;
        let m = self.mid.forward(g, store, d, mode)?;
        g.discard(&[d]);
        let u = g.upsample2(m, h, w)?;
        g.discard(&[m]);
        let c = self.up.forward(g, store, u, mode)?;
        g.discard(&[u]);
        let f = g.concat_channels(&[c, bev])?;
        g.discard(&[c]);
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SceOutput {
    pub features: Var,
    pub prob: Var,
    pub reweighted: Var,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub seg: SegBranch,
    pub det: DetBranch,
    pub channels: usize,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        ContextEncoder {
            seg: SegBranch::new(store, &format!("{name}.seg"), channels, width, rng),
            det: DetBranch::new(store, &format!("{name}.det"), channels, rng),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, bev: Var, mode: Mode) -> Result<SceOutput> {
        let c = g.value(bev).dims4()?[1];
        if c != self.channels {
            return Err(shape_err!("context encoder expects {} channels, got {c}", self.channels));
        }
        let prob = self.seg.forward(g, store, bev, mode)?;
        let features = self.det.forward(g, store, bev, mode)?;
        let reweighted = g.fuse(features, prob)?;
        g.discard(&[features]);
        Ok(SceOutput {
            features,
            prob,
            reweighted,
        })
    }
}

/// Mean binary cross-entropy between `M` and the mask labels of each batch item.
pub fn seg_loss(g: &mut Graph, prob: Var, masks: &[SemanticMask]) -> Result<Var> {
    let [b, c, h, w] = g.value(prob).dims4()?;
    if c != 1 || b != masks.len() || masks.iter().any(|m| (m.h, m.w) != (h, w)) {
        return Err(shape_err!("probability map {:?} does not match {} masks", [b, c, h, w], masks.len()));
    }
    let labels = masks.iter().flat_map(|m| m.label_values()).collect();
    g.bce(prob, labels, BCE_EPS)
}
