//! Detection head split along the forward (x) axis into overlapping parts,
//! each with its own kernel size and dilation, and the cross-part score fusion.

use rand::Rng;

use crate::box_geom::ANCHOR_YAWS;
use crate::error::{shape_err, Error, Result};
use crate::nn_core::layers::{Conv2d, ConvBnRelu};
use crate::nn_core::{ConvSpec, Graph, Mode, ParamStore, Tensor, Var};

pub const ANCHORS_PER_CELL: usize = ANCHOR_YAWS.len();
pub const BOX_PARAMS: usize = 7;
pub const DIR_BINS: usize = 2;

/// Reference BEV width the default part bounds are expressed in.
pub const REFERENCE_WIDTH: usize = 176;

/// Columns `[lo, hi)` of the BEV map handled by one tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartSpec {
    pub lo: usize,
    pub hi: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl PartSpec {
    pub const fn new(lo: usize, hi: usize, kernel: usize, dilation: usize) -> Self {
        PartSpec { lo, hi, kernel, dilation }
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo
    }

    pub fn covers(&self, x: usize) -> bool {
        (self.lo..self.hi).contains(&x)
    }
}

pub fn default_parts() -> Vec<PartSpec> {
    vec![
        PartSpec::new(0, 72, 1, 1),
        PartSpec::new(52, 124, 3, 1),
        PartSpec::new(104, 176, 3, 2),
    ]
}

/// Default bounds rescaled to a map of `width` columns (lower bounds rounded
/// down, upper bounds up, so overlaps never vanish).
pub fn scaled_parts(width: usize) -> Vec<PartSpec> {
    default_parts()
        .into_iter()
        .map(|p| PartSpec {
            lo: p.lo * width / REFERENCE_WIDTH,
            hi: (p.hi * width).div_ceil(REFERENCE_WIDTH),
            ..p
        })
        .collect()
}

/// Bounds within the map, consecutive parts overlapping, every column covered.
pub fn validate_parts(parts: &[PartSpec], width: usize) -> Result<()> {
    if parts.is_empty() {
        return Err(Error::Config("at least one head part is required".into()));
    }
    for (i, p) in parts.iter().enumerate() {
        if p.hi <= p.lo || p.hi > width {
            return Err(Error::Config(format!("part {} interval [{}, {}) invalid for width {width}", i + 1, p.lo, p.hi)));
        }
        if p.kernel % 2 == 0 || p.dilation == 0 {
            return Err(Error::Config(format!("part {} needs an odd kernel and dilation >= 1", i + 1)));
        }
        if i > 0 && !(parts[i - 1].lo < p.lo && p.lo < parts[i - 1].hi) {
            return Err(Error::Config(format!("parts {} and {} do not overlap in order", i, i + 1)));
        }
    }
    if parts[0].lo != 0 || parts[parts.len() - 1].hi != width {
        return Err(Error::Config(format!("parts do not cover columns [0, {width})")));
    }
    Ok(())
}

/// Indices of the parts covering column `x`.
pub fn covering_parts(parts: &[PartSpec], x: usize) -> Vec<usize> {
    parts.iter().enumerate().filter(|(_, p)| p.covers(x)).map(|(i, _)| i).collect()
}

/// Column slices of `r`, one per part.
pub fn split_parts(g: &mut Graph, r: Var, parts: &[PartSpec]) -> Result<Vec<Var>> {
    parts.iter().map(|p| g.slice_width(r, p.lo, p.hi)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PartOutput {
    /// `(b, anchors, h, w)` class logits
    pub cls: Var,
    /// `(b, anchors·7, h, w)` residuals, channel `a·7 + k`
    pub reg: Var,
    /// `(b, anchors·2, h, w)` direction logits, channel `a·2 + bin`
    pub dir: Var,
}

#[derive(Debug, Clone)]
pub struct PartTower {
    pub spec: PartSpec,
    convs: [ConvBnRelu; 2],
    cls: Conv2d,
    reg: Conv2d,
    dir: Conv2d,
}

impl PartTower {
    pub fn new(store: &mut ParamStore, name: &str, spec: PartSpec, cin: usize, width: usize, rng: &mut impl Rng) -> Self {
        let conv = |cin| ConvSpec::new(cin, width, spec.kernel).dilation(spec.dilation);
        PartTower {
            spec,
            convs: [
                ConvBnRelu::new(store, &format!("{name}.conv1"), conv(cin), rng),
                ConvBnRelu::new(store, &format!("{name}.conv2"), conv(width), rng),
            ],
            cls: Conv2d::new_head(store, &format!("{name}.cls"), ConvSpec::new(width, ANCHORS_PER_CELL, 1), rng),
            reg: Conv2d::new_head(store, &format!("{name}.reg"), ConvSpec::new(width, ANCHORS_PER_CELL * BOX_PARAMS, 1), rng),
            dir: Conv2d::new_head(store, &format!("{name}.dir"), ConvSpec::new(width, ANCHORS_PER_CELL * DIR_BINS, 1), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<PartOutput> {
        let a = self.convs[0].forward(g, store, x, mode)?;
        let t = self.convs[1].forward(g, store, a, mode)?;
        g.discard(&[a]);
        let out = PartOutput {
            cls: self.cls.forward(g, store, t)?,
            reg: self.reg.forward(g, store, t)?,
            dir: self.dir.forward(g, store, t)?,
        };
        g.discard(&[t]);
        Ok(out)
    }

    pub fn cls_bias(&self) -> Option<crate::nn_core::ParamId> {
        self.cls.bias
    }
}

#[derive(Debug, Clone)]
pub struct DepthHead {
    pub towers: Vec<PartTower>,
    pub width: usize,
}

impl DepthHead {
    pub fn new(store: &mut ParamStore, name: &str, parts: &[PartSpec], map_width: usize, cin: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_parts(parts, map_width)?;
        let towers = parts
            .iter()
            .enumerate()
            .map(|(i, &p)| PartTower::new(store, &format!("{name}.part{}", i + 1), p, cin, width, rng))
            .collect();
        Ok(DepthHead { towers, width: map_width })
    }

    pub fn parts(&self) -> Vec<PartSpec> {
        self.towers.iter().map(|t| t.spec).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, r: Var, mode: Mode) -> Result<Vec<PartOutput>> {
        let w = g.value(r).dims4()?[3];
        if w != self.width {
            return Err(shape_err!("head built for width {}, got {w}", self.width));
        }
        let slices = split_parts(g, r, &self.parts())?;
        let mut outs = Vec::with_capacity(slices.len());
        for (tower, s) in self.towers.iter().zip(slices) {
            outs.push(tower.forward(g, store, s, mode)?);
            g.discard(&[s]);
        }
        Ok(outs)
    }
}

/// Values of one part's output maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMaps {
    pub cls: Tensor,
    pub reg: Tensor,
    pub dir: Tensor,
}

impl PartMaps {
    pub fn from_graph(g: &Graph, out: &PartOutput) -> Self {
        PartMaps {
            cls: g.value(out.cls).clone(),
            reg: g.value(out.reg).clone(),
            dir: g.value(out.dir).clone(),
        }
    }
}

/// Full-width head predictions, indexed by `((b·anchors + a)·h + y)·w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedHead {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub score: Vec<f64>,
    pub reg: Vec<[f64; BOX_PARAMS]>,
    pub dir_logits: Vec<[f64; DIR_BINS]>,
    /// index of the part each value was taken from
    pub part: Vec<usize>,
}

impl FusedHead {
    pub fn index(&self, b: usize, a: usize, y: usize, x: usize) -> usize {
        ((b * ANCHORS_PER_CELL + a) * self.h + y) * self.w + x
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per cell and anchor keep the highest sigmoid score over the covering parts,
/// with box and direction values from the same part; ties go to the lower part.
pub fn fuse_scores(maps: &[PartMaps], parts: &[PartSpec], width: usize) -> Result<FusedHead> {
    if maps.len() != parts.len() || maps.is_empty() {
        return Err(shape_err!("{} part outputs for {} parts", maps.len(), parts.len()));
    }
    let [batch, na, h, _] = maps[0].cls.dims4()?;
    for (m, p) in maps.iter().zip(parts) {
        let expect = |c: usize| vec![batch, c, h, p.width()];
        if m.cls.shape != expect(ANCHORS_PER_CELL) || m.reg.shape != expect(ANCHORS_PER_CELL * BOX_PARAMS) || m.dir.shape != expect(ANCHORS_PER_CELL * DIR_BINS) {
            return Err(shape_err!("part maps {:?}/{:?}/{:?} do not match part [{}, {})", m.cls.shape, m.reg.shape, m.dir.shape, p.lo, p.hi));
        }
    }
    debug_assert_eq!(na, ANCHORS_PER_CELL);
    let n = batch * na * h * width;
    let mut fused = FusedHead {
        batch,
        h,
        w: width,
        score: vec![f64::NEG_INFINITY; n],
        reg: vec![[0.0; BOX_PARAMS]; n],
        dir_logits: vec![[0.0; DIR_BINS]; n],
        part: vec![usize::MAX; n],
    };
    for b in 0..batch {
        for a in 0..na {
            for y in 0..h {
                for x in 0..width {
                    let dst = fused.index(b, a, y, x);
                    for (pi, (m, p)) in maps.iter().zip(parts).enumerate() {
                        if !p.covers(x) {
                            continue;
                        }
                        let pw = p.width();
                        let lx = x - p.lo;
                        let s = sigmoid(m.cls.data[((b * na + a) * h + y) * pw + lx]);
                        if s > fused.score[dst] {
                            fused.score[dst] = s;
                            fused.part[dst] = pi;
                            for k in 0..BOX_PARAMS {
                                let c = a * BOX_PARAMS + k;
                                fused.reg[dst][k] = m.reg.data[((b * na * BOX_PARAMS + c) * h + y) * pw + lx];
                            }
                            for k in 0..DIR_BINS {
                                let c = a * DIR_BINS + k;
                                fused.dir_logits[dst][k] = m.dir.data[((b * na * DIR_BINS + c) * h + y) * pw + lx];
                            }
                        }
                    }
                    if fused.part[dst] == usize::MAX {
                        return Err(Error::Invalid(format!("column {x} is covered by no head part")));
                    }
                }
            }
        }
    }
    Ok(fused)
}
