//! The full detector: voxel encoder, context encoder and partitioned head,
//! plus decoding of head outputs into oriented detections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::box_geom::{decode, oriented_nms, AnchorGrid, AnchorSpec, Detection};
use crate::depth_head::{fuse_scores, DepthHead, FusedHead, PartMaps, PartOutput, PartSpec, ANCHORS_PER_CELL};
use crate::error::{Error, Result};
use crate::nn_core::{Graph, Mode, ParamStore, Var};
use crate::seg_context::{ContextEncoder, SceOutput};
use crate::sparse_conv::{block_shapes, default_blocks, EncoderPlan, VfeBlockSpec, VoxelEncoder};
use crate::voxel_grid::{voxelize, SparseVoxelGrid, VoxelizerConfig};
use crate::PointCloud;

/// Prior foreground probability the class heads are initialized to.
pub const CLASS_PRIOR: f64 = 0.01;

/// Architecture and geometry of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub voxel: VoxelizerConfig,
    pub blocks: Vec<VfeBlockSpec>,
    /// channel width of the segmentation branch
    pub sce_width: usize,
    /// channel width of each head tower
    pub head_width: usize,
    pub parts: Vec<PartSpec>,
    pub anchor: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            voxel: VoxelizerConfig::default(),
            blocks: default_blocks(),
            sce_width: 128,
            head_width: 128,
            parts: crate::depth_head::default_parts(),
            anchor: AnchorSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Same architecture at 1/8 of the default x/y extent: 8.8 m × 10 m.
    pub fn toy() -> Self {
        ModelConfig {
            voxel: VoxelizerConfig {
                range_min: [0.0, -5.0, -3.0],
                range_max: [8.8, 5.0, 1.0],
                ..VoxelizerConfig::default()
            },
            parts: crate::depth_head::scaled_parts(22),
            ..ModelConfig::default()
        }
    }

    /// Total x/y down-sampling of the voxel encoder.
    pub fn bev_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.xy_stride).product()
    }

    pub fn grid_shape(&self) -> Result<[usize; 3]> {
        self.voxel.grid_shape()
    }

    /// `(channels, h, w)` of the encoder output.
    pub fn bev_dims(&self) -> Result<(usize, usize, usize)> {
        let shape = self.grid_shape()?;
        let last = *block_shapes(shape, &self.blocks)?.last().ok_or_else(|| Error::Config("at least one encoder block is required".into()))?;
        let c = self.blocks.last().map_or(0, |b| b.out_channels);
        Ok((c * last[2], last[1], last[0]))
    }

    /// BEV cell edge in meters.
    pub fn bev_cell(&self) -> f64 {
        self.voxel.voxel_size[0] * self.bev_stride() as f64
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let (_, h, w) = self.bev_dims()?;
        Ok(AnchorGrid::new(w, h, self.voxel.range_min[0], self.voxel.range_min[1], self.bev_cell(), self.anchor))
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        for b in &self.blocks {
            b.validate()?;
        }
        let (_, h, w) = self.bev_dims()?;
        let cy = self.voxel.voxel_size[1] * self.bev_stride() as f64;
        if (cy - self.bev_cell()).abs() > 1e-9 {
            return Err(Error::Config(format!("BEV cells must be square, got {} x {cy}", self.bev_cell())));
        }
        if h < 4 || w < 4 {
            return Err(Error::Config(format!("BEV map {h}x{w} is too small")));
        }
        crate::depth_head::validate_parts(&self.parts, w)?;
        if self.sce_width == 0 || self.head_width == 0 {
            return Err(Error::Config("branch widths must be > 0".into()));
        }
        if !(self.anchor.w > 0.0 && self.anchor.l > 0.0 && self.anchor.h > 0.0) {
            return Err(Error::Config("anchor dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Inference-time filtering of decoded boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectSettings {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pre_nms: usize,
    pub max_detections: usize,
}

impl Default for DetectSettings {
    fn default() -> Self {
        DetectSettings {
            score_threshold: 0.3,
            nms_iou: 0.05,
            pre_nms: 1000,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub bev: Var,
    pub sce: SceOutput,
    pub parts: Vec<PartOutput>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoder: VoxelEncoder,
    pub sce: ContextEncoder,
    pub head: DepthHead,
}

impl Network {
    /// Register all parameters in `store`, initialized from `seed`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, _, w) = cfg.bev_dims()?;
        let encoder = VoxelEncoder::new(store, "vfe", &cfg.blocks, &mut rng)?;
        let sce = ContextEncoder::new(store, "sce", c, cfg.sce_width, &mut rng);
        let head = DepthHead::new(store, "head", &cfg.parts, w, 2 * c, cfg.head_width, &mut rng)?;
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        for t in &head.towers {
            if let Some(b) = t.cls_bias() {
                store.value_mut(b).data.iter_mut().for_each(|v| *v = prior);
            }
        }
        Ok(Network { cfg, encoder, sce, head })
    }

    pub fn voxelize(&self, cloud: &PointCloud) -> Result<SparseVoxelGrid> {
        voxelize(cloud, &self.cfg.voxel)
    }

    pub fn plan(&self, grids: &[SparseVoxelGrid]) -> Result<EncoderPlan> {
        self.encoder.plan(grids)
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, grids: &[SparseVoxelGrid], mode: Mode) -> Result<NetOutput> {
        let plan = self.plan(grids)?;
        self.forward_planned(g, store, grids, &plan, mode)
    }

    pub fn forward_planned(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        grids: &[SparseVoxelGrid],
        plan: &EncoderPlan,
        mode: Mode,
    ) -> Result<NetOutput> {
        let bev = self.encoder.forward(g, store, grids, plan, mode)?;
        let sce = self.sce.forward(g, store, bev, mode)?;
        let parts = self.head.forward(g, store, sce.reweighted, mode)?;
        Ok(NetOutput { bev, sce, parts })
    }

    /// Fuse part outputs over the full map width.
    pub fn fuse(&self, g: &Graph, out: &NetOutput) -> Result<FusedHead> {
        let maps: Vec<PartMaps> = out.parts.iter().map(|p| PartMaps::from_graph(g, p)).collect();
        fuse_scores(&maps, &self.head.parts(), self.head.width)
    }

    /// Eval-mode forward and fusion on one grid.
    pub fn infer(&self, store: &ParamStore, grid: &SparseVoxelGrid) -> Result<FusedHead> {
        let mut g = Graph::inference();
        let mut store = store.clone();
        let out = self.forward(&mut g, &mut store, std::slice::from_ref(grid), Mode::Eval)?;
        self.fuse(&g, &out)
    }

    /// Scored boxes above the threshold, before NMS.
    pub fn raw_detections(&self, store: &ParamStore, grid: &SparseVoxelGrid, settings: &DetectSettings) -> Result<Vec<Detection>> {
        decode_candidates(&self.infer(store, grid)?, &self.cfg.anchor_grid()?, 0, settings)
    }

    /// Inference on one grid: eval-mode forward, fusion, decoding and NMS.
    pub fn detect(&self, store: &ParamStore, grid: &SparseVoxelGrid, settings: &DetectSettings) -> Result<Vec<Detection>> {
        Ok(apply_nms(self.raw_detections(store, grid, settings)?, settings))
    }
}

/// Decode one batch item of fused head output into the `pre_nms` best boxes
/// scoring at least the threshold, in descending score order.
pub fn decode_candidates(fused: &FusedHead, anchors: &AnchorGrid, batch: usize, settings: &DetectSettings) -> Result<Vec<Detection>> {
    if (anchors.nx, anchors.ny) != (fused.w, fused.h) || batch >= fused.batch {
        return Err(Error::Invalid("anchor grid does not match head output".into()));
    }
    let per_item = ANCHORS_PER_CELL * fused.h * fused.w;
    let mut cands = Vec::new();
    for idx in 0..per_item {
        let f = batch * per_item + idx;
        let score = fused.score[f];
        if !score.is_finite() || fused.reg[f].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite head output at anchor {idx}")));
        }
        if score < settings.score_threshold {
            continue;
        }
        let [d0, d1] = fused.dir_logits[f];
        let bbox = decode(&fused.reg[f], &anchors.anchor(idx), d1 > d0);
        cands.push(Detection {
            bbox,
            score,
            direction: d1 > d0,
        });
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(settings.pre_nms);
    Ok(cands)
}

/// Oriented NMS over detections in any order, capped at `max_detections`.
pub fn apply_nms(dets: Vec<Detection>, settings: &DetectSettings) -> Vec<Detection> {
    let mut kept = oriented_nms(&dets, settings.nms_iou);
    kept.truncate(settings.max_detections);
    kept
}

/// [`decode_candidates`] followed by [`apply_nms`].
pub fn decode_detections(fused: &FusedHead, anchors: &AnchorGrid, batch: usize, settings: &DetectSettings) -> Result<Vec<Detection>> {
    Ok(apply_nms(decode_candidates(fused, anchors, batch, settings)?, settings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::box_geom::encode;

    #[test]
    fn geometry_of_default_and_toy_models() {
        let d = ModelConfig::default();
        assert_eq!(d.bev_dims().unwrap(), (128, 200, 176));
        assert_eq!(d.bev_stride(), 8);
        assert!((d.bev_cell() - 0.4).abs() < 1e-12);
        d.validate().unwrap();
        let t = ModelConfig::toy();
        assert_eq!(t.bev_dims().unwrap(), (128, 25, 22));
        t.validate().unwrap();
    }

    #[test]
    fn decode_recovers_encoded_box() {
        let anchors = AnchorGrid::new(4, 4, 0.0, 0.0, 0.4, AnchorSpec::default());
        let n = anchors.len();
        let mut fused = FusedHead {
            batch: 1,
            h: 4,
            w: 4,
            score: vec![0.01; n],
            reg: vec![[0.0; 7]; n],
            dir_logits: vec![[0.0; 2]; n],
            part: vec![0; n],
        };
        let idx = anchors.index(1, 2, 3);
        let gt = crate::Box3D::new(1.5, 1.1, -0.8, 1.7, 4.1, 1.5, -1.4);
        fused.score[idx] = 0.9;
        fused.reg[idx] = encode(&gt, &anchors.anchor(idx));
        fused.dir_logits[idx] = [1.0, -1.0];
        let dets = decode_detections(&fused, &anchors, 0, &DetectSettings::default()).unwrap();
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox.to_array();
        for (x, y) in b.iter().zip(gt.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
