//! Target assignment, losses, augmentation and the training loop.

pub mod augment;
pub mod ground;
pub mod losses;
pub mod synthetic;
pub mod targets;

pub use augment::{augment_scene, rotate_scene, AugmentConfig, GtDatabase, GtSample, Scene};
pub use ground::{fit_ground_plane, GroundPlane, RansacConfig};
pub use losses::{dir_loss, focal_loss, loc_loss, total_loss, LossReport, LossWeights, PartLoss};
pub use synthetic::{synthetic_dataset, synthetic_scene, SyntheticConfig};
pub use targets::{assign_targets, AnchorLabel, MatchThresholds, TargetAssignment};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{NetOutput, Network};
use crate::nn_core::{AdamW, AdamWConfig, Graph, Mode, ParamStore, Var};
use crate::seg_context::{make_mask, seg_loss, MaskKind, SemanticMask};
use crate::voxel_grid::SparseVoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub matching: MatchThresholds,
    pub mask_kind: MaskKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 1,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            matching: MatchThresholds::default(),
            mask_kind: MaskKind::Voxel,
        }
    }
}

/// A scene voxelized with its masks and anchor targets precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub grid: SparseVoxelGrid,
    pub mask: SemanticMask,
    pub targets: TargetAssignment,
}

pub fn prepare_examples(net: &Network, scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<Example>> {
    let anchors = net.cfg.anchor_grid()?;
    let stride = net.cfg.bev_stride();
    scenes
        .par_iter()
        .map(|s| {
            let grid = net.voxelize(&s.cloud)?;
            let mask = make_mask(&grid, &net.cfg.voxel, &s.boxes, cfg.mask_kind, stride)?;
            let targets = assign_targets(&anchors, &s.boxes, &cfg.matching);
            Ok(Example { grid, mask, targets })
        })
        .collect()
}

/// Forward pass and the weighted loss over a batch.
pub fn forward_loss(
    net: &Network,
    g: &mut Graph,
    store: &mut ParamStore,
    batch: &[&Example],
    weights: &LossWeights,
    mode: Mode,
) -> Result<(Var, LossReport, NetOutput)> {
    let grids: Vec<SparseVoxelGrid> = batch.iter().map(|e| e.grid.clone()).collect();
    let out = net.forward(g, store, &grids, mode)?;
    let masks: Vec<SemanticMask> = batch.iter().map(|e| e.mask.clone()).collect();
    let seg = seg_loss(g, out.sce.prob, &masks)?;
    let anchors = net.cfg.anchor_grid()?;
    let targets: Vec<&TargetAssignment> = batch.iter().map(|e| &e.targets).collect();
    let mut parts = Vec::new();
    for (p, spec) in out.parts.iter().zip(net.head.parts()) {
        parts.push(losses::part_losses(g, p, &spec, &targets, &anchors, weights)?);
    }
    let (total, report) = losses::total_loss_var(g, &parts, seg, weights)?;
    Ok((total, report, out))
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(net: &Network, store: &mut ParamStore, opt: &mut AdamW, batch: &[&Example], weights: &LossWeights) -> Result<LossReport> {
    let mut g = Graph::new();
    let (total, report, _) = forward_loss(net, &mut g, store, batch, weights, Mode::Train)?;
    if !report.total.is_finite() {
        return Ok(report);
    }
    g.backward(total)?;
    store.zero_grads();
    store.accumulate_grads(&g);
    opt.step(store);
    Ok(report)
}

/// Train for `cfg.steps` steps cycling through `examples` in order.
/// Returns the per-step loss trace; a non-finite loss stops training with
/// the failing step in the error.
pub fn train(net: &Network, store: &mut ParamStore, examples: &[Example], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs at least one example and batch size >= 1".into()));
    }
    cfg.weights.validate()?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|k| &examples[(step * cfg.batch_size + k) % examples.len()]).collect();
        let report = train_step(net, store, &mut opt, &batch, &cfg.weights)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}: {}", report.total)));
        }
        trace.push(report);
    }
    Ok(trace)
}

/// Foreground IoU of `M ≥ 0.5` against the mask labels, pooled over examples.
pub fn seg_iou(net: &Network, store: &ParamStore, examples: &[Example], mode: Mode) -> Result<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for e in examples {
        let mut g = Graph::inference();
        let mut s = store.clone();
        let out = net.forward(&mut g, &mut s, std::slice::from_ref(&e.grid), mode)?;
        let prob = &g.value(out.sce.prob).data;
        for (&l, &p) in e.mask.labels.iter().zip(prob) {
            let pred = p >= 0.5;
            inter += (l && pred) as usize;
            union += (l || pred) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Replace every batch-norm running statistic with its average batch
/// statistic over `examples`, one forward pass each.
pub fn recalibrate_bn(net: &Network, store: &mut ParamStore, examples: &[Example]) -> Result<()> {
    for (k, e) in examples.iter().enumerate() {
        let mut g = Graph::inference();
        g.set_bn_momentum(Some(k as f64 / (k + 1) as f64));
        net.forward(&mut g, store, std::slice::from_ref(&e.grid), Mode::Train)?;
    }
    Ok(())
}

/// Mean of the first `window` totals of a trace.
pub fn moving_average_start(trace: &[LossReport], window: usize) -> f64 {
    let n = window.min(trace.len()).max(1);
    trace.iter().take(n).map(|r| r.total).sum::<f64>() / n as f64
}

/// Mean of the last `window` totals of a trace.
pub fn moving_average_end(trace: &[LossReport], window: usize) -> f64 {
    let n = window.min(trace.len()).max(1);
    trace.iter().rev().take(n).map(|r| r.total).sum::<f64>() / n as f64
}
