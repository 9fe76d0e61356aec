//! Run configuration as `key=value` text.
//!
//! Every key has a default, so a file only lists overrides. Blank lines and
//! text after `#` are ignored; unknown keys are rejected. Lists use commas,
//! and the fields of one block or head part are separated by colons.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::box_geom::AnchorSpec;
use crate::depth_head::PartSpec;
use crate::error::{Error, Result};
use crate::eval_metrics::{DifficultyRule, EvalConfig};
use crate::network::{DetectSettings, ModelConfig};
use crate::sparse_conv::VfeBlockSpec;
use crate::train::{AugmentConfig, RansacConfig, SyntheticConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectSettings,
    pub eval: EvalConfig,
    pub ransac: RansacConfig,
    pub augment: AugmentConfig,
    pub synthetic: SyntheticConfig,
    /// number of scenes in the synthetic training set
    pub scenes: usize,
    /// parameter initialization seed
    pub seed: u64,
    /// synthetic data seed
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectSettings::default(),
            eval: EvalConfig::default(),
            ransac: RansacConfig::default(),
            augment: AugmentConfig::default(),
            synthetic: SyntheticConfig::default(),
            scenes: 20,
            seed: 0,
            data_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str, sep: char) -> Result<Vec<T>> {
    v.split(sep).map(|t| parse(key, t)).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy + Default>(key: &str, v: &str, sep: char) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v, sep)?;
    items
        .try_into()
        .map_err(|items: Vec<T>| Error::Config(format!("{key}: expected {N} values, got {}", items.len())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn format_block(b: &VfeBlockSpec) -> String {
    join(&[b.in_channels, b.out_channels, b.subm_layers, b.xy_stride, b.z_kernel, b.z_stride], ":")
}

fn parse_block(key: &str, v: &str) -> Result<VfeBlockSpec> {
    let [in_channels, out_channels, subm_layers, xy_stride, z_kernel, z_stride] = parse_array::<6, usize>(key, v, ':')?;
    Ok(VfeBlockSpec {
        in_channels,
        out_channels,
        subm_layers,
        xy_stride,
        z_kernel,
        z_stride,
    })
}

fn parse_part(key: &str, v: &str) -> Result<PartSpec> {
    let [lo, hi, kernel, dilation] = parse_array::<4, usize>(key, v, ':')?;
    Ok(PartSpec { lo, hi, kernel, dilation })
}

fn rule_values(r: &DifficultyRule) -> String {
    format!("{}:{}:{}", r.min_height, r.max_occlusion, r.max_truncation)
}

fn parse_rule(key: &str, v: &str) -> Result<DifficultyRule> {
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected min_height:max_occlusion:max_truncation")));
    }
    Ok(DifficultyRule {
        min_height: parse(key, parts[0])?,
        max_occlusion: parse(key, parts[1])?,
        max_truncation: parse(key, parts[2])?,
    })
}

impl RunConfig {
    /// Same architecture and training setup on the small synthetic extent.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            ..RunConfig::default()
        }
    }

    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let v = &m.voxel;
        let t = &self.train;
        let o = &t.optimizer;
        let w = &t.weights;
        let a = &m.anchor;
        let d = &self.detect;
        let e = &self.eval;
        let r = &self.ransac;
        let g = &self.augment;
        let s = &self.synthetic;
        vec![
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("voxel.range_min", join(&v.range_min, ",")),
            ("voxel.range_max", join(&v.range_max, ",")),
            ("voxel.size", join(&v.voxel_size, ",")),
            ("voxel.max_points", v.max_points_per_voxel.to_string()),
            ("voxel.seed", v.seed.to_string()),
            ("vfe.blocks", m.blocks.iter().map(format_block).collect::<Vec<_>>().join(",")),
            ("sce.width", m.sce_width.to_string()),
            ("head.width", m.head_width.to_string()),
            (
                "head.parts",
                m.parts.iter().map(|p| join(&[p.lo, p.hi, p.kernel, p.dilation], ":")).collect::<Vec<_>>().join(","),
            ),
            ("anchor.size", join(&[a.w, a.l, a.h], ",")),
            ("anchor.z", a.z.to_string()),
            ("match.positive_iou", t.matching.positive.to_string()),
            ("match.negative_iou", t.matching.negative.to_string()),
            ("match.bev", t.matching.bev.to_string()),
            ("loss.loc", w.loc.to_string()),
            ("loss.dir", w.dir.to_string()),
            ("loss.seg", w.seg.to_string()),
            ("loss.focal_alpha", w.focal_alpha.to_string()),
            ("loss.focal_gamma", w.focal_gamma.to_string()),
            ("mask.kind", t.mask_kind.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("adamw.lr", o.lr.to_string()),
            ("adamw.weight_decay", o.weight_decay.to_string()),
            ("adamw.beta1", o.beta1.to_string()),
            ("adamw.beta2", o.beta2.to_string()),
            ("adamw.eps", o.eps.to_string()),
            ("detect.score_threshold", d.score_threshold.to_string()),
            ("detect.nms_iou", d.nms_iou.to_string()),
            ("detect.pre_nms", d.pre_nms.to_string()),
            ("detect.max_detections", d.max_detections.to_string()),
            ("eval.iou", e.iou_threshold.to_string()),
            ("eval.ap_mode", e.mode.to_string()),
            ("eval.easy", rule_values(&e.rules.easy)),
            ("eval.moderate", rule_values(&e.rules.moderate)),
            ("eval.hard", rule_values(&e.rules.hard)),
            ("ransac.iterations", r.iterations.to_string()),
            ("ransac.inlier_tol", r.inlier_tol.to_string()),
            ("ransac.seed", r.seed.to_string()),
            ("augment.samples", g.samples.to_string()),
            ("augment.noise_var", g.noise_var.to_string()),
            ("augment.box_yaw_noise", g.box_yaw_noise.to_string()),
            ("augment.global_rotation", g.global_rotation.to_string()),
            ("synthetic.scenes", self.scenes.to_string()),
            ("synthetic.ground_z", s.ground_z.to_string()),
            ("synthetic.max_cars", s.max_cars.to_string()),
            ("synthetic.ground_points", s.ground_points.to_string()),
            ("synthetic.roof_points", s.roof_points.to_string()),
            ("synthetic.side_points", s.side_points.to_string()),
            ("synthetic.yaw_jitter", s.yaw_jitter.to_string()),
        ]
    }

    /// Set one key without validating the whole configuration.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "voxel.range_min" => m.voxel.range_min = parse_array(key, v, ',')?,
            "voxel.range_max" => m.voxel.range_max = parse_array(key, v, ',')?,
            "voxel.size" => m.voxel.voxel_size = parse_array(key, v, ',')?,
            "voxel.max_points" => m.voxel.max_points_per_voxel = parse(key, v)?,
            "voxel.seed" => m.voxel.seed = parse(key, v)?,
            "vfe.blocks" => m.blocks = v.split(',').map(|b| parse_block(key, b)).collect::<Result<_>>()?,
            "sce.width" => m.sce_width = parse(key, v)?,
            "head.width" => m.head_width = parse(key, v)?,
            "head.parts" => m.parts = v.split(',').map(|p| parse_part(key, p)).collect::<Result<_>>()?,
            "anchor.size" => {
                let [w, l, h] = parse_array(key, v, ',')?;
                m.anchor = AnchorSpec { w, l, h, ..m.anchor };
            }
            "anchor.z" => m.anchor.z = parse(key, v)?,
            "match.positive_iou" => t.matching.positive = parse(key, v)?,
            "match.negative_iou" => t.matching.negative = parse(key, v)?,
            "match.bev" => t.matching.bev = parse_bool(key, v)?,
            "loss.loc" => t.weights.loc = parse(key, v)?,
            "loss.dir" => t.weights.dir = parse(key, v)?,
            "loss.seg" => t.weights.seg = parse(key, v)?,
            "loss.focal_alpha" => t.weights.focal_alpha = parse(key, v)?,
            "loss.focal_gamma" => t.weights.focal_gamma = parse(key, v)?,
            "mask.kind" => t.mask_kind = v.trim().parse()?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "adamw.lr" => t.optimizer.lr = parse(key, v)?,
            "adamw.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "adamw.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "adamw.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "adamw.eps" => t.optimizer.eps = parse(key, v)?,
            "detect.score_threshold" => self.detect.score_threshold = parse(key, v)?,
            "detect.nms_iou" => self.detect.nms_iou = parse(key, v)?,
            "detect.pre_nms" => self.detect.pre_nms = parse(key, v)?,
            "detect.max_detections" => self.detect.max_detections = parse(key, v)?,
            "eval.iou" => self.eval.iou_threshold = parse(key, v)?,
            "eval.ap_mode" => self.eval.mode = v.trim().parse()?,
            "eval.easy" => self.eval.rules.easy = parse_rule(key, v)?,
            "eval.moderate" => self.eval.rules.moderate = parse_rule(key, v)?,
            "eval.hard" => self.eval.rules.hard = parse_rule(key, v)?,
            "ransac.iterations" => self.ransac.iterations = parse(key, v)?,
            "ransac.inlier_tol" => self.ransac.inlier_tol = parse(key, v)?,
            "ransac.seed" => self.ransac.seed = parse(key, v)?,
            "augment.samples" => self.augment.samples = parse(key, v)?,
            "augment.noise_var" => self.augment.noise_var = parse(key, v)?,
            "augment.box_yaw_noise" => self.augment.box_yaw_noise = parse(key, v)?,
            "augment.global_rotation" => self.augment.global_rotation = parse(key, v)?,
            "synthetic.scenes" => self.scenes = parse(key, v)?,
            "synthetic.ground_z" => self.synthetic.ground_z = parse(key, v)?,
            "synthetic.max_cars" => self.synthetic.max_cars = parse(key, v)?,
            "synthetic.ground_points" => self.synthetic.ground_points = parse(key, v)?,
            "synthetic.roof_points" => self.synthetic.roof_points = parse(key, v)?,
            "synthetic.side_points" => self.synthetic.side_points = parse(key, v)?,
            "synthetic.yaw_jitter" => self.synthetic.yaw_jitter = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `base`, then validate.
    pub fn parse_over(base: RunConfig, text: &str, src: &str) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: src.to_string(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: src.to_string(),
                line: i + 1,
                msg: match e {
                    Error::Config(m) => m,
                    e => e.to_string(),
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, src: &str) -> Result<Self> {
        Self::parse_over(RunConfig::default(), text, src)
    }

    pub fn load(path: impl AsRef<Path>, base: RunConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_over(base, &text, &path.display().to_string())
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        t.weights.validate()?;
        let m = &t.matching;
        if !(0.0 <= m.negative && m.negative <= m.positive && m.positive <= 1.0) {
            return Err(Error::Config(format!("match thresholds need 0 <= negative ({}) <= positive ({}) <= 1", m.negative, m.positive)));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("AdamW needs lr > 0, weight_decay >= 0, betas in [0, 1), eps > 0".into()));
        }
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be >= 1".into()));
        }
        let d = &self.detect;
        if !((0.0..=1.0).contains(&d.score_threshold) && (0.0..=1.0).contains(&d.nms_iou)) || d.pre_nms == 0 {
            return Err(Error::Config("detect thresholds must lie in [0, 1] and pre_nms >= 1".into()));
        }
        self.eval.validate()?;
        if self.ransac.iterations == 0 || !(self.ransac.inlier_tol > 0.0) {
            return Err(Error::Config("ransac needs iterations >= 1 and inlier_tol > 0".into()));
        }
        let g = &self.augment;
        if [g.noise_var, g.box_yaw_noise, g.global_rotation].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("augmentation magnitudes must be finite and >= 0".into()));
        }
        let s = &self.synthetic;
        if self.scenes == 0 || s.max_cars == 0 || !s.ground_z.is_finite() || !(s.yaw_jitter.is_finite() && s.yaw_jitter >= 0.0) {
            return Err(Error::Config("synthetic data needs scenes >= 1, max_cars >= 1 and finite geometry".into()));
        }
        Ok(())
    }
}
