//! Plain-text run configuration: one `key = value` per line, `#` comments,
//! dotted section prefixes. Unknown keys are rejected so typos fail loudly.
//! `to_text` emits the canonical form; checkpoints echo it so a model file
//! is self-describing.

use std::path::Path;

use crate::anchors::MatchConfig;
use crate::density::{DensityLossKind, GaussianSpec, SigmaMode};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, OhemConfig};
use crate::network::ModelConfig;
use crate::optim::SgdConfig;
use crate::postprocess::PostprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainConfig {
    pub iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub matching: MatchConfig,
    pub gaussian: GaussianSpec,
    pub density_loss: DensityLossKind,
    pub weights: LossWeights,
    pub ohem: OhemConfig,
    pub sgd: SgdConfig,
    pub train: TrainConfig,
    pub post: PostprocessConfig,
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key {key}: cannot parse {value:?} as {want}"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn p_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(key, v, "a comma-separated number list")))
        .collect()
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(key, v, "a comma-separated integer list")))
        .collect()
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_usize_list(vs: &[usize]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "backbone.in_channels" => m.backbone.in_channels = p_usize(key, v)?,
            "backbone.widths" => m.backbone.widths = p_usize_list(key, v)?,
            "backbone.convs_per_block" => m.backbone.convs_per_block = p_usize(key, v)?,
            "estimator.reduce_channels" => m.estimator.reduce_channels = p_usize(key, v)?,
            "estimator.conv_channels" => m.estimator.conv_channels = p_usize(key, v)?,
            "pyramid.channels" => m.pyramid.channels = p_usize(key, v)?,
            "pyramid.relu_after_sum" => m.pyramid.relu_after_sum = p_bool(key, v)?,
            "context.enabled" => m.context.enabled = p_bool(key, v)?,
            "context.dilations" => m.context.dilations = p_usize_list(key, v)?,
            "context.branch_width" => m.context.branch_width = p_usize(key, v)?,
            "context.residual" => m.context.residual = p_bool(key, v)?,
            "fusion.mode" => m.fusion.mode = v.to_string(),
            "fusion.alpha_init" => m.fusion.alpha_init = p_f64(key, v)?,
            "anchors.base_size" => m.anchors.base_size = p_f64(key, v)?,
            _ if key.starts_with("anchors.d") => {
                let rest = &key["anchors.d".len()..];
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
                let k: usize = idx
                    .parse()
                    .ok()
                    .filter(|k| (1..=4).contains(k))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
                let det = &mut m.anchors.detectors[k - 1];
                match field {
                    "stride" => det.stride = p_usize(key, v)?,
                    "scales" => det.scales = p_f64_list(key, v)?,
                    _ => return Err(Error::Config(format!("unknown config key {key}"))),
                }
            }
            "match.pos_iou" => self.matching.pos_iou = p_f64(key, v)?,
            "match.neg_iou" => self.matching.neg_iou = p_f64(key, v)?,
            "match.force_best" => self.matching.force_best = p_bool(key, v)?,
            "match.mid_range_negative" => self.matching.mid_range_negative = p_bool(key, v)?,
            "density.sigma_mode" => {
                self.gaussian.sigma_mode = match v {
                    "fixed" => SigmaMode::Fixed,
                    "box_adaptive" => SigmaMode::BoxAdaptive,
                    _ => return Err(bad(key, v, "fixed or box_adaptive")),
                }
            }
            "density.sigma_fixed" => self.gaussian.sigma_fixed = p_f64(key, v)?,
            "density.adaptive_coeff" => self.gaussian.adaptive_coeff = p_f64(key, v)?,
            "density.truncation_radius" => self.gaussian.truncation_radius = p_f64(key, v)?,
            "density.normalize" => self.gaussian.normalize_after_truncation = p_bool(key, v)?,
            "density.loss" => {
                self.density_loss = match v {
                    "squared_mean" => DensityLossKind::SquaredMean,
                    "norm" => DensityLossKind::Norm,
                    _ => return Err(bad(key, v, "squared_mean or norm")),
                }
            }
            "loss.lambda_box" => self.weights.lambda_box = p_f64(key, v)?,
            "loss.lambda_den" => self.weights.lambda_den = p_f64(key, v)?,
            "ohem.budget" => self.ohem.budget = p_usize(key, v)?,
            "ohem.max_pos_fraction" => self.ohem.max_pos_fraction = p_f64(key, v)?,
            "sgd.base_lr" => self.sgd.base_lr = p_f64(key, v)?,
            "sgd.momentum" => self.sgd.momentum = p_f64(key, v)?,
            "sgd.weight_decay" => self.sgd.weight_decay = p_f64(key, v)?,
            "sgd.milestones" => self.sgd.milestones = p_usize_list(key, v)?,
            "train.iterations" => self.train.iterations = p_usize(key, v)?,
            "infer.topk" => self.post.topk = p_usize(key, v)?,
            "infer.nms_iou" => self.post.nms_iou = p_f64(key, v)?,
            "infer.score_threshold" => self.post.score_threshold = p_f64(key, v)?,
            "infer.nms_per_detector" => self.post.nms_per_detector = p_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mc = &self.matching;
        if !(0.0..=1.0).contains(&mc.pos_iou) || !(0.0..=1.0).contains(&mc.neg_iou) {
            return Err(Error::Config("match thresholds must lie in [0, 1]".into()));
        }
        if mc.neg_iou > mc.pos_iou {
            return Err(Error::Config(
                "match.neg_iou must not exceed match.pos_iou".into(),
            ));
        }
        self.gaussian.validate()?;
        self.weights.validate()?;
        if self.ohem.budget == 0 {
            return Err(Error::Config("ohem.budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ohem.max_pos_fraction) {
            return Err(Error::Config("ohem.max_pos_fraction must lie in [0, 1]".into()));
        }
        self.sgd.validate()?;
        if self.train.iterations == 0 {
            return Err(Error::Config("train.iterations must be positive".into()));
        }
        if self.post.topk == 0 {
            return Err(Error::Config("infer.topk must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.post.nms_iou) {
            return Err(Error::Config("infer.nms_iou must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.post.score_threshold) {
            return Err(Error::Config("infer.score_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order, shortest exact
    /// number formatting. parse(to_text(c)) == c.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("backbone.in_channels", m.backbone.in_channels.to_string());
        kv("backbone.widths", fmt_usize_list(&m.backbone.widths));
        kv("backbone.convs_per_block", m.backbone.convs_per_block.to_string());
        kv("estimator.reduce_channels", m.estimator.reduce_channels.to_string());
        kv("estimator.conv_channels", m.estimator.conv_channels.to_string());
        kv("pyramid.channels", m.pyramid.channels.to_string());
        kv("pyramid.relu_after_sum", m.pyramid.relu_after_sum.to_string());
        kv("context.enabled", m.context.enabled.to_string());
        kv("context.dilations", fmt_usize_list(&m.context.dilations));
        kv("context.branch_width", m.context.branch_width.to_string());
        kv("context.residual", m.context.residual.to_string());
        kv("fusion.mode", m.fusion.mode.clone());
        kv("fusion.alpha_init", m.fusion.alpha_init.to_string());
        kv("anchors.base_size", m.anchors.base_size.to_string());
        for (k, det) in m.anchors.detectors.iter().enumerate() {
            kv(&format!("anchors.d{}.stride", k + 1), det.stride.to_string());
            kv(&format!("anchors.d{}.scales", k + 1), fmt_f64_list(&det.scales));
        }
        kv("match.pos_iou", self.matching.pos_iou.to_string());
        kv("match.neg_iou", self.matching.neg_iou.to_string());
        kv("match.force_best", self.matching.force_best.to_string());
        kv("match.mid_range_negative", self.matching.mid_range_negative.to_string());
        kv(
            "density.sigma_mode",
            match self.gaussian.sigma_mode {
                SigmaMode::Fixed => "fixed".into(),
                SigmaMode::BoxAdaptive => "box_adaptive".into(),
            },
        );
        kv("density.sigma_fixed", self.gaussian.sigma_fixed.to_string());
        kv("density.adaptive_coeff", self.gaussian.adaptive_coeff.to_string());
        kv("density.truncation_radius", self.gaussian.truncation_radius.to_string());
        kv("density.normalize", self.gaussian.normalize_after_truncation.to_string());
        kv(
            "density.loss",
            match self.density_loss {
                DensityLossKind::SquaredMean => "squared_mean".into(),
                DensityLossKind::Norm => "norm".into(),
            },
        );
        kv("loss.lambda_box", self.weights.lambda_box.to_string());
        kv("loss.lambda_den", self.weights.lambda_den.to_string());
        kv("ohem.budget", self.ohem.budget.to_string());
        kv("ohem.max_pos_fraction", self.ohem.max_pos_fraction.to_string());
        kv("sgd.base_lr", self.sgd.base_lr.to_string());
        kv("sgd.momentum", self.sgd.momentum.to_string());
        kv("sgd.weight_decay", self.sgd.weight_decay.to_string());
        kv("sgd.milestones", fmt_usize_list(&self.sgd.milestones));
        kv("train.iterations", self.train.iterations.to_string());
        kv("infer.topk", self.post.topk.to_string());
        kv("infer.nms_iou", self.post.nms_iou.to_string());
        kv("infer.score_threshold", self.post.score_threshold.to_string());
        kv("infer.nms_per_detector", self.post.nms_per_detector.to_string());
        s
    }
}
