//! Anchor tiling, IoU geometry, ground-truth matching, and the log-space box
//! regression encoding.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corners exclusive of nothing:
/// width = x2 - x1, height = y2 - y1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        }
    }

    pub fn w(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn h(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn cx(&self) -> f64 {
        (self.x1 + self.x2) / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.y1 + self.y2) / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1
            && self.y2 > self.y1
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One detector's anchor lattice: square anchors of side scale * base_size,
/// centered at ((j + 0.5) * stride, (i + 0.5) * stride).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorAnchors {
    pub stride: usize,
    pub scales: Vec<f64>,
}

/// The per-detector anchor table. The default reproduces the four-head
/// configuration this detector family uses: strides 4/8/16/32 with square
/// anchor sides 16 / {24, 32} / {64, 128} / {256, 512} pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub base_size: f64,
    pub detectors: Vec<DetectorAnchors>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_size: 16.0,
            detectors: vec![
                DetectorAnchors { stride: 4, scales: vec![1.0] },
                DetectorAnchors { stride: 8, scales: vec![1.5, 2.0] },
                DetectorAnchors { stride: 16, scales: vec![4.0, 8.0] },
                DetectorAnchors { stride: 32, scales: vec![16.0, 32.0] },
            ],
        }
    }
}

/// Anchors for one detector over one image, in feature-cell row-major order
/// with the scale index fastest: anchor index = (i * W_f + j) * S + s.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub stride: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub num_scales: usize,
    pub boxes: Vec<BBox>,
}

pub fn tile_anchors(
    det: &DetectorAnchors,
    base_size: f64,
    image_w: usize,
    image_h: usize,
) -> Result<AnchorGrid> {
    if det.scales.is_empty() {
        return Err(Error::Config("anchor scales must be non-empty".into()));
    }
    if image_w < det.stride || image_h < det.stride {
        return Err(Error::Config(format!(
            "image {image_w}x{image_h} smaller than stride {}",
            det.stride
        )));
    }
    let feat_h = image_h.div_ceil(det.stride);
    let feat_w = image_w.div_ceil(det.stride);
    let mut boxes = Vec::with_capacity(feat_h * feat_w * det.scales.len());
    for i in 0..feat_h {
        let cy = (i as f64 + 0.5) * det.stride as f64;
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * det.stride as f64;
            for &scale in &det.scales {
                let side = scale * base_size;
                boxes.push(BBox::from_center(cx, cy, side, side));
            }
        }
    }
    Ok(AnchorGrid {
        stride: det.stride,
        feat_h,
        feat_w,
        num_scales: det.scales.len(),
        boxes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor matching outcome against one image's ground truth.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    /// Index of the argmax-IoU ground truth per anchor (meaningful for
    /// positives).
    pub matched_gt: Vec<usize>,
    pub max_iou: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Force the highest-IoU anchor for each ground truth positive, so tiny
    /// faces that clear neither threshold still get one positive anchor.
    pub force_best: bool,
    /// Treat the 0.3..0.5 mid-range as negative instead of ignore.
    pub mid_range_negative: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            pos_iou: 0.5,
            neg_iou: 0.3,
            force_best: true,
            mid_range_negative: false,
        }
    }
}

pub fn match_anchors(anchors: &[BBox], gts: &[BBox], cfg: &MatchConfig) -> MatchResult {
    let n = anchors.len();
    let mut max_iou = vec![0.0f64; n];
    let mut matched_gt = vec![0usize; n];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > max_iou[ai] {
                max_iou[ai] = v;
                matched_gt[ai] = gi;
            }
        }
    }
    let mut labels: Vec<Label> = max_iou
        .iter()
        .map(|&v| {
            if v > cfg.pos_iou {
                Label::Positive
            } else if v < cfg.neg_iou || cfg.mid_range_negative {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    if cfg.force_best {
        for gi in 0..gts.len() {
            let mut best_ai = None;
            let mut best = 0.0f64;
            for (ai, a) in anchors.iter().enumerate() {
                let v = iou(a, &gts[gi]);
                if v > best {
                    best = v;
                    best_ai = Some(ai);
                }
            }
            if let Some(ai) = best_ai {
                labels[ai] = Label::Positive;
                // matched_gt keeps the per-anchor argmax; for the forced
                // best anchor that argmax may be a different, even better
                // overlapping GT, which is the correct regression target.
            }
        }
    }
    MatchResult {
        labels,
        matched_gt,
        max_iou,
    }
}

/// Matches every detector's grid against the same ground truths, applying the
/// best-anchor rule across the union of all grids instead of once per grid.
/// Per-grid forcing would hand each ground truth a positive in every
/// detector, including hopeless ones (a 256 px anchor over a 20 px face,
/// IoU ~0.01), and those fabricated positives teach the coarse heads to fire
/// on anything. Across the union a ground truth claims only its single best
/// anchor; the threshold labels stay per anchor exactly as in
/// [`match_anchors`].
pub fn match_detectors(grids: &[AnchorGrid], gts: &[BBox], cfg: &MatchConfig) -> Vec<MatchResult> {
    let thresholds_only = MatchConfig {
        force_best: false,
        ..*cfg
    };
    let mut results: Vec<MatchResult> = grids
        .iter()
        .map(|g| match_anchors(&g.boxes, gts, &thresholds_only))
        .collect();
    if cfg.force_best {
        for gt in gts {
            let mut best: Option<(usize, usize)> = None;
            let mut best_v = 0.0f64;
            for (k, g) in grids.iter().enumerate() {
                for (ai, a) in g.boxes.iter().enumerate() {
                    let v = iou(a, gt);
                    if v > best_v {
                        best_v = v;
                        best = Some((k, ai));
                    }
                }
            }
            if let Some((k, ai)) = best {
                results[k].labels[ai] = Label::Positive;
            }
        }
    }
    results
}

/// Log-space / scale-invariant box regression offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<RegressionTarget> {
    if !anchor.is_valid() || !gt.is_valid() {
        return Err(Error::Config(format!(
            "encode requires valid boxes, got anchor {anchor:?}, gt {gt:?}"
        )));
    }
    Ok(RegressionTarget {
        tx: (gt.cx() - anchor.cx()) / anchor.w(),
        ty: (gt.cy() - anchor.cy()) / anchor.h(),
        tw: (gt.w() / anchor.w()).ln(),
        th: (gt.h() / anchor.h()).ln(),
    })
}

pub fn decode(anchor: &BBox, t: &RegressionTarget) -> BBox {
    let cx = anchor.cx() + t.tx * anchor.w();
    let cy = anchor.cy() + t.ty * anchor.h();
    let w = anchor.w() * t.tw.exp();
    let h = anchor.h() * t.th.exp();
    BBox::from_center(cx, cy, w, h)
}

/// Histogram of per-GT max IoU over the union of all detectors' anchors;
/// quantifies how well the anchor table covers a box population.
#[derive(Debug, Clone)]
pub struct OverlapStats {
    /// (bin_low, bin_high, count) over [0, 1] in 0.05 steps.
    pub bins: Vec<(f64, f64, usize)>,
    pub per_gt_max_iou: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

pub fn anchor_overlap_stats(
    gts_per_image: &[(usize, usize, Vec<BBox>)],
    config: &AnchorConfig,
) -> Result<OverlapStats> {
    let mut per_gt = Vec::new();
    for (w, h, gts) in gts_per_image {
        if gts.is_empty() {
            continue;
        }
        let mut all_anchors = Vec::new();
        for det in &config.detectors {
            all_anchors.extend(tile_anchors(det, config.base_size, *w, *h)?.boxes);
        }
        for g in gts {
            let best = all_anchors.iter().map(|a| iou(a, g)).fold(0.0f64, f64::max);
            per_gt.push(best);
        }
    }
    let mut bins: Vec<(f64, f64, usize)> = (0..20)
        .map(|i| (i as f64 * 0.05, (i + 1) as f64 * 0.05, 0))
        .collect();
    for &v in &per_gt {
        let idx = ((v / 0.05) as usize).min(19);
        bins[idx].2 += 1;
    }
    let mean = if per_gt.is_empty() {
        0.0
    } else {
        per_gt.iter().sum::<f64>() / per_gt.len() as f64
    };
    let median = {
        let mut sorted = per_gt.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            0.0
        } else {
            sorted[sorted.len() / 2]
        }
    };
    Ok(OverlapStats {
        bins,
        per_gt_max_iou: per_gt,
        mean,
        median,
    })
}
