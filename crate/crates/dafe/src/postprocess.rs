//! From head tensors to detection lists: per-detector top-k selection,
//! delta decoding against tiled anchors, clipping, greedy NMS, and a score
//! floor.

use crate::anchors::{decode, iou, AnchorGrid, BBox, RegressionTarget};
use crate::error::{Error, Result};
use crate::loss::face_scores;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// 1-based detector index (stride 4/8/16/32 order).
    pub detector: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessConfig {
    pub topk: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Suppress within each detector before pooling instead of jointly.
    pub nms_per_detector: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            topk: 1000,
            nms_iou: 0.3,
            score_threshold: 0.01,
            nms_per_detector: false,
        }
    }
}

/// Greedy descending-score suppression. Returns indices into the input,
/// best first; ties break toward the lower index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    let mut alive = vec![true; boxes.len()];
    for &i in &order {
        if !alive[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if alive[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_thr {
                alive[j] = false;
            }
        }
    }
    kept
}

/// One detector's raw outputs plus the anchor grid they were produced over.
pub struct DetectorOutput<'a> {
    pub cls: &'a Tensor,
    pub bbox: &'a Tensor,
    pub grid: &'a AnchorGrid,
}

fn decode_detector(
    out: &DetectorOutput,
    detector: usize,
    image_w: usize,
    image_h: usize,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let s = out.grid.num_scales;
    let scores = face_scores(out.cls, s)?;
    if scores.len() != out.grid.boxes.len() {
        return Err(Error::Shape(format!(
            "detector {detector}: {} anchors tiled, {} scored",
            out.grid.boxes.len(),
            scores.len()
        )));
    }
    let bs = out.bbox.shape;
    if bs.c != 4 * s || bs.h != out.grid.feat_h || bs.w != out.grid.feat_w {
        return Err(Error::Shape(format!(
            "detector {detector}: box tensor {bs} does not match a {}x{} grid with {s} scales",
            out.grid.feat_h, out.grid.feat_w
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(cfg.topk);
    let (h, w) = (bs.h, bs.w);
    let mut dets = Vec::new();
    for &a in &order {
        if scores[a] < cfg.score_threshold {
            continue;
        }
        let sc = a % s;
        let cell = a / s;
        let (i, j) = (cell / w, cell % w);
        let off = |comp: usize| ((4 * sc + comp) * h + i) * w + j;
        let t = RegressionTarget {
            tx: out.bbox.data[off(0)],
            ty: out.bbox.data[off(1)],
            tw: out.bbox.data[off(2)],
            th: out.bbox.data[off(3)],
        };
        let decoded = decode(&out.grid.boxes[a], &t).clip(image_w as f64, image_h as f64);
        if !decoded.is_valid() {
            continue;
        }
        dets.push(Detection {
            bbox: decoded,
            score: scores[a],
            detector,
        });
    }
    Ok(dets)
}

fn nms_filter(dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, iou_thr)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Full post-processing for one image: per-detector top-k and decode, then
/// suppression (joint by default), score-sorted output.
pub fn postprocess(
    outputs: &[DetectorOutput],
    image_w: usize,
    image_h: usize,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let mut pooled = Vec::new();
    for (k, out) in outputs.iter().enumerate() {
        let mut dets = decode_detector(out, k + 1, image_w, image_h, cfg)?;
        if cfg.nms_per_detector {
            dets = nms_filter(dets, cfg.nms_iou);
        }
        pooled.extend(dets);
    }
    if !cfg.nms_per_detector {
        pooled = nms_filter(pooled, cfg.nms_iou);
    } else {
        pooled.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(pooled)
}
