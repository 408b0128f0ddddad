//! Single-class average precision at an IoU threshold, plus PR-curve export
//! as CSV and SVG.

use std::io::Write;
use std::path::Path;

use crate::anchors::{iou, BBox};
use crate::error::{Error, Result};
use crate::postprocess::Detection;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Score of the detection that produced this point; accepting every
    /// detection at or above it reproduces the point.
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub pr_points: Vec<PrPoint>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
    /// Set when no image carried any ground truth; ap is 0 by definition.
    pub no_ground_truth: bool,
}

/// Global descending-score sweep. Each detection greedily claims the
/// unmatched ground-truth box in its image with the highest IoU; a claim at
/// or above `iou_thr` is a true positive, anything else a false positive.
/// AP integrates the precision envelope over recall (all-point
/// interpolation). Ties in score break by (image, detection) order.
pub fn ap_at_iou(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<BBox>],
    iou_thr: f64,
) -> EvalReport {
    assert_eq!(
        dets_per_image.len(),
        gts_per_image.len(),
        "detections and ground truth must cover the same images"
    );
    let num_gt: usize = gts_per_image.iter().map(|g| g.len()).sum();
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for d in 0..dets.len() {
            flat.push((img, d));
        }
    }
    flat.sort_by(|&(ia, da), &(ib, db)| {
        let sa = dets_per_image[ia][da].score;
        let sb = dets_per_image[ib][db].score;
        sb.total_cmp(&sa).then(ia.cmp(&ib)).then(da.cmp(&db))
    });

    let mut matched: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(flat.len());
    for &(img, di) in &flat {
        let det = &dets_per_image[img][di];
        let gts = &gts_per_image[img];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &gt) in gts.iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thr => {
                matched[img][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        if num_gt > 0 {
            points.push(PrPoint {
                recall: tp as f64 / num_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
                score_threshold: det.score,
            });
        }
    }

    let ap = if num_gt == 0 { 0.0 } else { all_point_ap(&points) };
    EvalReport {
        ap,
        pr_points: points,
        true_positives: tp,
        false_positives: fp,
        num_gt,
        no_ground_truth: num_gt == 0,
    }
}

/// Area under the precision envelope: for each recall level the best
/// precision achieved at that recall or beyond.
fn all_point_ap(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut env = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        env[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &e) in points.iter().zip(&env) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    ap
}

/// CSV with columns recall, precision, score_threshold; header always
/// written. Values use the shortest exact decimal form, so a re-parse
/// reproduces them bit for bit.
pub fn write_pr_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("recall,precision,score_threshold\n");
    for p in &report.pr_points {
        out.push_str(&format!("{},{},{}\n", p.recall, p.precision, p.score_threshold));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<PrPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("recall,precision,score_threshold") => {}
        _ => return Err(Error::parse(path, "missing pr csv header")),
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, format!("line {}: expected 3 fields", n + 2)));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 2)))
        };
        points.push(PrPoint {
            recall: parse(fields[0])?,
            precision: parse(fields[1])?,
            score_threshold: parse(fields[2])?,
        });
    }
    Ok(points)
}

/// Minimal standalone SVG: axes, tick labels at 0 and 1, and the PR curve
/// as one polyline.
pub fn write_pr_svg(report: &EvalReport, path: &Path) -> Result<()> {
    let (w, h) = (440.0, 440.0);
    let (x0, y0, x1, y1) = (60.0, 380.0, 420.0, 20.0);
    let px = |r: f64| x0 + r * (x1 - x0);
    let py = |p: f64| y0 + p * (y1 - y0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\">recall</text>\n",
        (x0 + x1) / 2.0 - 18.0,
        y0 + 32.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 {} {})\">precision</text>\n",
        x0 - 40.0,
        (y0 + y1) / 2.0,
        x0 - 40.0,
        (y0 + y1) / 2.0
    ));
    for v in [0.0, 0.5, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\">{v}</text>\n",
            px(v) - 6.0,
            y0 + 14.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\">{v}</text>\n",
            x0 - 24.0,
            py(v) + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\">AP = {:.4}</text>\n",
        x1 - 90.0,
        y1 + 14.0,
        report.ap
    ));
    if !report.pr_points.is_empty() {
        let mut pts = String::new();
        for p in &report.pr_points {
            pts.push_str(&format!("{:.2},{:.2} ", px(p.recall), py(p.precision)));
        }
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.trim_end()
        ));
    }
    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(svg.as_bytes()).map_err(|e| Error::io(path, e))
}
