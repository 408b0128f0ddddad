//! Hard-example selection and the three training losses.
//!
//! Head outputs are NCHW tensors whose anchor layout is scale-major:
//! anchor index a = (i * W + j) * S + s, class logits for scale s at
//! channels (2s, 2s+1) = (background, face), box deltas at 4s..4s+4.
//! Loss functions return the scalar together with a gradient buffer in the
//! same layout as the head tensor, ready to seed the tape backward pass.

use crate::anchors::{Label, RegressionTarget};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Joint per-detector budget across positives and negatives.
    pub budget: usize,
    /// Fraction of the budget positives may occupy.
    pub max_pos_fraction: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            budget: 256,
            max_pos_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_den: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_box: 1.0,
            lambda_den: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_box < 0.0 || self.lambda_den < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anchors one detector contributes to the loss this iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectedAnchors {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl SelectedAnchors {
    /// Classification normalizer: every selected anchor.
    pub fn n_cls(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    /// Regression normalizer: selected positives only.
    pub fn n_reg(&self) -> usize {
        self.positives.len()
    }
}

/// Picks the hardest examples: positives with the lowest face scores
/// (ascending), then negatives with the highest (descending), under a joint
/// budget with the positive share capped. Ignore-labeled anchors never
/// participate. Ties break toward the lower anchor index.
pub fn ohem_select(face_scores: &[f64], labels: &[Label], cfg: OhemConfig) -> SelectedAnchors {
    assert_eq!(
        face_scores.len(),
        labels.len(),
        "one score per anchor label"
    );
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Label::Positive => positives.push(i),
            Label::Negative => negatives.push(i),
            Label::Ignore => {}
        }
    }
    positives.sort_by(|&a, &b| face_scores[a].total_cmp(&face_scores[b]).then(a.cmp(&b)));
    negatives.sort_by(|&a, &b| face_scores[b].total_cmp(&face_scores[a]).then(a.cmp(&b)));
    let pos_cap = (cfg.budget as f64 * cfg.max_pos_fraction).floor() as usize;
    positives.truncate(pos_cap);
    negatives.truncate(cfg.budget.saturating_sub(positives.len()));
    SelectedAnchors {
        positives,
        negatives,
    }
}

fn head_dims(t: &Tensor, per_anchor: usize, num_scales: usize, n_anchors: usize) -> Result<(usize, usize)> {
    let s = t.shape;
    if s.n != 1 || s.c != per_anchor * num_scales {
        return Err(Error::Shape(format!(
            "head tensor {s} does not carry {per_anchor}x{num_scales} channels"
        )));
    }
    if s.h * s.w * num_scales != n_anchors {
        return Err(Error::Shape(format!(
            "head tensor {s} covers {} anchors, labels cover {n_anchors}",
            s.h * s.w * num_scales
        )));
    }
    Ok((s.h, s.w))
}

fn anchor_cell(a: usize, num_scales: usize, w: usize) -> (usize, usize, usize) {
    let s = a % num_scales;
    let cell = a / num_scales;
    (cell / w, cell % w, s)
}

/// Post-softmax face probability per anchor, the OHEM hardness signal.
pub fn face_scores(cls: &Tensor, num_scales: usize) -> Result<Vec<f64>> {
    let s = cls.shape;
    if s.n != 1 || s.c != 2 * num_scales {
        return Err(Error::Shape(format!(
            "classification tensor {s} does not carry 2x{num_scales} channels"
        )));
    }
    let (h, w) = (s.h, s.w);
    let mut out = Vec::with_capacity(h * w * num_scales);
    for i in 0..h {
        for j in 0..w {
            for sc in 0..num_scales {
                let zb = cls.data[(2 * sc * h + i) * w + j];
                let zf = cls.data[((2 * sc + 1) * h + i) * w + j];
                // stable two-class softmax
                let m = zb.max(zf);
                let eb = (zb - m).exp();
                let ef = (zf - m).exp();
                out.push(ef / (eb + ef));
            }
        }
    }
    Ok(out)
}

/// Softmax cross-entropy over the selected anchors, averaged over the
/// selection. Returns the scalar and the gradient w.r.t. the logits. An
/// empty selection contributes zero.
pub fn cls_loss(
    cls: &Tensor,
    num_scales: usize,
    labels: &[Label],
    sel: &SelectedAnchors,
) -> Result<(f64, Vec<f64>)> {
    let (h, w) = head_dims(cls, 2, num_scales, labels.len())?;
    let mut grad = vec![0.0; cls.data.len()];
    let n = sel.n_cls();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (&a, face) in sel
        .positives
        .iter()
        .map(|a| (a, true))
        .chain(sel.negatives.iter().map(|a| (a, false)))
    {
        debug_assert_eq!(
            labels[a],
            if face { Label::Positive } else { Label::Negative }
        );
        let (i, j, sc) = anchor_cell(a, num_scales, w);
        let off_b = (2 * sc * h + i) * w + j;
        let off_f = ((2 * sc + 1) * h + i) * w + j;
        let (zb, zf) = (cls.data[off_b], cls.data[off_f]);
        let m = zb.max(zf);
        let eb = (zb - m).exp();
        let ef = (zf - m).exp();
        let z = eb + ef;
        let (pb, pf) = (eb / z, ef / z);
        let lse = m + z.ln();
        loss += inv_n * (lse - if face { zf } else { zb });
        grad[off_b] += inv_n * (pb - if face { 0.0 } else { 1.0 });
        grad[off_f] += inv_n * (pf - if face { 1.0 } else { 0.0 });
    }
    Ok((loss, grad))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 over the four delta components of the selected positives,
/// averaged over the positive count. `targets` is indexed by anchor; every
/// selected positive must have one.
pub fn box_loss(
    bbox: &Tensor,
    num_scales: usize,
    targets: &[Option<RegressionTarget>],
    sel: &SelectedAnchors,
) -> Result<(f64, Vec<f64>)> {
    let (h, w) = head_dims(bbox, 4, num_scales, targets.len())?;
    let mut grad = vec![0.0; bbox.data.len()];
    let n = sel.n_reg();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for &a in &sel.positives {
        let t = targets[a].ok_or_else(|| {
            Error::Shape(format!("selected positive anchor {a} has no regression target"))
        })?;
        let (i, j, sc) = anchor_cell(a, num_scales, w);
        for (comp, want) in [t.tx, t.ty, t.tw, t.th].into_iter().enumerate() {
            let off = ((4 * sc + comp) * h + i) * w + j;
            let r = bbox.data[off] - want;
            loss += inv_n * smooth_l1(r);
            grad[off] += inv_n * smooth_l1_grad(r);
        }
    }
    Ok((loss, grad))
}

/// Weighted sum of the three components. Non-finite inputs abort the step.
pub fn total_loss(cls: f64, bbox: f64, den: f64, w: LossWeights) -> Result<f64> {
    let total = cls + w.lambda_box * bbox + w.lambda_den * den;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: cls={cls} box={bbox} den={den}"
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_of(pos: &[usize], neg: &[usize], n: usize) -> Vec<Label> {
        let mut l = vec![Label::Ignore; n];
        for &i in pos {
            l[i] = Label::Positive;
        }
        for &i in neg {
            l[i] = Label::Negative;
        }
        l
    }

    #[test]
    fn ohem_under_budget_takes_everything() {
        let n = 32;
        let pos: Vec<usize> = (0..5).collect();
        let neg: Vec<usize> = (10..20).collect();
        let labels = labels_of(&pos, &neg, n);
        let scores: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let sel = ohem_select(&scores, &labels, OhemConfig::default());
        assert_eq!(sel.n_reg(), 5);
        assert_eq!(sel.negatives.len(), 10);
        let mut p = sel.positives.clone();
        p.sort();
        assert_eq!(p, pos);
    }

    #[test]
    fn ohem_caps_positives_and_fills_with_hard_negatives() {
        let n = 600;
        let pos: Vec<usize> = (0..200).collect();
        let neg: Vec<usize> = (200..600).collect();
        let labels = labels_of(&pos, &neg, n);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let sel = ohem_select(&scores, &labels, OhemConfig::default());
        assert_eq!(sel.positives.len(), 128);
        assert_eq!(sel.negatives.len(), 128);

        // Sorting oracle: selected positives are exactly the 128 lowest.
        let mut by_score = pos.clone();
        by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let mut want: Vec<usize> = by_score[..128].to_vec();
        want.sort();
        let mut got = sel.positives.clone();
        got.sort();
        assert_eq!(got, want);

        // Hardness invariants.
        let sel_pos_max = sel.positives.iter().map(|&a| scores[a]).fold(f64::MIN, f64::max);
        for &a in &pos {
            if !sel.positives.contains(&a) {
                assert!(scores[a] >= sel_pos_max);
            }
        }
        let sel_neg_min = sel.negatives.iter().map(|&a| scores[a]).fold(f64::MAX, f64::min);
        for &a in &neg {
            if !sel.negatives.contains(&a) {
                assert!(scores[a] <= sel_neg_min);
            }
        }
    }

    #[test]
    fn ohem_excludes_ignore_and_breaks_ties_by_index() {
        let labels = vec![
            Label::Negative,
            Label::Ignore,
            Label::Negative,
            Label::Negative,
        ];
        let scores = vec![0.5, 0.9, 0.5, 0.5];
        let sel = ohem_select(
            &scores,
            &labels,
            OhemConfig {
                budget: 2,
                max_pos_fraction: 0.5,
            },
        );
        assert_eq!(sel.negatives, vec![0, 2]);

        let all_ignore = vec![Label::Ignore; 4];
        let sel = ohem_select(&scores, &all_ignore, OhemConfig::default());
        assert_eq!(sel.n_cls(), 0);
    }

    #[test]
    fn cls_loss_uniform_logits_is_ln2() {
        let cls = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let labels = vec![Label::Negative; 4];
        let sel = SelectedAnchors {
            positives: vec![],
            negatives: vec![0, 1, 2, 3],
        };
        let (loss, _) = cls_loss(&cls, 1, &labels, &sel).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_confident_correct_vanishes() {
        let mut cls = Tensor::zeros(Shape::new(1, 2, 1, 1));
        cls.data[0] = -20.0;
        cls.data[1] = 20.0;
        let labels = vec![Label::Positive];
        let sel = SelectedAnchors {
            positives: vec![0],
            negatives: vec![],
        };
        let (loss, _) = cls_loss(&cls, 1, &labels, &sel).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn cls_loss_mean_semantics_survive_duplication() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let w = 6;
        let cls = Tensor::from_vec(
            Shape::new(1, 2, 1, w),
            (0..2 * w).map(|_| r.random_range(-2.0..2.0)).collect(),
        );
        let labels: Vec<Label> = (0..w)
            .map(|i| if i % 2 == 0 { Label::Positive } else { Label::Negative })
            .collect();
        let sel = SelectedAnchors {
            positives: vec![0, 2, 4],
            negatives: vec![1, 3, 5],
        };
        let (loss, _) = cls_loss(&cls, 1, &labels, &sel).unwrap();

        // Same anchors laid out twice in a doubled tensor.
        let mut data2 = vec![0.0; 2 * 2 * w];
        for c in 0..2 {
            for j in 0..w {
                data2[c * 2 * w + j] = cls.data[c * w + j];
                data2[c * 2 * w + w + j] = cls.data[c * w + j];
            }
        }
        let cls2 = Tensor::from_vec(Shape::new(1, 2, 1, 2 * w), data2);
        let labels2: Vec<Label> = labels.iter().chain(labels.iter()).copied().collect();
        let sel2 = SelectedAnchors {
            positives: vec![0, 2, 4, 6, 8, 10],
            negatives: vec![1, 3, 5, 7, 9, 11],
        };
        let (loss2, _) = cls_loss(&cls2, 1, &labels2, &sel2).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_closed_forms() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert!((smooth_l1(0.5) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0) - 1.5).abs() < 1e-15);
        assert!((smooth_l1(-2.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_c1_at_the_kink() {
        for kink in [1.0f64, -1.0] {
            let eps = 1e-10;
            let inside = kink - kink.signum() * eps;
            let outside = kink + kink.signum() * eps;
            assert!((smooth_l1(inside) - 0.5).abs() < 1e-9);
            assert!((smooth_l1(outside) - 0.5).abs() < 1e-9);
            assert!((smooth_l1_grad(inside) - smooth_l1_grad(outside)).abs() < 1e-9);
        }
    }

    #[test]
    fn box_loss_zero_residual_and_closed_forms() {
        let t = RegressionTarget {
            tx: 0.1,
            ty: -0.2,
            tw: 0.3,
            th: 0.0,
        };
        let mut bbox = Tensor::zeros(Shape::new(1, 4, 1, 1));
        bbox.data.copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let sel = SelectedAnchors {
            positives: vec![0],
            negatives: vec![],
        };
        let (loss, _) = box_loss(&bbox, 1, &[Some(t)], &sel).unwrap();
        assert_eq!(loss, 0.0);

        bbox.data[0] = 0.6; // residual 0.5
        let (loss, _) = box_loss(&bbox, 1, &[Some(t)], &sel).unwrap();
        assert!((loss - 0.125).abs() < 1e-12);

        bbox.data[0] = 2.1; // residual 2.0
        let (loss, _) = box_loss(&bbox, 1, &[Some(t)], &sel).unwrap();
        assert!((loss - 1.5).abs() < 1e-12);
    }

    #[test]
    fn box_loss_without_target_for_positive_fails() {
        let bbox = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let sel = SelectedAnchors {
            positives: vec![0],
            negatives: vec![],
        };
        assert!(box_loss(&bbox, 1, &[None], &sel).is_err());
    }

    #[test]
    fn cls_grad_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let (h, w, s) = (3, 4, 2);
        let cls = Tensor::from_vec(
            Shape::new(1, 2 * s, h, w),
            (0..2 * s * h * w).map(|_| r.random_range(-1.5..1.5)).collect(),
        );
        let n = h * w * s;
        let labels: Vec<Label> = (0..n)
            .map(|i| match i % 3 {
                0 => Label::Positive,
                1 => Label::Negative,
                _ => Label::Ignore,
            })
            .collect();
        let scores = face_scores(&cls, s).unwrap();
        let sel = ohem_select(&scores, &labels, OhemConfig { budget: 10, max_pos_fraction: 0.5 });
        let (_, grad) = cls_loss(&cls, s, &labels, &sel).unwrap();
        let eps = 1e-6;
        for k in 0..cls.data.len() {
            let mut p = cls.clone();
            p.data[k] += eps;
            let (lp, _) = cls_loss(&p, s, &labels, &sel).unwrap();
            p.data[k] -= 2.0 * eps;
            let (lm, _) = cls_loss(&p, s, &labels, &sel).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            assert!(
                (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-12) < 1e-4
                    || (grad[k] - num).abs() < 1e-9,
                "coord {k}: analytic {} vs numeric {num}",
                grad[k]
            );
        }
    }

    #[test]
    fn box_grad_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let (h, w, s) = (2, 3, 2);
        let bbox = Tensor::from_vec(
            Shape::new(1, 4 * s, h, w),
            (0..4 * s * h * w)
                .map(|_| {
                    // keep residuals away from the |x| = 1 kink
                    let v: f64 = r.random_range(-0.8..0.8);
                    if v.abs() > 0.45 { v * 3.0 } else { v }
                })
                .collect(),
        );
        let n = h * w * s;
        let targets: Vec<Option<RegressionTarget>> = (0..n)
            .map(|_| {
                Some(RegressionTarget {
                    tx: 0.0,
                    ty: 0.0,
                    tw: 0.0,
                    th: 0.0,
                })
            })
            .collect();
        let sel = SelectedAnchors {
            positives: (0..n).step_by(2).collect(),
            negatives: vec![],
        };
        let (_, grad) = box_loss(&bbox, s, &targets, &sel).unwrap();
        let eps = 1e-6;
        for k in 0..bbox.data.len() {
            let mut p = bbox.clone();
            p.data[k] += eps;
            let (lp, _) = box_loss(&p, s, &targets, &sel).unwrap();
            p.data[k] -= 2.0 * eps;
            let (lm, _) = box_loss(&p, s, &targets, &sel).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            assert!(
                (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-12) < 1e-4
                    || (grad[k] - num).abs() < 1e-9
            );
        }
    }

    #[test]
    fn total_loss_arithmetic_and_abort() {
        let w = LossWeights {
            lambda_box: 2.0,
            lambda_den: 0.5,
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, w).unwrap(), 6.5);
        let zero_den = LossWeights {
            lambda_box: 1.0,
            lambda_den: 0.0,
        };
        assert_eq!(total_loss(1.0, 2.0, 999.0, zero_den).unwrap(), 3.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, w).is_err());
        assert!(total_loss(0.0, f64::INFINITY, 0.0, w).is_err());
    }

    #[test]
    fn face_scores_layout_matches_anchor_indexing() {
        // Put a hot face logit at one spatial cell of scale 1 and verify the
        // score lands at the expected anchor index.
        let (h, w, s) = (2, 3, 2);
        let mut cls = Tensor::zeros(Shape::new(1, 2 * s, h, w));
        let (i, j, sc) = (1, 2, 1);
        cls.data[((2 * sc + 1) * h + i) * w + j] = 10.0;
        let scores = face_scores(&cls, s).unwrap();
        let a = (i * w + j) * s + sc;
        for (k, &v) in scores.iter().enumerate() {
            if k == a {
                assert!(v > 0.99);
            } else {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }
}
