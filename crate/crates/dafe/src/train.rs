//! Dataset preparation, the SGD training loop, and whole-image detection.
//!
//! Anchor matching, regression targets, and the ground-truth density map are
//! fixed per image, so they are computed once up front; OHEM selection depends
//! on the current scores and is redone every iteration. Images are reflection
//! padded to a multiple of 32 so every pooling stage divides evenly; anchors
//! and the density target live on the padded canvas, detections are clipped
//! back to the original bounds.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{
    encode, match_detectors, tile_anchors, AnchorGrid, BBox, Label, RegressionTarget,
};
use crate::density::{density_loss, generate_gt_density, FacePoint};
use crate::error::{Error, Result};
use crate::io::annotations::parse_annotations;
use crate::io::config::RunConfig;
use crate::io::model_file::save_model;
use crate::io::pgm::{read_image, Image};
use crate::loss::{box_loss, cls_loss, face_scores, ohem_select, total_loss};
use crate::network::{DetectionModel, DETECTOR_STRIDES};
use crate::ops::reflect_pad_to_multiple;
use crate::optim::OptimizerState;
use crate::postprocess::{postprocess, Detection, DetectorOutput};
use crate::tensor::Tensor;

/// One image with everything the loop reuses across iterations.
#[derive(Debug)]
pub struct Sample {
    pub name: String,
    /// Normalized input, reflection padded to a multiple of 32.
    pub image: Tensor,
    pub width: usize,
    pub height: usize,
    pub gts: Vec<BBox>,
    /// Per-detector anchor grids over the padded canvas.
    pub grids: Vec<AnchorGrid>,
    pub labels: Vec<Vec<Label>>,
    pub targets: Vec<Vec<Option<RegressionTarget>>>,
    /// Ground-truth density at stride 4 over the padded canvas.
    pub density_gt: Tensor,
}

/// Converts an image to the network's input tensor, averaging RGB down to
/// one plane when the model is single-channel.
pub fn image_to_input(img: &Image, in_channels: usize) -> Result<Tensor> {
    let t = img.to_tensor();
    if t.shape.c == in_channels {
        return Ok(t);
    }
    if t.shape.c == 3 && in_channels == 1 {
        let mut gray = Tensor::zeros(crate::tensor::Shape::new(1, 1, t.shape.h, t.shape.w));
        let plane = t.shape.h * t.shape.w;
        for k in 0..plane {
            gray.data[k] = (t.data[k] + t.data[plane + k] + t.data[2 * plane + k]) / 3.0;
        }
        return Ok(gray);
    }
    Err(Error::Config(format!(
        "image has {} channels but the model expects {in_channels}",
        t.shape.c
    )))
}

pub fn prepare_sample(name: &str, img: &Image, gts: Vec<BBox>, run: &RunConfig) -> Result<Sample> {
    let input = image_to_input(img, run.model.backbone.in_channels)?;
    let padded = reflect_pad_to_multiple(&input, 32);
    let (pw, ph) = (padded.shape.w, padded.shape.h);

    let mut grids = Vec::new();
    for det in &run.model.anchors.detectors {
        grids.push(tile_anchors(det, run.model.anchors.base_size, pw, ph)?);
    }
    let matches = match_detectors(&grids, &gts, &run.matching);
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
    let density_gt =
        generate_gt_density(&points, pw, ph, DETECTOR_STRIDES[0], &run.gaussian)?.to_tensor();

    Ok(Sample {
        name: name.to_string(),
        image: padded,
        width: img.w,
        height: img.h,
        gts,
        grids,
        labels,
        targets,
        density_gt,
    })
}

/// Loads every image listed in an annotation file (paths relative to the
/// annotation file's directory) and precomputes its training targets.
pub fn load_dataset(annot_path: &Path, run: &RunConfig) -> Result<Vec<Sample>> {
    let ann = parse_annotations(annot_path)?;
    let root = annot_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for rec in &ann.records {
        let img = read_image(&root.join(&rec.image_path))?;
        let gts: Vec<BBox> = rec.faces.iter().map(|f| f.bbox()).collect();
        samples.push(prepare_sample(&rec.image_path, &img, gts, run)?);
    }
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no images listed in {}",
            annot_path.display()
        )));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub l_cls: f64,
    pub l_box: f64,
    pub l_den: f64,
    pub lr: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iter,L_cls,L_box,L_den,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.l_cls, r.l_box, r.l_den, r.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Where the loop writes its artifacts; both optional so tests can train
/// entirely in memory.
#[derive(Debug, Default)]
pub struct TrainSinks {
    pub trace_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

struct StepLosses {
    l_cls: f64,
    l_box: f64,
    l_den: f64,
}

/// One forward/backward pass on one sample. Leaves gradients accumulated in
/// the parameter store; the caller applies the optimizer step.
fn train_step(model: &mut DetectionModel, sample: &Sample, run: &RunConfig) -> Result<StepLosses> {
    model.params.zero_grads();
    let fwd = model.forward(sample.image.clone())?;

    let mut seeds: Vec<(crate::graph::ValueId, Vec<f64>)> = Vec::new();
    let mut l_cls = 0.0;
    let mut l_box = 0.0;
    for k in 0..fwd.heads.len() {
        let ns = model.config.anchors.detectors[k].scales.len();
        let cls_t = fwd.tape.value(fwd.heads[k].cls);
        let scores = face_scores(cls_t, ns)?;
        let sel = ohem_select(&scores, &sample.labels[k], run.ohem);
        let (lc, gc) = cls_loss(cls_t, ns, &sample.labels[k], &sel)?;
        l_cls += lc;
        seeds.push((fwd.heads[k].cls, gc));
        if run.weights.lambda_box > 0.0 {
            let bbox_t = fwd.tape.value(fwd.heads[k].bbox);
            let (lb, mut gb) = box_loss(bbox_t, ns, &sample.targets[k], &sel)?;
            l_box += lb;
            gb.iter_mut().for_each(|g| *g *= run.weights.lambda_box);
            seeds.push((fwd.heads[k].bbox, gb));
        }
    }

    let mut l_den = 0.0;
    if run.weights.lambda_den > 0.0 {
        let den_t = fwd.tape.value(fwd.density);
        let (ld, mut gd) = density_loss(den_t, &sample.density_gt, run.density_loss)?;
        l_den = ld;
        gd.data.iter_mut().for_each(|g| *g *= run.weights.lambda_den);
        seeds.push((fwd.density, gd.data));
    }

    total_loss(l_cls, l_box, l_den, run.weights)?;
    fwd.tape.backward(&mut model.params, &seeds)?;
    Ok(StepLosses { l_cls, l_box, l_den })
}

/// Runs the full training loop: uniform random sample per iteration, OHEM
/// reselected every step, checkpoints at the learning-rate milestones and at
/// the end. Deterministic given the seed.
pub fn train(
    model: &mut DetectionModel,
    samples: &[Sample],
    run: &RunConfig,
    seed: u64,
    sinks: &TrainSinks,
) -> Result<Vec<TraceRow>> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &sinks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = OptimizerState::new(run.sgd.clone(), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config_text = run.to_text();
    let mut rows = Vec::with_capacity(run.train.iterations);
    for it in 0..run.train.iterations {
        let idx = rng.random_range(0..samples.len());
        let losses = train_step(model, &samples[idx], run)?;
        let lr = opt.lr();
        opt.step(&mut model.params)?;
        rows.push(TraceRow {
            iter: it + 1,
            l_cls: losses.l_cls,
            l_box: losses.l_box,
            l_den: losses.l_den,
            lr,
        });
        if let Some(dir) = &sinks.checkpoint_dir {
            if run.sgd.milestones.contains(&(it + 1)) {
                let path = dir.join(format!("model_iter{:05}.bin", it + 1));
                save_model(&path, &config_text, &model.params)?;
            }
        }
    }
    if let Some(dir) = &sinks.checkpoint_dir {
        save_model(&dir.join("model_final.bin"), &config_text, &model.params)?;
    }
    if let Some(path) = &sinks.trace_path {
        write_trace_csv(path, &rows)?;
    }
    Ok(rows)
}

/// Runs the detector on one prepared sample and returns detections in
/// original image coordinates.
pub fn detect_sample(
    model: &DetectionModel,
    sample: &Sample,
    run: &RunConfig,
) -> Result<Vec<Detection>> {
    let fwd = model.forward(sample.image.clone())?;
    let outputs: Vec<DetectorOutput> = (0..fwd.heads.len())
        .map(|k| DetectorOutput {
            cls: fwd.tape.value(fwd.heads[k].cls),
            bbox: fwd.tape.value(fwd.heads[k].bbox),
            grid: &sample.grids[k],
        })
        .collect();
    postprocess(&outputs, sample.width, sample.height, &run.post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::TrainConfig;
    use crate::io::model_file::{apply_params, load_model};
    use crate::io::synth::{gen_synthetic, SynthConfig};
    use crate::network::{BackboneConfig, ModelConfig};

    fn tiny_run(iterations: usize) -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                widths: vec![2, 3, 4, 5, 5],
                convs_per_block: 1,
            },
            estimator: crate::density::EstimatorConfig {
                reduce_channels: 2,
                conv_channels: 2,
            },
            pyramid: crate::network::PyramidConfig {
                channels: 6,
                relu_after_sum: true,
            },
            context: crate::network::ContextConfig {
                enabled: true,
                dilations: vec![1, 2],
                branch_width: 3,
                residual: false,
            },
            ..ModelConfig::default()
        };
        run.sgd.base_lr = 0.01;
        run.sgd.milestones = vec![iterations.saturating_sub(2).max(1)];
        run.train = TrainConfig { iterations };
        run
    }

    fn tiny_corpus(n: usize, seed: u64) -> (tempfile::TempDir, Vec<Sample>, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_images: n,
            width: 64,
            height: 64,
            min_faces: 1,
            max_faces: 3,
            min_size: 12.0,
            max_size: 32.0,
            ..SynthConfig::default()
        };
        let annots = gen_synthetic(dir.path(), &cfg, seed).unwrap();
        let run = tiny_run(40);
        let samples = load_dataset(&annots, &run).unwrap();
        (dir, samples, run)
    }

    #[test]
    fn loss_decreases_when_overfitting_one_image() {
        let (_dir, samples, mut run) = tiny_corpus(1, 11);
        run.train.iterations = 300;
        run.sgd.milestones = vec![280];
        let mut model = DetectionModel::new(run.model.clone(), 3).unwrap();
        let rows = train(&mut model, &samples, &run, 5, &TrainSinks::default()).unwrap();
        let total = |r: &TraceRow| r.l_cls + r.l_box + r.l_den;
        let first = total(&rows[0]);
        let last = total(rows.last().unwrap());
        assert!(
            last < 0.5 * first,
            "expected clear overfit: first {first}, last {last}"
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_traces() {
        let (_dir, samples, mut run) = tiny_corpus(2, 21);
        run.train.iterations = 8;
        let run_once = || {
            let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
            train(&mut model, &samples, &run, 17, &TrainSinks::default()).unwrap()
        };
        let a = run_once();
        let b = run_once();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.l_cls.to_bits(), y.l_cls.to_bits());
            assert_eq!(x.l_box.to_bits(), y.l_box.to_bits());
            assert_eq!(x.l_den.to_bits(), y.l_den.to_bits());
        }
    }

    #[test]
    fn lambda_den_zero_skips_density_loss() {
        let (_dir, samples, mut run) = tiny_corpus(1, 31);
        run.train.iterations = 4;
        run.weights.lambda_den = 0.0;
        let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
        let rows = train(&mut model, &samples, &run, 1, &TrainSinks::default()).unwrap();
        assert!(rows.iter().all(|r| r.l_den == 0.0));

        run.weights.lambda_den = 1.0;
        let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
        let rows = train(&mut model, &samples, &run, 1, &TrainSinks::default()).unwrap();
        assert!(rows.iter().any(|r| r.l_den != 0.0));
    }

    #[test]
    fn detector_gradients_stop_at_the_fusion_boundary() {
        let (_dir, samples, mut run) = tiny_corpus(1, 51);
        run.weights.lambda_den = 0.0;
        let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
        train_step(&mut model, &samples[0], &run).unwrap();
        for id in model.params.ids().collect::<Vec<_>>() {
            if !model.params.name(id).starts_with("estimator.") {
                continue;
            }
            let g = model.params.get(id).grad.as_deref().unwrap_or(&[]);
            assert!(
                g.iter().all(|&v| v == 0.0),
                "{} received detector gradient",
                model.params.name(id)
            );
        }
        // The fusion scale still trains from the detector side: it consumes
        // the density map as data.
        let alpha = model.params.by_name("fusion.alpha").unwrap();
        assert_ne!(model.params.get(alpha).grad.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn density_weight_scales_estimator_gradients_linearly() {
        let (_dir, samples, run) = tiny_corpus(1, 61);
        let grads_at = |lambda: f64| {
            let mut run = run.clone();
            run.weights.lambda_den = lambda;
            let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
            train_step(&mut model, &samples[0], &run).unwrap();
            let mut est = Vec::new();
            for id in model.params.ids().collect::<Vec<_>>() {
                if model.params.name(id).starts_with("estimator.") {
                    est.extend_from_slice(model.params.get(id).grad.as_ref().unwrap());
                }
            }
            let alpha = model.params.by_name("fusion.alpha").unwrap();
            (est, model.params.get(alpha).grad.as_ref().unwrap()[0])
        };
        let (e1, a1) = grads_at(1.0);
        let (e2, a2) = grads_at(2.0);
        assert!(e1.iter().any(|&g| g != 0.0));
        for (g1, g2) in e1.iter().zip(&e2) {
            assert!(
                (g2 - 2.0 * g1).abs() <= 1e-12 * g1.abs().max(1e-12),
                "estimator gradient not linear in the density weight: {g1} vs {g2}"
            );
        }
        // Detector-side gradients never depend on the density weight.
        assert_eq!(a1.to_bits(), a2.to_bits());
    }

    #[test]
    fn checkpoints_written_at_milestones_and_end() {
        let (_dir, samples, mut run) = tiny_corpus(1, 41);
        run.train.iterations = 6;
        run.sgd.milestones = vec![3, 5];
        let out = tempfile::tempdir().unwrap();
        let sinks = TrainSinks {
            trace_path: Some(out.path().join("trace.csv")),
            checkpoint_dir: Some(out.path().to_path_buf()),
        };
        let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
        train(&mut model, &samples, &run, 1, &sinks).unwrap();
        assert!(out.path().join("model_iter00003.bin").exists());
        assert!(out.path().join("model_iter00005.bin").exists());
        assert!(out.path().join("model_final.bin").exists());

        let trace = std::fs::read_to_string(out.path().join("trace.csv")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next().unwrap(), "iter,L_cls,L_box,L_den,lr");
        assert_eq!(lines.count(), 6);

        let loaded = load_model(&out.path().join("model_final.bin")).unwrap();
        assert_eq!(loaded.config_text, run.to_text());
        let mut fresh = DetectionModel::new(run.model.clone(), 9).unwrap();
        apply_params(&loaded, &mut fresh.params).unwrap();
        for id in model.params.ids() {
            let want: Vec<f64> = model
                .params
                .get(id)
                .data
                .iter()
                .map(|&v| (v as f32) as f64)
                .collect();
            assert_eq!(fresh.params.get(id).data, want);
        }
    }

    #[test]
    fn detect_sample_runs_and_clips_to_original_bounds() {
        let (_dir, samples, mut run) = tiny_corpus(1, 51);
        run.train.iterations = 30;
        run.post.score_threshold = 0.0;
        run.post.topk = 50;
        let mut model = DetectionModel::new(run.model.clone(), 9).unwrap();
        train(&mut model, &samples, &run, 3, &TrainSinks::default()).unwrap();
        let dets = detect_sample(&model, &samples[0], &run).unwrap();
        for d in &dets {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.y1 >= 0.0);
            assert!(d.bbox.x2 <= samples[0].width as f64);
            assert!(d.bbox.y2 <= samples[0].height as f64);
            assert!((1..=4).contains(&d.detector));
        }
    }

    #[test]
    fn dataset_loading_precomputes_consistent_shapes() {
        let (_dir, samples, run) = tiny_corpus(3, 61);
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.image.shape.h % 32, 0);
            assert_eq!(s.image.shape.w % 32, 0);
            assert_eq!(s.grids.len(), 4);
            for (k, g) in s.grids.iter().enumerate() {
                assert_eq!(g.stride, DETECTOR_STRIDES[k]);
                assert_eq!(g.boxes.len(), s.labels[k].len());
                assert_eq!(g.boxes.len(), s.targets[k].len());
            }
            assert_eq!(s.density_gt.shape.h, s.image.shape.h / 4);
            assert_eq!(s.density_gt.shape.w, s.image.shape.w / 4);
            let mass: f64 = s.density_gt.data.iter().sum();
            assert!((mass - s.gts.len() as f64).abs() < 1e-6);
            let pos: usize = s
                .labels
                .iter()
                .flatten()
                .filter(|&&l| l == Label::Positive)
                .count();
            assert!(pos >= s.gts.len(), "every face needs at least one anchor");
        }
        let _ = run;
    }
}
