use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dafe::anchors::{anchor_overlap_stats, BBox};
use dafe::density::{generate_gt_density, FacePoint, GaussianSpec, SigmaMode};
use dafe::error::{Error, Result};
use dafe::eval::{ap_at_iou, write_pr_csv, write_pr_svg};
use dafe::gradcheck::run_suite;
use dafe::io::annotations::parse_annotations;
use dafe::io::config::RunConfig;
use dafe::io::detections::{group_by_image, read_detections, write_detections, DetectionRecord};
use dafe::io::model_file::{apply_params, load_model};
use dafe::io::pgm::{gray_from_map, read_image, write_image};
use dafe::io::synth::{gen_synthetic, SynthConfig};
use dafe::network::{DetectionModel, DETECTOR_STRIDES};
use dafe::train::{detect_sample, load_dataset, train, TrainSinks};

#[derive(Parser)]
#[command(
    name = "dafe",
    version,
    about = "Density-aware face detector: synthesis, training, detection, evaluation"
)]
struct Cli {
    /// Seed for anything randomized (init, sampling, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Key=value run configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic disk-face corpus: PGM images plus annotations.
    GenSynth {
        /// Output directory for images and annotations.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_images: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        min_faces: usize,
        #[arg(long, default_value_t = 8)]
        max_faces: usize,
        #[arg(long, default_value_t = 8.0)]
        min_size: f64,
        #[arg(long, default_value_t = 64.0)]
        max_size: f64,
        /// Non-face clutter (rings, squares, dim disks) per image.
        #[arg(long, default_value_t = 0)]
        min_distractors: usize,
        #[arg(long, default_value_t = 0)]
        max_distractors: usize,
    },
    /// Train a detector on an annotated corpus.
    Train {
        /// Annotation file; image paths inside are relative to its directory.
        #[arg(long)]
        annots: PathBuf,
        /// Output directory for trace.csv and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over a corpus and write JSON-lines detections.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        annots: PathBuf,
        /// Output detections file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the score threshold from the model's config.
        #[arg(long)]
        score_threshold: Option<f64>,
    },
    /// Score detections against ground truth: AP, PR curve, SVG plot.
    Eval {
        /// Detections file written by `detect`.
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        annots: PathBuf,
        /// Output directory for ap.txt, pr.csv, pr.svg.
        #[arg(long)]
        out: PathBuf,
        /// Matching IoU threshold.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Emit the ground-truth density map for one annotated image as a PGM.
    Density {
        #[arg(long)]
        annots: PathBuf,
        /// Image the annotations refer to (matched by path or file name).
        #[arg(long)]
        image: PathBuf,
        /// Output PGM (max-normalized for display).
        #[arg(long)]
        out: PathBuf,
        /// Kernel width: "fixed:<sigma>", "adaptive", or "adaptive:<coeff>".
        #[arg(long, default_value = "adaptive")]
        sigma: String,
    },
    /// Distribution of best anchor IoU over ground-truth boxes.
    AnchorStats {
        #[arg(long)]
        annots: PathBuf,
        /// Optional text report path (stats always print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every op and the full pipeline.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynth {
            out,
            num_images,
            width,
            height,
            min_faces,
            max_faces,
            min_size,
            max_size,
            min_distractors,
            max_distractors,
        } => {
            let cfg = SynthConfig {
                num_images,
                width,
                height,
                min_faces,
                max_faces,
                min_size,
                max_size,
                min_distractors,
                max_distractors,
                ..SynthConfig::default()
            };
            let annots = gen_synthetic(&out, &cfg, cli.seed)?;
            println!("wrote {num_images} images and {}", annots.display());
            Ok(())
        }
        Cmd::Train { annots, out } => {
            let run_cfg = load_config(&cli.config)?;
            let samples = load_dataset(&annots, &run_cfg)?;
            let mut model = DetectionModel::new(run_cfg.model.clone(), cli.seed)?;
            let sinks = TrainSinks {
                trace_path: Some(out.join("trace.csv")),
                checkpoint_dir: Some(out.clone()),
            };
            let rows = train(&mut model, &samples, &run_cfg, cli.seed, &sinks)?;
            let last = rows.last().expect("at least one iteration");
            println!(
                "trained {} iterations on {} images: L_cls {:.4} L_box {:.4} L_den {:.4}",
                rows.len(),
                samples.len(),
                last.l_cls,
                last.l_box,
                last.l_den
            );
            println!("model: {}", out.join("model_final.bin").display());
            Ok(())
        }
        Cmd::Detect {
            model,
            annots,
            out,
            score_threshold,
        } => {
            let loaded = load_model(&model)?;
            let mut run_cfg = RunConfig::parse(&loaded.config_text)?;
            if let Some(t) = score_threshold {
                run_cfg.post.score_threshold = t;
            }
            let mut net = DetectionModel::new(run_cfg.model.clone(), 0)?;
            apply_params(&loaded, &mut net.params)?;
            let samples = load_dataset(&annots, &run_cfg)?;
            let mut records = Vec::new();
            for s in &samples {
                for d in detect_sample(&net, s, &run_cfg)? {
                    records.push(DetectionRecord::from_detection(&s.name, &d));
                }
            }
            write_detections(&out, &records)?;
            println!(
                "wrote {} detections over {} images to {}",
                records.len(),
                samples.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            dets,
            annots,
            out,
            iou,
        } => {
            let records = read_detections(&dets)?;
            let ann = parse_annotations(&annots)?;
            let names: Vec<String> = ann.records.iter().map(|r| r.image_path.clone()).collect();
            let gts: Vec<Vec<BBox>> = ann
                .records
                .iter()
                .map(|r| r.faces.iter().map(|f| f.bbox()).collect())
                .collect();
            let grouped = group_by_image(&records, &names)?;
            let report = ap_at_iou(&grouped, &gts, iou);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let ap_txt = format!(
                "ap {}\nnum_gt {}\ntrue_positives {}\nfalse_positives {}\nno_ground_truth {}\n",
                report.ap,
                report.num_gt,
                report.true_positives,
                report.false_positives,
                report.no_ground_truth
            );
            let ap_path = out.join("ap.txt");
            std::fs::write(&ap_path, ap_txt).map_err(|e| Error::io(&ap_path, e))?;
            write_pr_csv(&report, &out.join("pr.csv"))?;
            write_pr_svg(&report, &out.join("pr.svg"))?;
            println!("AP@{iou} = {:.4} over {} ground truths", report.ap, report.num_gt);
            Ok(())
        }
        Cmd::Density {
            annots,
            image,
            out,
            sigma,
        } => {
            let spec = parse_sigma(&sigma)?;
            let ann = parse_annotations(&annots)?;
            let img = read_image(&image)?;
            let record = find_record(&ann.records, &image)?;
            let points: Vec<FacePoint> = record
                .faces
                .iter()
                .map(|f| {
                    let b = f.bbox();
                    FacePoint {
                        x: (b.x1 + b.x2) / 2.0,
                        y: (b.y1 + b.y2) / 2.0,
                        box_w: b.x2 - b.x1,
                        box_h: b.y2 - b.y1,
                    }
                })
                .collect();
            let map = generate_gt_density(&points, img.w, img.h, DETECTOR_STRIDES[0], &spec)?;
            write_image(&out, &gray_from_map(map.w, map.h, &map.grid))?;
            println!(
                "density map {}x{} (stride {}), mass {:.6} over {} faces -> {}",
                map.w,
                map.h,
                map.stride,
                map.mass,
                points.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::AnchorStats { annots, out } => {
            let run_cfg = load_config(&cli.config)?;
            let ann = parse_annotations(&annots)?;
            let root = annots.parent().unwrap_or_else(|| Path::new("."));
            let mut gts_per_image = Vec::new();
            for rec in &ann.records {
                let img = read_image(&root.join(&rec.image_path))?;
                let boxes: Vec<BBox> = rec.faces.iter().map(|f| f.bbox()).collect();
                gts_per_image.push((img.w, img.h, boxes));
            }
            let stats = anchor_overlap_stats(&gts_per_image, &run_cfg.model.anchors)?;
            let below = stats
                .per_gt_max_iou
                .iter()
                .filter(|&&v| v < 0.5)
                .count();
            let n = stats.per_gt_max_iou.len().max(1);
            let mut text = format!(
                "ground_truths {}\nmean_max_iou {:.4}\nmedian_max_iou {:.4}\nfraction_below_0.5 {:.4}\n",
                stats.per_gt_max_iou.len(),
                stats.mean,
                stats.median,
                below as f64 / n as f64
            );
            for (lo, hi, count) in &stats.bins {
                text.push_str(&format!("bin {lo:.2}..{hi:.2} {count}\n"));
            }
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Cmd::Gradcheck => {
            let entries = run_suite(cli.seed)?;
            let mut all_pass = true;
            for e in &entries {
                let status = if e.pass() { "PASS" } else { "FAIL" };
                all_pass &= e.pass();
                println!(
                    "{status} {} max_rel {:.3e} ({} coords, {} draw{})",
                    e.name,
                    e.max_rel_error,
                    e.coords_checked,
                    e.draws,
                    if e.draws == 1 { "" } else { "s" }
                );
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
    }
}

fn parse_sigma(s: &str) -> Result<GaussianSpec> {
    let mut spec = GaussianSpec::default();
    match s.split_once(':') {
        Some(("fixed", v)) => {
            spec.sigma_mode = SigmaMode::Fixed;
            spec.sigma_fixed = v
                .parse()
                .map_err(|_| Error::Config(format!("bad sigma value in {s:?}")))?;
        }
        Some(("adaptive", v)) => {
            spec.sigma_mode = SigmaMode::BoxAdaptive;
            spec.adaptive_coeff = v
                .parse()
                .map_err(|_| Error::Config(format!("bad sigma coefficient in {s:?}")))?;
        }
        None if s == "adaptive" => spec.sigma_mode = SigmaMode::BoxAdaptive,
        _ => {
            return Err(Error::Config(format!(
                "sigma must be fixed:<sigma>, adaptive, or adaptive:<coeff>, got {s:?}"
            )))
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Finds the annotation record for an image, matching the full relative path
/// first and the bare file name second.
fn find_record<'a>(
    records: &'a [dafe::io::annotations::AnnotationRecord],
    image: &Path,
) -> Result<&'a dafe::io::annotations::AnnotationRecord> {
    let as_str = image.to_string_lossy();
    if let Some(r) = records.iter().find(|r| r.image_path == as_str) {
        return Ok(r);
    }
    let file_name = image
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    records
        .iter()
        .find(|r| {
            Path::new(&r.image_path)
                .file_name()
                .map(|n| n.to_string_lossy() == file_name)
                .unwrap_or(false)
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "no annotation record matches image {}",
                image.display()
            ))
        })
}
