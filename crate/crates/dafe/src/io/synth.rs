//! Synthetic face-like corpus: bright disks with a dark rim over noise,
//! sized log-uniformly, never overlapping beyond an IoU cap. Small enough to
//! train against in minutes, structured enough that detection quality is
//! meaningful.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{iou, BBox};
use crate::error::Result;
use crate::io::annotations::{write_annotations, AnnotationRecord, Face};
use crate::io::pgm::{write_image, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_pairwise_iou: f64,
    /// Non-face clutter per image: hollow rings, bright squares, and
    /// low-contrast disks that share local statistics with faces but are not
    /// annotated. Zero keeps the plain disks-over-noise corpus.
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 100,
            width: 128,
            height: 128,
            min_faces: 1,
            max_faces: 8,
            min_size: 8.0,
            max_size: 64.0,
            max_pairwise_iou: 0.3,
            min_distractors: 0,
            max_distractors: 0,
        }
    }
}

fn draw_disk(img: &mut Image, x: i64, y: i64, side: i64, face_val: u8, rim_val: u8) {
    let r = side as f64 / 2.0;
    let rim = (r / 5.0).max(1.0);
    let (cx, cy) = (x as f64 + r, y as f64 + r);
    for py in y.max(0)..(y + side).min(img.h as i64) {
        for px in x.max(0)..(x + side).min(img.w as i64) {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= r - rim {
                img.data[py as usize * img.w + px as usize] = face_val;
            } else if d <= r {
                img.data[py as usize * img.w + px as usize] = rim_val;
            }
        }
    }
}

/// Rim annulus only; the interior keeps the background noise.
fn draw_ring(img: &mut Image, x: i64, y: i64, side: i64, rim_val: u8) {
    let r = side as f64 / 2.0;
    let rim = (r / 5.0).max(1.0);
    let (cx, cy) = (x as f64 + r, y as f64 + r);
    for py in y.max(0)..(y + side).min(img.h as i64) {
        for px in x.max(0)..(x + side).min(img.w as i64) {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= r && d > r - rim {
                img.data[py as usize * img.w + px as usize] = rim_val;
            }
        }
    }
}

/// Filled square with a dark border: face-like brightness, wrong shape.
fn draw_square(img: &mut Image, x: i64, y: i64, side: i64, fill_val: u8, rim_val: u8) {
    let rim = ((side as f64 / 10.0).max(1.0)) as i64;
    for py in y.max(0)..(y + side).min(img.h as i64) {
        for px in x.max(0)..(x + side).min(img.w as i64) {
            let edge = (px - x).min(x + side - 1 - px).min(py - y).min(y + side - 1 - py);
            img.data[py as usize * img.w + px as usize] =
                if edge < rim { rim_val } else { fill_val };
        }
    }
}

/// Generates `cfg.num_images` PGMs plus a WIDER-format `annotations.txt`
/// into `out_dir`, deterministically per seed. Returns the annotation path.
pub fn gen_synthetic(out_dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(cfg.num_images);
    for idx in 0..cfg.num_images {
        let name = format!("img_{idx:04}.pgm");
        let mut img = Image::gray(
            cfg.width,
            cfg.height,
            (0..cfg.width * cfg.height)
                .map(|_| rng.random_range(80..=170))
                .collect(),
        );
        let n_faces = rng.random_range(cfg.min_faces..=cfg.max_faces);
        let mut placed: Vec<(i64, i64, i64)> = Vec::new();
        for _ in 0..n_faces {
            for _attempt in 0..60 {
                let ln_s = rng.random_range(cfg.min_size.ln()..=cfg.max_size.ln());
                let side = (ln_s.exp().round() as i64)
                    .clamp(cfg.min_size as i64, cfg.max_size as i64)
                    .min(cfg.width.min(cfg.height) as i64);
                let x = rng.random_range(0..=cfg.width as i64 - side);
                let y = rng.random_range(0..=cfg.height as i64 - side);
                let cand = BBox::from_xywh(x as f64, y as f64, side as f64, side as f64);
                let clear = placed.iter().all(|&(px, py, ps)| {
                    iou(&cand, &BBox::from_xywh(px as f64, py as f64, ps as f64, ps as f64))
                        < cfg.max_pairwise_iou
                });
                if clear {
                    placed.push((x, y, side));
                    break;
                }
            }
        }
        // Draw after placement so rng consumption per face is fixed.
        for &(x, y, side) in &placed {
            let face_val = rng.random_range(200..=240);
            let rim_val = rng.random_range(30..=60);
            draw_disk(&mut img, x, y, side, face_val, rim_val);
        }
        if cfg.max_distractors > 0 {
            let n_clutter = rng.random_range(cfg.min_distractors..=cfg.max_distractors);
            let mut clutter: Vec<(i64, i64, i64, u8)> = Vec::new();
            for _ in 0..n_clutter {
                for _attempt in 0..60 {
                    let ln_s = rng.random_range(cfg.min_size.ln()..=cfg.max_size.ln());
                    let side = (ln_s.exp().round() as i64)
                        .clamp(cfg.min_size as i64, cfg.max_size as i64)
                        .min(cfg.width.min(cfg.height) as i64);
                    let x = rng.random_range(0..=cfg.width as i64 - side);
                    let y = rng.random_range(0..=cfg.height as i64 - side);
                    let kind = rng.random_range(0..3u8);
                    let cand = BBox::from_xywh(x as f64, y as f64, side as f64, side as f64);
                    let clear = placed
                        .iter()
                        .map(|&(px, py, ps)| (px, py, ps))
                        .chain(clutter.iter().map(|&(px, py, ps, _)| (px, py, ps)))
                        .all(|(px, py, ps)| {
                            iou(&cand, &BBox::from_xywh(px as f64, py as f64, ps as f64, ps as f64))
                                < cfg.max_pairwise_iou
                        });
                    if clear {
                        clutter.push((x, y, side, kind));
                        break;
                    }
                }
            }
            for &(x, y, side, kind) in &clutter {
                let bright = rng.random_range(200..=240);
                let dim = rng.random_range(150..=190);
                let rim_val = rng.random_range(30..=60);
                match kind {
                    0 => draw_ring(&mut img, x, y, side, rim_val),
                    1 => draw_square(&mut img, x, y, side, bright, rim_val),
                    _ => draw_disk(&mut img, x, y, side, dim, rim_val),
                }
            }
        }
        write_image(&out_dir.join(&name), &img)?;
        records.push(AnnotationRecord {
            image_path: name,
            faces: placed
                .iter()
                .map(|&(x, y, side)| Face {
                    x,
                    y,
                    w: side,
                    h: side,
                    attrs: [0; 6],
                })
                .collect(),
        });
    }
    let annot_path = out_dir.join("annotations.txt");
    write_annotations(&annot_path, &records)?;
    Ok(annot_path)
}
