//! WIDER-style annotation text: an image path line, a face-count line, then
//! one box line per face with ten integer fields
//! (x y w h blur expression illumination invalid occlusion pose).
//!
//! The format has one quirk worth preserving: a zero count is followed by a
//! single all-zero box line, which must be consumed without producing a face.

use std::path::Path;

use crate::anchors::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    /// blur, expression, illumination, invalid, occlusion, pose — parsed and
    /// kept but unused by training.
    pub attrs: [i64; 6],
}

impl Face {
    pub fn invalid(&self) -> bool {
        self.attrs[3] == 1
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_xywh(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub faces: Vec<Face>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotations {
    pub records: Vec<AnnotationRecord>,
    /// Faces dropped for invalid=1 or non-positive extent.
    pub filtered: usize,
}

fn parse_box_line(line: &str) -> Option<Face> {
    let fields: Vec<i64> = line
        .split_whitespace()
        .map(|f| f.parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if fields.len() != 10 {
        return None;
    }
    Some(Face {
        x: fields[0],
        y: fields[1],
        w: fields[2],
        h: fields[3],
        attrs: fields[4..10].try_into().unwrap(),
    })
}

pub fn parse_annotations(path: &Path) -> Result<Annotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0usize;
    let mut records = Vec::new();
    let mut filtered = 0usize;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let image_path = lines[i].trim().to_string();
        i += 1;
        let count_line = *lines
            .get(i)
            .ok_or_else(|| Error::parse(path, format!("line {}: missing face count", i + 1)))?;
        let count: usize = count_line.trim().parse().map_err(|_| {
            Error::parse(path, format!("line {}: bad face count {count_line:?}", i + 1))
        })?;
        i += 1;
        let mut faces = Vec::with_capacity(count);
        if count == 0 {
            // Zero-count records carry one all-zero box line.
            if let Some(line) = lines.get(i) {
                if let Some(f) = parse_box_line(line) {
                    if f.x == 0 && f.y == 0 && f.w == 0 && f.h == 0 && f.attrs == [0; 6] {
                        i += 1;
                    }
                }
            }
        } else {
            for k in 0..count {
                let line = *lines.get(i).ok_or_else(|| {
                    Error::parse(
                        path,
                        format!("truncated record for {image_path}: {k} of {count} boxes"),
                    )
                })?;
                let face = parse_box_line(line).ok_or_else(|| {
                    Error::parse(
                        path,
                        format!("line {}: expected 10 integer fields, got {line:?}", i + 1),
                    )
                })?;
                if face.invalid() || face.w <= 0 || face.h <= 0 {
                    filtered += 1;
                } else {
                    faces.push(face);
                }
                i += 1;
            }
        }
        records.push(AnnotationRecord { image_path, faces });
    }
    Ok(Annotations { records, filtered })
}

/// Writes records in the same layout `parse_annotations` reads, including
/// the all-zero line for empty records.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.image_path);
        out.push('\n');
        out.push_str(&format!("{}\n", r.faces.len()));
        if r.faces.is_empty() {
            out.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for f in &r.faces {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                f.x, f.y, f.w, f.h, f.attrs[0], f.attrs[1], f.attrs[2], f.attrs[3], f.attrs[4], f.attrs[5]
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annots.txt");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn two_face_fixture_parses_exact_coordinates() {
        let (_d, path) = write_tmp(
            "imgs/a.pgm\n2\n10 20 30 40 0 0 0 0 0 0\n50 60 7 8 1 0 1 0 2 0\n",
        );
        let a = parse_annotations(&path).unwrap();
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.filtered, 0);
        let faces = &a.records[0].faces;
        assert_eq!(faces.len(), 2);
        assert_eq!((faces[0].x, faces[0].y, faces[0].w, faces[0].h), (10, 20, 30, 40));
        assert_eq!(faces[1].attrs, [1, 0, 1, 0, 2, 0]);
        assert_eq!(a.records[0].image_path, "imgs/a.pgm");
    }

    #[test]
    fn zero_count_quirk_consumes_placeholder_line() {
        let (_d, path) = write_tmp(
            "empty.pgm\n0\n0 0 0 0 0 0 0 0 0 0\nnext.pgm\n1\n1 2 3 4 0 0 0 0 0 0\n",
        );
        let a = parse_annotations(&path).unwrap();
        assert_eq!(a.records.len(), 2);
        assert!(a.records[0].faces.is_empty());
        assert_eq!(a.records[1].faces.len(), 1);
    }

    #[test]
    fn nine_field_box_line_errors_with_line_number() {
        let (_d, path) = write_tmp("a.pgm\n1\n1 2 3 4 0 0 0 0 0\n");
        let err = parse_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn truncated_record_errors() {
        let (_d, path) = write_tmp("a.pgm\n3\n1 2 3 4 0 0 0 0 0 0\n");
        let err = parse_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn invalid_and_degenerate_faces_filtered_with_count() {
        let (_d, path) = write_tmp(
            "a.pgm\n3\n1 2 3 4 0 0 0 1 0 0\n5 6 0 4 0 0 0 0 0 0\n7 8 9 10 0 0 0 0 0 0\n",
        );
        let a = parse_annotations(&path).unwrap();
        assert_eq!(a.filtered, 2);
        assert_eq!(a.records[0].faces.len(), 1);
        assert_eq!(a.records[0].faces[0].x, 7);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let records = vec![
            AnnotationRecord {
                image_path: "x/y.pgm".into(),
                faces: vec![Face {
                    x: 3,
                    y: 4,
                    w: 5,
                    h: 6,
                    attrs: [0, 1, 0, 0, 2, 1],
                }],
            },
            AnnotationRecord {
                image_path: "z.pgm".into(),
                faces: vec![],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.txt");
        write_annotations(&path, &records).unwrap();
        let back = parse_annotations(&path).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.filtered, 0);
    }

    #[test]
    fn bad_count_line_errors() {
        let (_d, path) = write_tmp("a.pgm\nnot_a_number\n");
        let err = parse_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
