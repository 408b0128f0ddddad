//! Binary PGM (P5) and PPM (P6) at maxval 255. The only image codecs the
//! project needs; everything else is out of scope.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// 8-bit image, interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(w: usize, h: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), w * h);
        Image {
            w,
            h,
            channels: 1,
            data,
        }
    }

    /// Planar NCHW tensor normalized to [-0.5, 0.5].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, self.channels, self.h, self.w));
        for c in 0..self.channels {
            let plane = t.plane_mut(0, c);
            for i in 0..self.h * self.w {
                plane[i] = self.data[i * self.channels + c] as f64 / 255.0 - 0.5;
            }
        }
        t
    }
}

/// Max-normalizes a non-negative map to 8 bits for visual inspection.
pub fn gray_from_map(w: usize, h: usize, values: &[f64]) -> Image {
    assert_eq!(values.len(), w * h);
    let peak = values.iter().cloned().fold(0.0f64, f64::max);
    let data = values
        .iter()
        .map(|&v| {
            if peak > 0.0 {
                (v / peak * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    Image::gray(w, h, data)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    /// Next whitespace-delimited token, skipping `#` comments to end of line.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = HeaderReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.token().ok_or_else(|| Error::parse(path, "empty file"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::parse(
                path,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut dim = |what: &str| -> Result<usize> {
        let tok = r
            .token()
            .ok_or_else(|| Error::parse(path, format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(path, format!("bad {what}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::parse(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let start = r.pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(Error::parse(
            path,
            format!("payload truncated: need {need} bytes, have {}", bytes.len().saturating_sub(start)),
        ));
    }
    Ok(Image {
        w,
        h,
        channels,
        data: bytes[start..start + need].to_vec(),
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Config(format!("cannot write {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = Image::gray(3, 2, vec![0, 10, 255, 7, 8, 9]);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = Image {
            w: 2,
            h: 1,
            channels: 3,
            data: vec![1, 2, 3, 4, 5, 6],
        };
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn header_comments_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n# another\n255\n\x01\x02").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!((img.w, img.h), (2, 1));
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P3\n1 1\n255\n9").unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn tensor_normalization_and_layout() {
        let img = Image {
            w: 2,
            h: 1,
            channels: 3,
            data: vec![0, 128, 255, 255, 0, 128],
        };
        let t = img.to_tensor();
        assert_eq!(t.shape, Shape::new(1, 3, 1, 2));
        assert!((t.plane(0, 0)[0] - (-0.5)).abs() < 1e-12);
        assert!((t.plane(0, 2)[0] - 0.5).abs() < 1e-12);
        assert!((t.plane(0, 0)[1] - 0.5).abs() < 1e-12);
        assert!((t.plane(0, 1)[1] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn map_export_is_max_normalized() {
        let img = gray_from_map(2, 1, &[0.25, 0.5]);
        assert_eq!(img.data, vec![128, 255]);
        let zero = gray_from_map(2, 1, &[0.0, 0.0]);
        assert_eq!(zero.data, vec![0, 0]);
    }
}
