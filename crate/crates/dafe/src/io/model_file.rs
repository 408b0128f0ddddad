//! Checkpoint format: magic "DAFE", a u32 version, the run configuration
//! echoed verbatim, a tensor directory (name, shape, payload offset), and
//! all parameters as little-endian f32.
//!
//! Layout, all integers little-endian:
//! magic[4] | version u32 | config_len u64 | config utf-8 |
//! n_tensors u64 | per tensor: name_len u64, name, shape 4xu64, offset u64 |
//! payload (f32 values, offsets are byte positions within the payload).

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"DAFE";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct LoadedModel {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Shape, Vec<f64>)>,
}

pub fn save_model(path: &Path, config_text: &str, params: &ParamStore) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in [t.shape.n, t.shape.c, t.shape.h, t.shape.w] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for (_, _, t) in params.iter() {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ModelFile(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::ModelFile(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let config_len = c.u64("config length")? as usize;
    let config_text = String::from_utf8(c.take(config_len, "config blob")?.to_vec())
        .map_err(|_| Error::ModelFile("config blob is not utf-8".into()))?;
    let n_tensors = c.u64("tensor count")? as usize;
    let mut dir: Vec<(String, Shape, u64)> = Vec::with_capacity(n_tensors);
    for k in 0..n_tensors {
        let name_len = c.u64("name length")? as usize;
        let name = String::from_utf8(c.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::ModelFile(format!("tensor {k} name is not utf-8")))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = c.u64("shape")? as usize;
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ModelFile(format!("tensor {name} has a zero dimension")));
        }
        let offset = c.u64("payload offset")?;
        dir.push((name, Shape::new(dims[0], dims[1], dims[2], dims[3]), offset));
    }
    let payload = &bytes[c.pos..];

    // Directory sanity: unique names, offsets in-bounds and non-overlapping.
    let mut spans: Vec<(u64, u64, &str)> = dir
        .iter()
        .map(|(name, shape, off)| (*off, *off + 4 * shape.len() as u64, name.as_str()))
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::ModelFile(format!(
                "tensors {} and {} overlap in the payload",
                w[0].2, w[1].2
            )));
        }
        if w[0].2 == w[1].2 {
            return Err(Error::ModelFile(format!("duplicate tensor {}", w[0].2)));
        }
    }
    if let Some(&(_, end, name)) = spans.last() {
        if end > payload.len() as u64 {
            return Err(Error::ModelFile(format!(
                "tensor {name} extends past the payload ({end} > {})",
                payload.len()
            )));
        }
    }

    let mut tensors = Vec::with_capacity(dir.len());
    for (name, shape, off) in dir {
        let start = off as usize;
        let data: Vec<f64> = payload[start..start + 4 * shape.len()]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(LoadedModel {
        version,
        config_text,
        tensors,
    })
}

/// Copies loaded tensors into an existing parameter store. The file must
/// carry exactly the store's parameter set with matching shapes.
pub fn apply_params(loaded: &LoadedModel, params: &mut ParamStore) -> Result<()> {
    use std::collections::BTreeMap;
    let mut by_name: BTreeMap<&str, (&Shape, &Vec<f64>)> = BTreeMap::new();
    for (name, shape, data) in &loaded.tensors {
        by_name.insert(name.as_str(), (shape, data));
    }
    if by_name.len() != loaded.tensors.len() {
        return Err(Error::ModelFile("duplicate tensor names".into()));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in &ids {
        let name = params.name(*id).to_string();
        let want = params.get(*id).shape;
        let (shape, data) = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::ModelFile(format!("parameter {name} missing from model file"))
        })?;
        if *shape != want {
            return Err(Error::ModelFile(format!(
                "parameter {name}: file shape {shape} does not match model shape {want}"
            )));
        }
        params.get_mut(*id).data.copy_from_slice(data);
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::ModelFile(format!(
            "model file carries unknown tensor {name}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample_store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add(
            "a.w",
            Tensor::from_vec(
                Shape::new(2, 1, 2, 2),
                vec![0.1, -2.5, std::f64::consts::PI, 1e-7, 3.0, -0.0, 42.5, 7e8],
            ),
        );
        ps.add("a.b", Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, -0.25]));
        ps
    }

    #[test]
    fn round_trip_is_exact_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let ps = sample_store();
        save_model(&path, "fusion.mode = enrich\n", &ps).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.version, VERSION);
        assert_eq!(loaded.config_text, "fusion.mode = enrich\n");
        assert_eq!(loaded.tensors.len(), 2);
        for (name, shape, data) in &loaded.tensors {
            let id = ps.by_name(name).unwrap();
            let orig = ps.get(id);
            assert_eq!(*shape, orig.shape);
            for (got, &want) in data.iter().zip(&orig.data) {
                assert_eq!(*got, (want as f32) as f64);
                let bound = want.abs() * 1e-7 + 1e-30;
                assert!((got - want).abs() <= bound.max(want.abs() * 2.0f64.powi(-24) * 1.01));
            }
        }
    }

    #[test]
    fn apply_params_restores_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let ps = sample_store();
        save_model(&path, "", &ps).unwrap();
        let mut fresh = sample_store();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        apply_params(&load_model(&path).unwrap(), &mut fresh).unwrap();
        for id in ps.ids() {
            let want: Vec<f64> = ps.get(id).data.iter().map(|&v| (v as f32) as f64).collect();
            assert_eq!(fresh.get(id).data, want);
        }
    }

    #[test]
    fn truncations_at_every_section_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, "some config\n", &sample_store()).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut_path = dir.path().join("cut.bin");
        for cut in [0, 3, 4, 7, 8, 15, 20, 40, 60, full.len() - 5, full.len() - 1] {
            std::fs::write(&cut_path, &full[..cut]).unwrap();
            assert!(load_model(&cut_path).is_err(), "cut at {cut} must fail");
        }
    }

    #[test]
    fn wrong_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, "", &sample_store()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_model(&path).unwrap_err().to_string().contains("magic"));

        save_model(&path, "", &sample_store()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_model(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_and_unknown_parameters_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut small = ParamStore::new();
        small.add("a.w", Tensor::scalar(1.0));
        save_model(&path, "", &small).unwrap();
        let loaded = load_model(&path).unwrap();

        let mut bigger = ParamStore::new();
        bigger.add("a.w", Tensor::scalar(0.0));
        bigger.add("a.b", Tensor::scalar(0.0));
        let err = apply_params(&loaded, &mut bigger).unwrap_err();
        assert!(err.to_string().contains("a.b"), "{err}");

        let mut smaller = ParamStore::new();
        smaller.add("other", Tensor::scalar(0.0));
        let err = apply_params(&loaded, &mut smaller).unwrap_err();
        assert!(err.to_string().contains("other") || err.to_string().contains("a.w"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(Shape::new(1, 1, 2, 2)));
        save_model(&path, "", &a).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let err = apply_params(&load_model(&path).unwrap(), &mut b).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
