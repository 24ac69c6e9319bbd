//! Checkpoint container:
//!
//! ```text
//! magic    8 bytes  "CAVLCKPT"
//! version  u32 LE
//! header   u64 LE length, then JSON {architecture, metadata}
//! count    u32 LE number of parameter tensors
//! tensor   u32 LE rank, rank x u64 LE dims, prod(dims) x f64 LE
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, Model, TrainingMetadata};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAVLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureSpec,
    metadata: TrainingMetadata,
}

pub(crate) fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    cursor: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            cursor: Cursor::new(bytes),
            path,
        }
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let remaining = self.cursor.get_ref().len() as u64 - self.cursor.position();
        if (n as u64) > remaining {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} ({n} bytes wanted, {remaining} left)"),
            ));
        }
        let mut buf = vec![0; n];
        self.cursor.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8], version: u32) -> Result<()> {
        if self.bytes(8, "magic")? != expected {
            return Err(Error::format(self.path, "bad magic bytes"));
        }
        let found = self.u32("version")?;
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        Ok(())
    }

    pub(crate) fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.u64("header length")?;
        let raw = self.bytes(len as usize, "header")?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(self.path, format!("header: {e}")))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(self.path, format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64("tensor dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.path, "tensor size overflows"))?;
        let raw = self.bytes(n.saturating_mul(8), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(self.path, e.to_string()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.cursor.position() as usize != self.cursor.get_ref().len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn write_json_header<T: Serialize>(out: &mut Vec<u8>, header: &T) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_json_header(
        &mut out,
        &Header {
            architecture: model.architecture().clone(),
            metadata: model.metadata.clone(),
        },
    )?;
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        write_tensor(&mut out, p);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: Header = r.json()?;
    let count = r.u32("tensor count")? as usize;
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Model::from_parts(header.architecture, params, header.metadata)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let arch = ArchitectureSpec::validation(8, vec!["a".into(), "b".into(), "c".into()]);
        let mut m = Model::init(arch, 7).unwrap();
        m.metadata.val_accuracy = 0.1 + 0.2;
        m.metadata.epoch_losses = vec![1.0 / 3.0, f64::MIN_POSITIVE];
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let m = model();
        save(&m, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded, m);
        save(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let img = Tensor::full(&[8, 8, 3], 0.25);
        assert_eq!(loaded.logits(&img).unwrap(), m.logits(&img).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = to_bytes(&model()).unwrap();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[8] = 99;
        assert!(matches!(
            from_bytes(&bytes, Path::new("x")),
            Err(Error::Version { found: 99, .. })
        ));
    }
}
