//! Parameter checkpoints.
//!
//! Layout: the magic `ZNET1`, then for every buffer in registry order the id
//! `"<layer>/<field>"` as a `u64` little-endian byte length followed by UTF-8,
//! five `u64` little-endian shape extents `(n, h, w, d, c)` and the values as
//! `f64` little-endian.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use znet_core::autograd::ParamStore;
use znet_core::Shape5;

pub const MAGIC: &[u8; 5] = b"ZNET1";

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + params.count() * 8);
    out.extend_from_slice(MAGIC);
    for v in params.values() {
        let id = format!("{}/{}", v.layer, v.field);
        out.extend_from_slice(&(id.len() as u64).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for e in v.shape.to_array() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in v.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub shape: Shape5,
    pub values: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.bytes.len() - self.pos >= n, "checkpoint truncated at byte {}", self.pos);
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    ensure!(bytes.starts_with(MAGIC), "not a ZNET1 checkpoint");
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = usize::try_from(r.u64()?)?;
        let id = std::str::from_utf8(r.take(len)?).context("layer id is not UTF-8")?.to_string();
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?)?;
        }
        let shape = Shape5::from_array(dims).with_context(|| format!("shape of {id}"))?;
        let raw = r.take(shape.len().checked_mul(8).context("shape overflows")?)?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes"))).collect();
        records.push(Record { id, shape, values });
    }
    Ok(records)
}

/// Overwrites every buffer of `params` from `bytes`. The ids, order and
/// shapes must match the model exactly.
pub fn load_into(params: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let records = decode(bytes)?;
    let expected: Vec<(String, Shape5)> =
        params.values().map(|v| (format!("{}/{}", v.layer, v.field), v.shape)).collect();
    if records.len() != expected.len() {
        bail!(
            "checkpoint holds {} buffers but the architecture has {}; was it saved for a different --arch?",
            records.len(),
            expected.len()
        );
    }
    for (rec, (id, shape)) in records.iter().zip(&expected) {
        if &rec.id != id || rec.shape != *shape {
            bail!("checkpoint buffer {} {} does not match model buffer {id} {shape}", rec.id, rec.shape);
        }
    }
    for rec in records {
        let (layer, field) = rec.id.rsplit_once('/').expect("ids contain a slash");
        params.set_values(layer, field, rec.shape, &rec.values)?;
    }
    Ok(())
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(params: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    load_into(params, &bytes).with_context(|| format!("loading {}", path.display()))
}
