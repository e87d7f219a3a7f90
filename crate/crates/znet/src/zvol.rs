//! `.zvol.json` header plus `.zvol.raw` voxels.
//!
//! Voxels are little-endian, slice-major: z outermost, then rows of y, then
//! x. Images are `f32`, labels `u8` in {0, 1}.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use znet_core::data::{Dtype, Volume, VolumeMeta};
use znet_core::Tensor;

pub const HEADER_SUFFIX: &str = ".zvol.json";
pub const RAW_SUFFIX: &str = ".zvol.raw";

/// `name.zvol.json` -> `name.zvol.raw`.
pub fn raw_path(header: &Path) -> Result<PathBuf> {
    let s = header.to_str().context("volume path is not UTF-8")?;
    match s.strip_suffix(HEADER_SUFFIX) {
        Some(stem) => Ok(PathBuf::from(format!("{stem}{RAW_SUFFIX}"))),
        None => bail!("volume header {} must end in {HEADER_SUFFIX}", header.display()),
    }
}

/// Voxel values in file order.
fn file_order(v: &Volume) -> Vec<f64> {
    let [x_dim, y_dim, l] = v.meta.dims();
    let s = v.data.shape();
    let data = v.data.as_slice();
    let mut out = Vec::with_capacity(v.meta.voxels());
    for z in 0..l {
        for y in 0..y_dim {
            for x in 0..x_dim {
                out.push(data[s.index(0, y, x, z, 0)]);
            }
        }
    }
    out
}

pub fn encode_raw(v: &Volume) -> Result<Vec<u8>> {
    let values = file_order(v);
    Ok(match v.meta.dtype {
        Dtype::F32 => values.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
        Dtype::U8 => values
            .iter()
            .map(|&x| match x {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                other => bail!("label value {other} is not 0 or 1"),
            })
            .collect::<Result<_>>()?,
    })
}

pub fn decode_raw(meta: &VolumeMeta, bytes: &[u8]) -> Result<Volume> {
    meta.validate()?;
    let width = match meta.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    let expected = meta.voxels() * width;
    ensure!(
        bytes.len() == expected,
        "{}: raw file has {} bytes, header implies {expected}",
        meta.source,
        bytes.len()
    );
    let values: Vec<f64> = match meta.dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
    };
    let shape = meta.shape()?;
    let [x_dim, y_dim, _] = meta.dims();
    let mut data = vec![0.0; shape.len()];
    for (i, v) in values.into_iter().enumerate() {
        let x = i % x_dim;
        let y = (i / x_dim) % y_dim;
        let z = i / (x_dim * y_dim);
        data[shape.index(0, y, x, z, 0)] = v;
    }
    Ok(Volume::new(meta.clone(), Tensor::from_vec(shape, data)?)?)
}

pub fn read_volume(header: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header).with_context(|| format!("reading {}", header.display()))?;
    let meta: VolumeMeta =
        serde_json::from_str(&text).with_context(|| format!("parsing volume header {}", header.display()))?;
    let raw = raw_path(header)?;
    let bytes = fs::read(&raw).with_context(|| format!("reading {}", raw.display()))?;
    decode_raw(&meta, &bytes).with_context(|| format!("decoding {}", raw.display()))
}

pub fn write_volume(v: &Volume, header: &Path) -> Result<()> {
    let raw = raw_path(header)?;
    let bytes = encode_raw(v)?;
    fs::write(header, serde_json::to_string_pretty(&v.meta)? + "\n")
        .with_context(|| format!("writing {}", header.display()))?;
    fs::write(&raw, bytes).with_context(|| format!("writing {}", raw.display()))?;
    Ok(())
}
