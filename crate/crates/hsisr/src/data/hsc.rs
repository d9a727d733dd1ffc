//! Native cube container (`HSC1`): a four-byte magic, a little-endian u32
//! header length, a JSON header, then raw 32-bit little-endian floats in
//! `(H, W, C)` row-major order. Round-trips are bitwise exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io_err, Cube, CubeMeta, DataError};
use crate::tensor::Tensor;

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";

#[derive(Serialize, Deserialize)]
struct HscHeader {
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    layout: String,
    normalized: bool,
    norm_scale: f32,
    source: String,
}

/// Writes bytes to `path` via a temporary sibling file and a rename, so a
/// crash never leaves a torn file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_hsc(path: &Path, cube: &Cube) -> Result<(), DataError> {
    let header = HscHeader {
        height: cube.meta.height,
        width: cube.meta.width,
        bands: cube.meta.bands,
        dtype: "f32".into(),
        layout: "bip".into(),
        normalized: cube.meta.normalized,
        norm_scale: cube.meta.norm_scale,
        source: cube.meta.source.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_bytes.len() + cube.data.len() * 4);
    out.extend_from_slice(HSC_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for &v in cube.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_hsc(path: &Path) -> Result<Cube, DataError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| DataError::Truncated { expected: 4 })?;
    if &magic != HSC_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(HSC_MAGIC).into_owned(),
            got: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| DataError::Truncated { expected: 4 })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| DataError::Truncated {
            expected: header_len,
        })?;
    let header: HscHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| DataError::HeaderMismatch(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(DataError::Unsupported {
            what: "dtype",
            value: header.dtype,
        });
    }
    if header.layout != "bip" {
        return Err(DataError::Unsupported {
            what: "layout",
            value: header.layout,
        });
    }

    let count = header.height * header.width * header.bands;
    let mut payload = vec![0u8; count * 4];
    file.read_exact(&mut payload)
        .map_err(|_| DataError::Truncated { expected: count * 4 })?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(DataError::HeaderMismatch(
            "file is longer than the header implies".into(),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Tensor::new(1, header.height, header.width, header.bands, values)?;
    Cube::new(
        data,
        CubeMeta {
            height: header.height,
            width: header.width,
            bands: header.bands,
            normalized: header.normalized,
            norm_scale: header.norm_scale,
            source: header.source,
        },
    )
}
