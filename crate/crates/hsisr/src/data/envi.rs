//! Importer for the ENVI header/data layout used by public hyperspectral
//! datasets. Supports float32 (type 4), signed/unsigned 16-bit (types 2 and
//! 12, widened to float), the bsq/bil/bip interleaves, and little-endian
//! byte order; everything else is rejected explicitly.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{io_err, Cube, CubeMeta, DataError};
use crate::tensor::Tensor;

struct EnviHeader {
    samples: usize, // width
    lines: usize,   // height
    bands: usize,
    data_type: u32,
    interleave: String,
    byte_order: u32,
    header_offset: usize,
}

/// Parses `key = value` pairs, skipping brace-enclosed blocks such as
/// wavelength lists. Keys are case-insensitive.
fn parse_header(text: &str) -> Result<EnviHeader, DataError> {
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut in_braces = false;
    for line in text.lines() {
        let line = line.trim();
        if in_braces {
            if line.contains('}') {
                in_braces = false;
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let value = value.trim();
        if value.starts_with('{') && !value.contains('}') {
            in_braces = true;
            continue;
        }
        fields.insert(
            key.trim().to_ascii_lowercase(),
            value.trim_matches(|c| c == '{' || c == '}').trim().to_string(),
        );
    }

    let get = |field: &'static str| -> Result<&String, DataError> {
        fields.get(field).ok_or(DataError::MissingField(field))
    };
    let parse_usize = |field: &'static str| -> Result<usize, DataError> {
        get(field)?
            .parse()
            .map_err(|_| DataError::MalformedField {
                field,
                value: fields[field].clone(),
            })
    };

    Ok(EnviHeader {
        samples: parse_usize("samples")?,
        lines: parse_usize("lines")?,
        bands: parse_usize("bands")?,
        data_type: parse_usize("data type")? as u32,
        interleave: get("interleave")?.to_ascii_lowercase(),
        byte_order: parse_usize("byte order")? as u32,
        header_offset: fields
            .get("header offset")
            .map(|v| {
                v.parse().map_err(|_| DataError::MalformedField {
                    field: "header offset",
                    value: v.clone(),
                })
            })
            .transpose()?
            .unwrap_or(0),
    })
}

fn bytes_per_value(data_type: u32) -> Result<usize, DataError> {
    match data_type {
        4 => Ok(4),
        2 | 12 => Ok(2),
        other => Err(DataError::Unsupported {
            what: "data type",
            value: other.to_string(),
        }),
    }
}

fn decode_value(data_type: u32, bytes: &[u8]) -> f32 {
    match data_type {
        4 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        2 => i16::from_le_bytes([bytes[0], bytes[1]]) as f32,
        12 => u16::from_le_bytes([bytes[0], bytes[1]]) as f32,
        _ => unreachable!("filtered by bytes_per_value"),
    }
}

/// Reads an ENVI header/data file pair into the native `(H, W, C)` layout.
/// The cube is marked unnormalized with scale 1.
pub fn import_envi(header_path: &Path, data_path: &Path) -> Result<Cube, DataError> {
    let text = std::fs::read_to_string(header_path).map_err(|e| io_err(header_path, e))?;
    let header = parse_header(&text)?;
    if header.byte_order != 0 {
        return Err(DataError::Unsupported {
            what: "byte order",
            value: header.byte_order.to_string(),
        });
    }
    let value_size = bytes_per_value(header.data_type)?;
    if !matches!(header.interleave.as_str(), "bsq" | "bil" | "bip") {
        return Err(DataError::Unsupported {
            what: "interleave",
            value: header.interleave.clone(),
        });
    }

    let raw = std::fs::read(data_path).map_err(|e| io_err(data_path, e))?;
    let (h, w, c) = (header.lines, header.samples, header.bands);
    let expected = header.header_offset + h * w * c * value_size;
    if raw.len() != expected {
        return Err(DataError::HeaderMismatch(format!(
            "data file has {} bytes, header implies {expected}",
            raw.len()
        )));
    }
    let body = &raw[header.header_offset..];

    // Source flat index of (h, w, c) for each interleave.
    let src_index: fn(usize, usize, usize, (usize, usize, usize)) -> usize =
        match header.interleave.as_str() {
            "bsq" => |y, x, b, (h, w, _)| (b * h + y) * w + x,
            "bil" => |y, x, b, (_, w, c)| (y * c + b) * w + x,
            _ => |y, x, b, (_, w, c)| (y * w + x) * c + b,
        };

    let mut values = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for b in 0..c {
                let i = src_index(y, x, b, (h, w, c)) * value_size;
                values.push(decode_value(header.data_type, &body[i..i + value_size]));
            }
        }
    }
    let data = Tensor::new(1, h, w, c, values)?;
    Cube::new(
        data,
        CubeMeta {
            height: h,
            width: w,
            bands: c,
            normalized: false,
            norm_scale: 1.0,
            source: data_path.display().to_string(),
        },
    )
}
