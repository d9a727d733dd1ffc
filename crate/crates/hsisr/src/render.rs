//! False-color composites: three selected bands, each stretched between its
//! 2nd and 98th percentile, written as a binary PPM (P6, maxval 255).

use std::path::Path;

use thiserror::Error;

use crate::data::{Cube, DataError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("band index {index} out of range (cube has {bands} bands)")]
    BandOutOfRange { index: usize, bands: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Linear-interpolation percentile over a sorted slice.
fn percentile(sorted: &[f32], p: f64) -> f32 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = (pos - lo as f64) as f32;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Stretch limits for one band: 2nd and 98th percentiles. A degenerate band
/// (hi == lo) maps every pixel to the midpoint value 128.
pub fn stretch_limits(values: &[f32]) -> (f32, f32) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    (percentile(&sorted, 2.0), percentile(&sorted, 98.0))
}

fn stretch_to_u8(v: f32, lo: f32, hi: f32) -> u8 {
    if hi - lo < 1e-12 {
        return 128;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the composite for bands `(r, g, b)` as PPM bytes.
pub fn render_false_color(cube: &Cube, bands: [usize; 3]) -> Result<Vec<u8>, RenderError> {
    for &index in &bands {
        if index >= cube.bands() {
            return Err(RenderError::BandOutOfRange {
                index,
                bands: cube.bands(),
            });
        }
    }
    let (h, w) = (cube.height(), cube.width());
    let limits: Vec<(f32, f32)> = bands
        .iter()
        .map(|&bi| {
            let values: Vec<f32> = (0..h)
                .flat_map(|y| (0..w).map(move |x| cube.data.at(0, y, x, bi)))
                .collect();
            stretch_limits(&values)
        })
        .collect();

    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for (&bi, &(lo, hi)) in bands.iter().zip(&limits) {
                out.push(stretch_to_u8(cube.data.at(0, y, x, bi), lo, hi));
            }
        }
    }
    Ok(out)
}

/// Renders and writes the composite (complete-then-rename).
pub fn write_false_color(cube: &Cube, bands: [usize; 3], path: &Path) -> Result<(), RenderError> {
    let bytes = render_false_color(cube, bands)?;
    crate::data::write_atomic(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CubeMeta;
    use crate::tensor::Tensor;

    fn cube_from(data: Tensor<f32>) -> Cube {
        let (_, h, w, c) = data.dims();
        Cube::new(
            data,
            CubeMeta {
                height: h,
                width: w,
                bands: c,
                normalized: true,
                norm_scale: 1.0,
                source: "render test".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn header_and_length_are_exact() {
        let cube = cube_from(crate::testutil::seeded_tensor(600, 1, 5, 7, 3, 0.0, 1.0));
        let bytes = render_false_color(&cube, [0, 1, 2]).unwrap();
        let header = b"P6\n7 5\n255\n";
        assert!(bytes.starts_with(header));
        assert_eq!(bytes.len(), header.len() + 5 * 7 * 3);
    }

    #[test]
    fn constant_cube_renders_uniform_mid_gray() {
        let cube = cube_from(Tensor::filled(1, 4, 4, 3, 0.6));
        let bytes = render_false_color(&cube, [0, 1, 2]).unwrap();
        let pixels = &bytes[b"P6\n4 4\n255\n".len()..];
        assert!(pixels.iter().all(|&v| v == 128));
    }

    #[test]
    fn stretch_maps_percentile_range() {
        // A ramp: the 2nd percentile maps near 0, the 98th near 255.
        let values: Vec<f32> = (0..100).map(|i| i as f32 / 99.0).collect();
        let (lo, hi) = stretch_limits(&values);
        assert!((lo - 0.02).abs() < 0.02);
        assert!((hi - 0.98).abs() < 0.02);
        assert_eq!(stretch_to_u8(lo, lo, hi), 0);
        assert_eq!(stretch_to_u8(hi, lo, hi), 255);
        assert_eq!(stretch_to_u8(lo - 1.0, lo, hi), 0);
        assert_eq!(stretch_to_u8(hi + 1.0, lo, hi), 255);
    }

    #[test]
    fn out_of_range_band_is_rejected() {
        let cube = cube_from(Tensor::filled(1, 3, 3, 2, 0.5));
        assert!(matches!(
            render_false_color(&cube, [0, 1, 2]),
            Err(RenderError::BandOutOfRange { index: 2, bands: 2 })
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cube = cube_from(crate::testutil::seeded_tensor(601, 1, 6, 6, 4, 0.0, 1.0));
        assert_eq!(
            render_false_color(&cube, [3, 1, 0]).unwrap(),
            render_false_color(&cube, [3, 1, 0]).unwrap()
        );
    }
}
