//! Non-differentiable resampling: bilinear resize (pre-upsampling) and
//! area downsampling (the degradation operator).

use crate::tensor::{Scalar, Tensor, TensorError};

/// Bilinear resize with half-pixel centers and edge clamping:
/// `src = (dst + 0.5) * (in / out) - 0.5`, clamped to `[0, in - 1]`.
///
/// Resizing to the input size is a bitwise identity. Used only as
/// preprocessing, so it has no backward pass.
pub fn bilinear_resize<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (b, h, w, c) = x.dims();
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ZeroDim(b, out_h, out_w, c));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }

    // Source coordinate and blend weight per output index, precomputed per axis.
    let axis_map = |in_size: usize, out_size: usize| -> Vec<(usize, usize, T)> {
        let ratio = in_size as f64 / out_size as f64;
        (0..out_size)
            .map(|d| {
                let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_size - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_size - 1);
                (i0, i1, T::from_f64(src - i0 as f64))
            })
            .collect()
    };
    let rows = axis_map(h, out_h);
    let cols = axis_map(w, out_w);

    let xd = x.data();
    let mut out = Vec::with_capacity(b * out_h * out_w * c);
    for bi in 0..b {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p00 = ((bi * h + y0) * w + x0) * c;
                let p01 = ((bi * h + y0) * w + x1) * c;
                let p10 = ((bi * h + y1) * w + x0) * c;
                let p11 = ((bi * h + y1) * w + x1) * c;
                if fy == T::zero() && fx == T::zero() {
                    out.extend_from_slice(&xd[p00..p00 + c]);
                    continue;
                }
                // Lerp form: exact when the blended samples are equal, so
                // constant regions survive resizing bitwise.
                for ci in 0..c {
                    let top = xd[p00 + ci] + fx * (xd[p01 + ci] - xd[p00 + ci]);
                    let bot = xd[p10 + ci] + fx * (xd[p11 + ci] - xd[p10 + ci]);
                    out.push(top + fy * (bot - top));
                }
            }
        }
    }
    Ok(Tensor::from_parts(b, out_h, out_w, c, out))
}

/// Block-mean decimation by an integer factor in `{2, 4, 8}`. Height and
/// width must divide exactly; there is no implicit cropping.
///
/// Each block is flattened row-major and reduced by adjacent pairing
/// (`[a,b,c,d] -> [a+b, c+d] -> ...`); the block size is a power of two, so
/// a constant block sums without rounding and the mean reproduces the
/// constant bitwise. The reduction order is fixed and deterministic.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>, TensorError> {
    if !matches!(scale, 2 | 4 | 8) {
        return Err(TensorError::UnsupportedScale(scale));
    }
    let (b, h, w, c) = x.dims();
    if h % scale != 0 {
        return Err(TensorError::NotDivisible { size: h, scale });
    }
    if w % scale != 0 {
        return Err(TensorError::NotDivisible { size: w, scale });
    }
    let (oh, ow) = (h / scale, w / scale);
    let inv_area = T::from_f64(1.0 / (scale * scale) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut block = vec![T::zero(); scale * scale];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    for i in 0..scale {
                        let base = ((bi * h + oy * scale + i) * w + ox * scale) * c + ci;
                        for j in 0..scale {
                            block[i * scale + j] = xd[base + j * c];
                        }
                    }
                    out.push(pairwise_sum(&mut block) * inv_area);
                }
            }
        }
    }
    Ok(Tensor::from_parts(b, oh, ow, c, out))
}

/// Adjacent-pair tree reduction over a power-of-two-length buffer
/// (scratch contents are consumed).
pub(crate) fn pairwise_sum<T: Scalar>(buf: &mut [T]) -> T {
    let mut len = buf.len();
    debug_assert!(len.is_power_of_two());
    while len > 1 {
        len /= 2;
        for i in 0..len {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
    }
    buf[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, seeded_tensor};
    use proptest::prelude::*;

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = Tensor::<f64>::filled(1, 4, 4, 3, 0.7);
        for (oh, ow) in [(2, 2), (8, 8), (5, 7), (1, 1)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert_eq!(y.dims(), (1, oh, ow, 3));
            assert!(y.data().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn bilinear_half_pixel_row() {
        // Row [0, 1] resized to length 4: direct evaluation of the
        // half-pixel formula gives [0, 0.25, 0.75, 1].
        let x = Tensor::<f64>::new(1, 1, 2, 1, vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in y.data().iter().zip(&want) {
            assert_close(*g, *w, 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_is_bitwise() {
        let x = seeded_tensor::<f32>(91, 2, 5, 7, 3, -1.0, 1.0);
        let y = bilinear_resize(&x, 5, 7).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn area_small_block_mean() {
        let x = Tensor::<f64>::new(1, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = area_downsample(&x, 2).unwrap();
        assert_eq!(y.dims(), (1, 1, 1, 1));
        assert_close(y.data()[0], 2.5, 1e-15);
    }

    #[test]
    fn area_matches_block_mean_oracle_exactly() {
        let x = seeded_tensor::<f64>(92, 2, 8, 8, 3, 0.0, 1.0);
        for s in [2usize, 4, 8] {
            let y = area_downsample(&x, s).unwrap();
            let (_, oh, ow, c) = y.dims();
            for b in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ci in 0..c {
                            // Brute-force block gather, reduced in the same
                            // documented adjacent-pair order: bitwise equal.
                            let mut block: Vec<f64> = Vec::new();
                            for i in 0..s {
                                for j in 0..s {
                                    block.push(x.at(b, oy * s + i, ox * s + j, ci));
                                }
                            }
                            let tree = pairwise_sum(&mut block) * (1.0 / (s * s) as f64);
                            assert_eq!(y.at(b, oy, ox, ci), tree);
                            // And within rounding noise of the plain mean.
                            let seq: f64 = (0..s * s)
                                .map(|k| x.at(b, oy * s + k / s, ox * s + k % s, ci))
                                .sum::<f64>()
                                / (s * s) as f64;
                            assert_close(y.at(b, oy, ox, ci), seq, 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn area_preserves_global_channel_mean() {
        let x = seeded_tensor::<f64>(93, 1, 16, 16, 4, 0.0, 1.0);
        let y = area_downsample(&x, 4).unwrap();
        for ci in 0..4 {
            let mean = |t: &Tensor<f64>| {
                let (_, h, w, _) = t.dims();
                let mut s = 0.0;
                for hh in 0..h {
                    for ww in 0..w {
                        s += t.at(0, hh, ww, ci);
                    }
                }
                s / (h * w) as f64
            };
            assert_close(mean(&x), mean(&y), 1e-12);
        }
    }

    #[test]
    fn area_rejects_bad_inputs() {
        let x = Tensor::<f32>::zeros(1, 6, 6, 1);
        assert!(matches!(
            area_downsample(&x, 3),
            Err(TensorError::UnsupportedScale(3))
        ));
        assert!(matches!(
            area_downsample(&x, 4),
            Err(TensorError::NotDivisible { size: 6, scale: 4 })
        ));
    }

    #[test]
    fn constant_cube_survives_down_up_bitwise() {
        let x = Tensor::<f32>::filled(1, 8, 8, 2, 0.7);
        let down = area_downsample(&x, 2).unwrap();
        let up = bilinear_resize(&down, 8, 8).unwrap();
        for (a, b) in x.data().iter().zip(up.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn bilinear_output_within_input_range(
            seed in 0u64..1000,
            oh in 1usize..12,
            ow in 1usize..12,
        ) {
            let x = seeded_tensor::<f64>(seed, 1, 5, 6, 2, -2.0, 2.0);
            let y = bilinear_resize(&x, oh, ow).unwrap();
            for ci in 0..2 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for h in 0..5 {
                    for w in 0..6 {
                        lo = lo.min(x.at(0, h, w, ci));
                        hi = hi.max(x.at(0, h, w, ci));
                    }
                }
                for h in 0..oh {
                    for w in 0..ow {
                        let v = y.at(0, h, w, ci);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
