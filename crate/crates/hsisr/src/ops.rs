//! Differentiable kernels: convolution, activation, batch normalization,
//! channel concatenation, and element-wise addition.
//!
//! Each forward has a matching backward that maps the upstream gradient to
//! gradients of every input. Convolution uses cross-correlation semantics
//! (no kernel flip) with stride 1. All reductions run in a fixed order, so
//! results are bitwise reproducible.

use crate::tensor::{ActivationKind, BatchNormState, ConvKernel, Padding, Scalar, Tensor, TensorError};

/// Gradients produced by [`conv2d_backward`].
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

fn conv_output_dims<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    pad: Padding,
) -> Result<(usize, usize, usize, usize), TensorError> {
    if x.channels() != k.cin() {
        return Err(TensorError::ChannelMismatch {
            input: x.channels(),
            expected: k.cin(),
        });
    }
    match pad {
        Padding::Same => Ok((k.kh() / 2, k.kw() / 2, x.height(), x.width())),
        Padding::None => {
            if x.height() < k.kh() || x.width() < k.kw() {
                return Err(TensorError::InputTooSmall {
                    h: x.height(),
                    w: x.width(),
                    kh: k.kh(),
                    kw: k.kw(),
                });
            }
            Ok((0, 0, x.height() - k.kh() + 1, x.width() - k.kw() + 1))
        }
    }
}

/// 2-D cross-correlation with stride 1 and optional per-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    pad: Padding,
) -> Result<Tensor<T>, TensorError> {
    let (ph, pw, oh, ow) = conv_output_dims(x, k, pad)?;
    let (bs, h, w, cin) = x.dims();
    let (kh, kw, cout) = (k.kh(), k.kw(), k.cout());
    let xd = x.data();
    let wd = k.weights();
    let mut out = vec![T::zero(); bs * oh * ow * cout];

    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * cout;
                let acc = &mut out[obase..obase + cout];
                if let Some(bias) = k.bias() {
                    acc.copy_from_slice(bias);
                }
                for i in 0..kh {
                    let iy = (oy + i).wrapping_sub(ph);
                    if iy >= h {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox + j).wrapping_sub(pw);
                        if ix >= w {
                            continue;
                        }
                        let xbase = ((b * h + iy) * w + ix) * cin;
                        let xrow = &xd[xbase..xbase + cin];
                        let wbase = (i * kw + j) * cin * cout;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (o, &wv) in acc.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(bs, oh, ow, cout, out))
}

/// Backward pass of [`conv2d`]: `dx` correlates `dy` with the flipped,
/// channel-transposed kernel, `dw` correlates the padded input with `dy`,
/// and `db` sums `dy` over batch and space.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let (ph, pw, oh, ow) = conv_output_dims(x, k, pad)?;
    let (bs, h, w, cin) = x.dims();
    let (kh, kw, cout) = (k.kh(), k.kw(), k.cout());
    if dy.dims() != (bs, oh, ow, cout) {
        return Err(TensorError::ShapeMismatch {
            left: dy.dims(),
            right: (bs, oh, ow, cout),
        });
    }
    let xd = x.data();
    let dyd = dy.data();
    let wd = k.weights();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = k.bias().map(|_| vec![T::zero(); cout]);

    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let dybase = ((b * oh + oy) * ow + ox) * cout;
                let dyrow = &dyd[dybase..dybase + cout];
                if let Some(db) = db.as_mut() {
                    for (acc, &g) in db.iter_mut().zip(dyrow) {
                        *acc += g;
                    }
                }
                for i in 0..kh {
                    let iy = (oy + i).wrapping_sub(ph);
                    if iy >= h {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox + j).wrapping_sub(pw);
                        if ix >= w {
                            continue;
                        }
                        let xbase = ((b * h + iy) * w + ix) * cin;
                        let wbase = (i * kw + j) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let dwrow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut s = T::zero();
                            for (co, &g) in dyrow.iter().enumerate() {
                                s += wrow[co] * g;
                                dwrow[co] += xv * g;
                            }
                            dx[xbase + ci] += s;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_parts(bs, h, w, cin, dx),
        dw,
        db,
    })
}

/// Element-wise activation. ReLU is `max(0, x)`; Identity passes through.
pub fn activate<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    match kind {
        ActivationKind::ReLU => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        ActivationKind::Identity => x.clone(),
    }
}

/// Backward of [`activate`] given the pre-activation input. The ReLU
/// subgradient at 0 is 0, so the mask is strictly `x > 0`.
pub fn activate_backward<T: Scalar>(
    x_pre: &Tensor<T>,
    dy: &Tensor<T>,
    kind: ActivationKind,
) -> Result<Tensor<T>, TensorError> {
    if !x_pre.same_dims(dy) {
        return Err(TensorError::ShapeMismatch {
            left: x_pre.dims(),
            right: dy.dims(),
        });
    }
    match kind {
        ActivationKind::Identity => Ok(dy.clone()),
        ActivationKind::ReLU => {
            let (b, h, w, c) = dy.dims();
            let data = x_pre
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Ok(Tensor::from_parts(b, h, w, c, data))
        }
    }
}

/// Values cached by the training-mode batch norm forward for its backward.
pub struct BnCache<T> {
    x: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BnCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.x
    }
}

fn check_bn_channels<T: Scalar>(x: &Tensor<T>, s: &BatchNormState<T>) -> Result<(), TensorError> {
    if x.channels() != s.channels() {
        return Err(TensorError::ChannelMismatch {
            input: x.channels(),
            expected: s.channels(),
        });
    }
    Ok(())
}

/// Training-mode batch normalization over the `(B, H, W)` axes with biased
/// variance. Returns the output, the updated running statistics
/// (`new = (1 - momentum) * old + momentum * batch`), and the backward cache.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    s: &BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormState<T>, BnCache<T>), TensorError> {
    check_bn_channels(x, s)?;
    let (b, h, w, c) = x.dims();
    let n = T::from_f64((b * h * w) as f64);
    let xd = x.data();

    let mut mean = vec![T::zero(); c];
    for px in xd.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); c];
    for px in xd.chunks_exact(c) {
        for ((acc, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| (v + s.epsilon).sqrt().recip()).collect();
    let mut out = vec![T::zero(); xd.len()];
    for (opx, px) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
        for ci in 0..c {
            opx[ci] = s.gamma[ci] * (px[ci] - mean[ci]) * inv_std[ci] + s.beta[ci];
        }
    }

    let mut updated = s.clone();
    let keep = T::one() - s.momentum;
    for ci in 0..c {
        updated.running_mean[ci] = keep * s.running_mean[ci] + s.momentum * mean[ci];
        updated.running_var[ci] = keep * s.running_var[ci] + s.momentum * var[ci];
    }

    Ok((
        Tensor::from_parts(b, h, w, c, out),
        updated,
        BnCache {
            x: x.clone(),
            mean,
            inv_std,
        },
    ))
}

/// Inference-mode batch normalization using the running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    s: &BatchNormState<T>,
) -> Result<Tensor<T>, TensorError> {
    check_bn_channels(x, s)?;
    let (b, h, w, c) = x.dims();
    let inv_std: Vec<T> = s
        .running_var
        .iter()
        .map(|&v| (v + s.epsilon).sqrt().recip())
        .collect();
    let mut out = vec![T::zero(); x.len()];
    for (opx, px) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for ci in 0..c {
            opx[ci] = s.gamma[ci] * (px[ci] - s.running_mean[ci]) * inv_std[ci] + s.beta[ci];
        }
    }
    Ok(Tensor::from_parts(b, h, w, c, out))
}

/// Full training-mode batch norm backward, including the mean and variance
/// pathways. Consumes the cache; returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: BnCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), TensorError> {
    if !cache.x.same_dims(dy) {
        return Err(TensorError::ShapeMismatch {
            left: cache.x.dims(),
            right: dy.dims(),
        });
    }
    let (b, h, w, c) = cache.x.dims();
    if gamma.len() != c {
        return Err(TensorError::ChannelMismatch {
            input: gamma.len(),
            expected: c,
        });
    }
    let n = T::from_f64((b * h * w) as f64);
    let xd = cache.x.data();
    let dyd = dy.data();

    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    // Reduction terms: sum of dxhat and sum of dxhat * (x - mean) per channel.
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xc = vec![T::zero(); c];
    for (px, gpx) in xd.chunks_exact(c).zip(dyd.chunks_exact(c)) {
        for ci in 0..c {
            let xc = px[ci] - cache.mean[ci];
            let xhat = xc * cache.inv_std[ci];
            dbeta[ci] += gpx[ci];
            dgamma[ci] += gpx[ci] * xhat;
            let dxhat = gpx[ci] * gamma[ci];
            sum_dxhat[ci] += dxhat;
            sum_dxhat_xc[ci] += dxhat * xc;
        }
    }

    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    // dvar = sum(dxhat * xc) * (-1/2) * inv_std^3
    // dmean = -inv_std * sum(dxhat) + dvar * (-2/n) * sum(xc)
    let mut dvar = vec![T::zero(); c];
    let mut dmean = vec![T::zero(); c];
    let mut sum_xc = vec![T::zero(); c];
    for px in xd.chunks_exact(c) {
        for ci in 0..c {
            sum_xc[ci] += px[ci] - cache.mean[ci];
        }
    }
    for ci in 0..c {
        let istd = cache.inv_std[ci];
        dvar[ci] = -half * sum_dxhat_xc[ci] * istd * istd * istd;
        dmean[ci] = -istd * sum_dxhat[ci] - dvar[ci] * two * sum_xc[ci] / n;
    }

    let mut dx = vec![T::zero(); xd.len()];
    for (dpx, (px, gpx)) in dx
        .chunks_exact_mut(c)
        .zip(xd.chunks_exact(c).zip(dyd.chunks_exact(c)))
    {
        for ci in 0..c {
            let xc = px[ci] - cache.mean[ci];
            let dxhat = gpx[ci] * gamma[ci];
            dpx[ci] = dxhat * cache.inv_std[ci] + dvar[ci] * two * xc / n + dmean[ci] / n;
        }
    }
    Ok((Tensor::from_parts(b, h, w, c, dx), dgamma, dbeta))
}

/// Concatenates along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (ab, ah, aw, ac) = a.dims();
    let (bb, bh, bw, bc) = b.dims();
    if (ab, ah, aw) != (bb, bh, bw) {
        return Err(TensorError::ShapeMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let c = ac + bc;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.data().chunks_exact(ac).zip(b.data().chunks_exact(bc)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Ok(Tensor::from_parts(ab, ah, aw, c, out))
}

/// Splits a tensor at channel `c_first`; the inverse of
/// [`concat_channels`] and its backward.
pub fn split_channels<T: Scalar>(
    x: &Tensor<T>,
    c_first: usize,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let (b, h, w, c) = x.dims();
    if c_first == 0 || c_first >= c {
        return Err(TensorError::ChannelMismatch {
            input: c_first,
            expected: c,
        });
    }
    let c_second = c - c_first;
    let mut first = Vec::with_capacity(b * h * w * c_first);
    let mut second = Vec::with_capacity(b * h * w * c_second);
    for px in x.data().chunks_exact(c) {
        first.extend_from_slice(&px[..c_first]);
        second.extend_from_slice(&px[c_first..]);
    }
    Ok((
        Tensor::from_parts(b, h, w, c_first, first),
        Tensor::from_parts(b, h, w, c_second, second),
    ))
}

/// Element-wise sum of two tensors of identical dimensions.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if !a.same_dims(b) {
        return Err(TensorError::ShapeMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let (bb, h, w, c) = a.dims();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_parts(bb, h, w, c, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, dot, seeded_kernel, seeded_tensor};

    /// Direct six-nested-loop convolution, written before the main kernel.
    fn conv2d_oracle<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>, pad: Padding) -> Tensor<T> {
        let (bs, h, w, cin) = x.dims();
        let (ph, pw, oh, ow) = match pad {
            Padding::Same => (k.kh() / 2, k.kw() / 2, h, w),
            Padding::None => (0, 0, h - k.kh() + 1, w - k.kw() + 1),
        };
        Tensor::from_fn(bs, oh, ow, k.cout(), |b, oy, ox, co| {
            let mut acc = k.bias().map_or(T::zero(), |bias| bias[co]);
            for i in 0..k.kh() {
                for j in 0..k.kw() {
                    for ci in 0..cin {
                        let iy = oy as isize + i as isize - ph as isize;
                        let ix = ox as isize + j as isize - pw as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc = acc
                            + x.at(b, iy as usize, ix as usize, ci)
                                * k.weights()[k.w_idx(i, j, ci, co)];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_1x1_scalar_affine() {
        let x = Tensor::<f32>::new(1, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = ConvKernel::new(1, 1, 1, 1, vec![2.0], Some(vec![1.0])).unwrap();
        let y = conv2d(&x, &k, Padding::Same).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_3x3_same_zero_padding_counts() {
        let x = Tensor::<f32>::filled(1, 3, 3, 1, 1.0);
        let k = ConvKernel::new(3, 3, 1, 1, vec![1.0; 9], Some(vec![0.0])).unwrap();
        let y = conv2d(&x, &k, Padding::Same).unwrap();
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
        assert_eq!(y.at(0, 1, 0, 0), 6.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 2, 2, 0), 4.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = seeded_tensor::<f32>(11, 2, 5, 5, 3, -1.0, 1.0);
        let k = seeded_kernel::<f32>(12, 3, 3, 3, 4, true);
        for pad in [Padding::Same, Padding::None] {
            let got = conv2d(&x, &k, pad).unwrap();
            let want = conv2d_oracle(&x, &k, pad);
            assert_eq!(got.dims(), want.dims());
            for (g, w) in got.data().iter().zip(want.data()) {
                let rel = (g - w).abs() / w.abs().max(1.0);
                assert!(rel < 1e-5, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(1, 4, 4, 2);
        let k = ConvKernel::<f32>::zeros(3, 3, 3, 4);
        assert!(matches!(
            conv2d(&x, &k, Padding::Same),
            Err(TensorError::ChannelMismatch { input: 2, expected: 3 })
        ));
    }

    #[test]
    fn conv_valid_padding_needs_room() {
        let x = Tensor::<f32>::zeros(1, 2, 5, 1);
        let k = ConvKernel::<f32>::zeros(3, 3, 1, 1);
        assert!(matches!(
            conv2d(&x, &k, Padding::None),
            Err(TensorError::InputTooSmall { .. })
        ));
        assert_eq!(
            conv2d(&x, &k, Padding::Same).unwrap().dims(),
            (1, 2, 5, 1)
        );
    }

    #[test]
    fn conv_backward_bias_is_dy_sum() {
        let x = seeded_tensor::<f64>(3, 2, 4, 4, 2, -1.0, 1.0);
        let k = seeded_kernel::<f64>(4, 3, 3, 2, 3, true);
        let dy = seeded_tensor::<f64>(5, 2, 4, 4, 3, -1.0, 1.0);
        let g = conv2d_backward(&x, &k, Padding::Same, &dy).unwrap();
        let db = g.db.unwrap();
        for co in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        s += dy.at(b, h, w, co);
                    }
                }
            }
            assert_close(db[co], s, 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, J v> == <J^T dy, v> for the linear map v -> conv(v, k) - bias.
        let x = seeded_tensor::<f64>(21, 1, 5, 5, 3, -1.0, 1.0);
        let k = seeded_kernel::<f64>(22, 3, 3, 3, 2, true);
        let v = seeded_tensor::<f64>(23, 1, 5, 5, 3, -1.0, 1.0);
        let dy = seeded_tensor::<f64>(24, 1, 5, 5, 2, -1.0, 1.0);
        let zero_bias = ConvKernel::new(3, 3, 3, 2, k.weights().to_vec(), Some(vec![0.0; 2])).unwrap();
        let jv = conv2d(&v, &zero_bias, Padding::Same).unwrap();
        let jt_dy = conv2d_backward(&x, &k, Padding::Same, &dy).unwrap().dx;
        let lhs = dot(dy.data(), jv.data());
        let rhs = dot(jt_dy.data(), v.data());
        assert_close(lhs, rhs, 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_1x1_is_spatially_local() {
        // Permuting pixel positions permutes 1x1 conv outputs identically.
        let x = seeded_tensor::<f64>(31, 1, 4, 5, 3, -1.0, 1.0);
        let k = seeded_kernel::<f64>(32, 1, 1, 3, 2, true);
        let perm = crate::testutil::seeded_permutation(33, 20);
        let xp = crate::testutil::permute_pixels(&x, &perm);
        let y = conv2d(&x, &k, Padding::Same).unwrap();
        let yp = conv2d(&xp, &k, Padding::Same).unwrap();
        assert_eq!(crate::testutil::permute_pixels(&y, &perm), yp);
    }

    #[test]
    fn conv_3x3_translation_equivariant_in_interior() {
        let x = seeded_tensor::<f64>(41, 1, 6, 6, 2, -1.0, 1.0);
        let k = seeded_kernel::<f64>(42, 3, 3, 2, 2, true);
        // Shift input down-right by one pixel into a fresh tensor.
        let shifted = Tensor::from_fn(1, 6, 6, 2, |b, h, w, c| {
            if h == 0 || w == 0 {
                0.0
            } else {
                x.at(b, h - 1, w - 1, c)
            }
        });
        let y = conv2d(&x, &k, Padding::Same).unwrap();
        let ys = conv2d(&shifted, &k, Padding::Same).unwrap();
        // Interior of the shifted output must equal the shifted interior,
        // exactly: positions whose 3x3 window stays inside both images.
        for h in 2..5 {
            for w in 2..5 {
                for c in 0..2 {
                    assert_eq!(ys.at(0, h, w, c), y.at(0, h - 1, w - 1, c));
                }
            }
        }
    }

    #[test]
    fn relu_basics() {
        let x = Tensor::<f32>::new(1, 1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = activate(&x, ActivationKind::ReLU);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        // Idempotence.
        assert_eq!(activate(&y, ActivationKind::ReLU), y);
        // Identity passes through.
        assert_eq!(activate(&x, ActivationKind::Identity), x);
    }

    #[test]
    fn relu_backward_masks_at_or_below_zero() {
        let x = Tensor::<f64>::new(1, 1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        let dy = Tensor::<f64>::new(1, 1, 3, 1, vec![1.0, 5.0, 3.0]).unwrap();
        let dx = activate_backward(&x, &dy, ActivationKind::ReLU).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn relu_adjoint_consistency() {
        let x = seeded_tensor::<f64>(51, 2, 3, 3, 2, -1.0, 1.0);
        let v = seeded_tensor::<f64>(52, 2, 3, 3, 2, -1.0, 1.0);
        let dy = seeded_tensor::<f64>(53, 2, 3, 3, 2, -1.0, 1.0);
        // J v = v masked by (x > 0); J^T dy = relu_backward.
        let jv = activate_backward(&x, &v, ActivationKind::ReLU).unwrap();
        let jt = activate_backward(&x, &dy, ActivationKind::ReLU).unwrap();
        assert_close(dot(dy.data(), jv.data()), dot(jt.data(), v.data()), 1e-12);
    }

    #[test]
    fn batchnorm_constant_input_yields_beta() {
        let x = Tensor::<f64>::filled(2, 3, 3, 2, 7.5);
        let mut s = BatchNormState::<f64>::new(2);
        s.gamma = vec![2.0, -1.0];
        s.beta = vec![0.25, -0.5];
        let (y, _, _) = batchnorm_train(&x, &s).unwrap();
        for px in y.data().chunks_exact(2) {
            assert_close(px[0], 0.25, 1e-12);
            assert_close(px[1], -0.5, 1e-12);
        }
    }

    #[test]
    fn batchnorm_two_point_batch() {
        // Values {-1, +1}: mean 0, biased variance 1, eps 1e-5.
        let x = Tensor::<f64>::new(2, 1, 1, 1, vec![-1.0, 1.0]).unwrap();
        let s = BatchNormState::<f64>::new(1);
        let (y, updated, _) = batchnorm_train(&x, &s).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_close(y.data()[0], -expect, 1e-12);
        assert_close(y.data()[1], expect, 1e-12);
        assert!((y.data()[1] - 0.999995).abs() < 1e-6);
        // Running stats moved toward the batch stats with momentum 0.1.
        assert_close(updated.running_mean[0], 0.0, 1e-12);
        assert_close(updated.running_var[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_mean_and_variance() {
        let x = seeded_tensor::<f64>(61, 4, 5, 5, 3, -2.0, 3.0);
        let s = BatchNormState::<f64>::new(3);
        let (y, _, _) = batchnorm_train(&x, &s).unwrap();
        let n = (4 * 5 * 5) as f64;
        for ci in 0..3 {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for px in y.data().chunks_exact(3) {
                mean += px[ci];
                sq += px[ci] * px[ci];
            }
            mean /= n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {ci} mean {mean}");
            // Output variance is sigma^2 / (sigma^2 + eps), slightly below 1.
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} variance {var}");
        }
    }

    #[test]
    fn batchnorm_infer_uses_running_stats() {
        let x = seeded_tensor::<f64>(62, 2, 3, 3, 2, 0.0, 1.0);
        let mut s = BatchNormState::<f64>::new(2);
        s.running_mean = vec![0.5, -0.25];
        s.running_var = vec![4.0, 0.25];
        let y = batchnorm_infer(&x, &s).unwrap();
        let e = s.epsilon;
        for (px, ypx) in x.data().chunks_exact(2).zip(y.data().chunks_exact(2)) {
            assert_close(ypx[0], (px[0] - 0.5) / (4.0 + e).sqrt(), 1e-12);
            assert_close(ypx[1], (px[1] + 0.25) / (0.25 + e).sqrt(), 1e-12);
        }
    }

    #[test]
    fn batchnorm_backward_matches_directional_derivative() {
        // Directional central difference of sum(bn(x) * dy) along v equals
        // <dx, v> from the analytic backward.
        let x = seeded_tensor::<f64>(63, 2, 4, 4, 3, -1.0, 1.0);
        let v = seeded_tensor::<f64>(64, 2, 4, 4, 3, -1.0, 1.0);
        let dy = seeded_tensor::<f64>(65, 2, 4, 4, 3, -1.0, 1.0);
        let mut s = BatchNormState::<f64>::new(3);
        s.gamma = vec![1.5, 0.75, -0.5];
        s.beta = vec![0.1, -0.2, 0.3];

        let (_, _, cache) = batchnorm_train(&x, &s).unwrap();
        let (dx, dgamma, dbeta) = batchnorm_backward(cache, &s.gamma, &dy).unwrap();

        let eval = |xt: &Tensor<f64>| -> f64 {
            let (y, _, _) = batchnorm_train(xt, &s).unwrap();
            dot(y.data(), dy.data())
        };
        let h = 1e-6;
        let xp = Tensor::new(2, 4, 4, 3, x.data().iter().zip(v.data()).map(|(&a, &b)| a + h * b).collect()).unwrap();
        let xm = Tensor::new(2, 4, 4, 3, x.data().iter().zip(v.data()).map(|(&a, &b)| a - h * b).collect()).unwrap();
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
        let analytic = dot(dx.data(), v.data());
        assert_close(numeric, analytic, 1e-6 * analytic.abs().max(1.0));

        // dbeta is the plain dy sum; dgamma weights it by xhat.
        let mut want_dbeta = [0.0; 3];
        for px in dy.data().chunks_exact(3) {
            for ci in 0..3 {
                want_dbeta[ci] += px[ci];
            }
        }
        for ci in 0..3 {
            assert_close(dbeta[ci], want_dbeta[ci], 1e-9);
        }
        assert!(dgamma.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = seeded_tensor::<f32>(71, 2, 3, 3, 2, -1.0, 1.0);
        let b = seeded_tensor::<f32>(72, 2, 3, 3, 3, -1.0, 1.0);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.dims(), (2, 3, 3, 5));
        for h in 0..3 {
            assert_eq!(cat.at(0, h, 0, 0), a.at(0, h, 0, 0));
            assert_eq!(cat.at(0, h, 0, 2), b.at(0, h, 0, 0));
        }
        let (a2, b2) = split_channels(&cat, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(1, 2, 2, 1);
        let b = Tensor::<f32>::zeros(1, 3, 2, 1);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn add_identities() {
        let a = seeded_tensor::<f64>(81, 1, 3, 4, 2, -1.0, 1.0);
        let zero = Tensor::<f64>::zeros(1, 3, 4, 2);
        assert_eq!(add(&a, &zero).unwrap(), a);
        let neg = a.map(|v| -v);
        let sum = add(&a, &neg).unwrap();
        assert!(sum.data().iter().all(|&v| v == 0.0));
        // Element-wise oracle.
        let b = seeded_tensor::<f64>(82, 1, 3, 4, 2, -1.0, 1.0);
        let s = add(&a, &b).unwrap();
        for i in 0..s.len() {
            assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn add_rejects_dim_mismatch() {
        let a = Tensor::<f32>::zeros(1, 2, 2, 1);
        let b = Tensor::<f32>::zeros(1, 2, 2, 2);
        assert!(add(&a, &b).is_err());
    }
}
