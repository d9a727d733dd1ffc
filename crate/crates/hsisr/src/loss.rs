//! Training objective: weighted MSE plus squared forward-difference errors
//! along the spatial axes and along the band axis.
//!
//! Each difference term is normalized by its own count of valid stencil
//! positions (boundary positions are excluded), and the horizontal and
//! vertical spatial terms are normalized separately before being summed.
//! Loss values accumulate in f64 regardless of tensor precision; gradients
//! come back in the tensor's own precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss weights must be nonnegative")]
    NegativeWeight,
}

/// Weights of the three loss components. Defaults: 2.0 for MSE and 0.1 for
/// each gradient term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_spatial: f64,
    pub w_spectral: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mse: 2.0,
            w_spatial: 0.1,
            w_spectral: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.w_mse < 0.0 || self.w_spatial < 0.0 || self.w_spectral < 0.0 {
            return Err(LossError::NegativeWeight);
        }
        Ok(())
    }
}

/// A decomposed loss evaluation: `total = w_mse*mse + w_spatial*spatial +
/// w_spectral*spectral`, every component nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub spatial: f64,
    pub spectral: f64,
}

fn check_same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), LossError> {
    if !a.same_dims(b) {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            left: a.dims(),
            right: b.dims(),
        }));
    }
    Ok(())
}

/// Mean squared error over all `B*H*W*C` elements and its gradient
/// `2 (pred - true) / N` with respect to the prediction.
pub fn mse_loss<T: Scalar>(
    z_true: &Tensor<T>,
    z_pred: &Tensor<T>,
) -> Result<(f64, Tensor<T>), LossError> {
    check_same_dims(z_true, z_pred)?;
    let n = z_true.len() as f64;
    let scale = T::from_f64(2.0 / n);
    let mut sum = 0.0;
    let grad: Vec<T> = z_pred
        .data()
        .iter()
        .zip(z_true.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.to_f64() * d.to_f64();
            d * scale
        })
        .collect();
    let (b, h, w, c) = z_true.dims();
    Ok((sum / n, Tensor::from_parts(b, h, w, c, grad)))
}

/// Squared error of forward differences along x and y. The horizontal term
/// averages over `B*H*(W-1)*C` positions and the vertical term over
/// `B*(H-1)*W*C`; each difference contributes `±2Δ/N` to its two stencil
/// cells. Zero (with zero gradient) when the image has no valid differences.
pub fn spatial_gradient_loss<T: Scalar>(
    z_true: &Tensor<T>,
    z_pred: &Tensor<T>,
) -> Result<(f64, Tensor<T>), LossError> {
    check_same_dims(z_true, z_pred)?;
    let (b, h, w, c) = z_true.dims();
    let mut grad = vec![T::zero(); z_true.len()];
    let mut value = 0.0;

    let n_h = (b * h * (w.saturating_sub(1)) * c) as f64;
    if n_h > 0.0 {
        let scale = T::from_f64(2.0 / n_h);
        let mut sum = 0.0;
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w - 1 {
                    let base = z_true.idx(bi, hi, wi, 0);
                    let next = z_true.idx(bi, hi, wi + 1, 0);
                    for ci in 0..c {
                        let dp = z_pred.data()[next + ci] - z_pred.data()[base + ci];
                        let dt = z_true.data()[next + ci] - z_true.data()[base + ci];
                        let diff = dp - dt;
                        sum += diff.to_f64() * diff.to_f64();
                        let g = diff * scale;
                        grad[next + ci] += g;
                        grad[base + ci] -= g;
                    }
                }
            }
        }
        value += sum / n_h;
    }

    let n_v = ((h.saturating_sub(1)) * b * w * c) as f64;
    if n_v > 0.0 {
        let scale = T::from_f64(2.0 / n_v);
        let mut sum = 0.0;
        for bi in 0..b {
            for hi in 0..h - 1 {
                for wi in 0..w {
                    let base = z_true.idx(bi, hi, wi, 0);
                    let next = z_true.idx(bi, hi + 1, wi, 0);
                    for ci in 0..c {
                        let dp = z_pred.data()[next + ci] - z_pred.data()[base + ci];
                        let dt = z_true.data()[next + ci] - z_true.data()[base + ci];
                        let diff = dp - dt;
                        sum += diff.to_f64() * diff.to_f64();
                        let g = diff * scale;
                        grad[next + ci] += g;
                        grad[base + ci] -= g;
                    }
                }
            }
        }
        value += sum / n_v;
    }

    Ok((value, Tensor::from_parts(b, h, w, c, grad)))
}

/// Squared error of forward differences along the band axis, averaged over
/// `B*H*W*(C-1)` positions. Zero when there is a single band.
pub fn spectral_gradient_loss<T: Scalar>(
    z_true: &Tensor<T>,
    z_pred: &Tensor<T>,
) -> Result<(f64, Tensor<T>), LossError> {
    check_same_dims(z_true, z_pred)?;
    let (b, h, w, c) = z_true.dims();
    let mut grad = vec![T::zero(); z_true.len()];
    if c < 2 {
        return Ok((0.0, Tensor::from_parts(b, h, w, c, grad)));
    }
    let n = (b * h * w * (c - 1)) as f64;
    let scale = T::from_f64(2.0 / n);
    let mut sum = 0.0;
    let pd = z_pred.data();
    let td = z_true.data();
    for (px, (ppx, tpx)) in grad
        .chunks_exact_mut(c)
        .zip(pd.chunks_exact(c).zip(td.chunks_exact(c)))
    {
        for ci in 0..c - 1 {
            let diff = (ppx[ci + 1] - ppx[ci]) - (tpx[ci + 1] - tpx[ci]);
            sum += diff.to_f64() * diff.to_f64();
            let g = diff * scale;
            px[ci + 1] += g;
            px[ci] -= g;
        }
    }
    Ok((sum / n, Tensor::from_parts(b, h, w, c, grad)))
}

/// Weighted sum of the three components and its gradient with respect to the
/// prediction.
pub fn total_loss<T: Scalar>(
    z_true: &Tensor<T>,
    z_pred: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(LossValue, Tensor<T>), LossError> {
    weights.validate()?;
    let (mse, g_mse) = mse_loss(z_true, z_pred)?;
    let (spatial, g_sp) = spatial_gradient_loss(z_true, z_pred)?;
    let (spectral, g_sc) = spectral_gradient_loss(z_true, z_pred)?;

    let (b, h, w, c) = z_true.dims();
    let wm = T::from_f64(weights.w_mse);
    let ws = T::from_f64(weights.w_spatial);
    let wc = T::from_f64(weights.w_spectral);
    let grad: Vec<T> = g_mse
        .data()
        .iter()
        .zip(g_sp.data())
        .zip(g_sc.data())
        .map(|((&m, &s), &l)| wm * m + ws * s + wc * l)
        .collect();

    Ok((
        LossValue {
            total: weights.w_mse * mse + weights.w_spatial * spatial + weights.w_spectral * spectral,
            mse,
            spatial,
            spectral,
        },
        Tensor::from_parts(b, h, w, c, grad),
    ))
}
