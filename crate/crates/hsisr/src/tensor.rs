//! Dense rank-4 tensors in `(batch, height, width, channel)` layout.
//!
//! Every activation, gradient, and image cube in this crate is a [`Tensor`].
//! Data is stored contiguously in row-major `(B, H, W, C)` order so that the
//! spectrum of a pixel is contiguous in memory. Tensors are immutable values:
//! kernels return fresh tensors instead of mutating their inputs.

use std::fmt;

use rand::distributions::uniform::SampleUniform;
use thiserror::Error;

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + SampleUniform
    + Copy
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("value representable in target precision")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("all dimensions must be at least 1, got {0}x{1}x{2}x{3}")]
    ZeroDim(usize, usize, usize, usize),
    #[error("data length {got} does not match B*H*W*C = {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("channel mismatch: input has {input} channels, expected {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize, usize),
        right: (usize, usize, usize, usize),
    },
    #[error("kernel size {0}x{1} unsupported (height and width must be 1 or 3)")]
    KernelSize(usize, usize),
    #[error("kernel weight count {got}, expected kh*kw*cin*cout = {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("bias length {got}, expected {expected} output channels")]
    BiasLength { expected: usize, got: usize },
    #[error("input {h}x{w} is smaller than the {kh}x{kw} kernel (valid padding)")]
    InputTooSmall {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    #[error("scale {0} unsupported (must be 2, 4, or 8)")]
    UnsupportedScale(usize),
    #[error("dimension {size} is not divisible by scale {scale}")]
    NotDivisible { size: usize, scale: usize },
    #[error("normalization parameter out of range: {0}")]
    BadNormParam(&'static str),
    #[error("cannot stack an empty batch")]
    EmptyStack,
}

/// Dense rank-4 array with `(B, H, W, C)` dimensions, all at least 1.
///
/// Flat index of `(b, h, w, c)` is `((b*H + h)*W + w)*C + c`. The checked
/// constructor [`Tensor::new`] rejects non-finite values; kernels preserve
/// finiteness except through arithmetic overflow, which the trainer guards
/// against at the loss boundary.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(b: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if b == 0 || h == 0 || w == 0 || c == 0 {
            return Err(TensorError::ZeroDim(b, h, w, c));
        }
        let expected = b * h * w * c;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { b, h, w, c, data })
    }

    /// Construction from values already known finite (kernel outputs).
    pub(crate) fn from_parts(b: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        debug_assert!(b >= 1 && h >= 1 && w >= 1 && c >= 1);
        debug_assert_eq!(data.len(), b * h * w * c);
        Self { b, h, w, c, data }
    }

    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        assert!(b >= 1 && h >= 1 && w >= 1 && c >= 1, "zero dimension");
        Self {
            b,
            h,
            w,
            c,
            data: vec![T::zero(); b * h * w * c],
        }
    }

    pub fn filled(b: usize, h: usize, w: usize, c: usize, value: T) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let mut t = Self::zeros(b, h, w, c);
        t.data.fill(value);
        t
    }

    /// Builds a tensor by evaluating `f(b, h, w, c)` at every position.
    /// Panics on non-finite output; intended for programmatic construction.
    pub fn from_fn(
        b: usize,
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        let v = f(bi, hi, wi, ci);
                        assert!(v.is_finite(), "from_fn produced a non-finite value");
                        data.push(v);
                    }
                }
            }
        }
        Self { b, h, w, c, data }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.b, self.h, self.w, self.c)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.b
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert!(b < self.b && h < self.h && w < self.w && c < self.c);
        ((b * self.h + h) * self.w + w) * self.c + c
    }

    #[inline]
    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.idx(b, h, w, c)]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            b: self.b,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element precision, e.g. `f32` training tensors to `f64` for
    /// gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            b: self.b,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64()))
                .collect(),
        }
    }

    /// Concatenates single-sample tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyStack)?;
        let (_, h, w, c) = first.dims();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut b = 0;
        for p in parts {
            if (p.h, p.w, p.c) != (h, w, c) {
                return Err(TensorError::ShapeMismatch {
                    left: first.dims(),
                    right: p.dims(),
                });
            }
            b += p.b;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { b, h, w, c, data })
    }

    /// Extracts sample `index` as a batch-1 tensor.
    pub fn batch_slice(&self, index: usize) -> Tensor<T> {
        assert!(index < self.b, "batch index out of range");
        let stride = self.h * self.w * self.c;
        Tensor {
            b: 1,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor({}x{}x{}x{}, {} values)",
            self.b,
            self.h,
            self.w,
            self.c,
            self.data.len()
        )
    }
}

/// Weights of a 2-D convolution in `(kh, kw, cin, cout)` row-major layout,
/// with an optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    weights: Vec<T>,
    bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        weights: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self, TensorError> {
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(TensorError::KernelSize(kh, kw));
        }
        if cin == 0 || cout == 0 {
            return Err(TensorError::ZeroDim(kh, kw, cin, cout));
        }
        let expected = kh * kw * cin * cout;
        if weights.len() != expected {
            return Err(TensorError::WeightLength {
                expected,
                got: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        if let Some(b) = &bias {
            if b.len() != cout {
                return Err(TensorError::BiasLength {
                    expected: cout,
                    got: b.len(),
                });
            }
            if let Some(i) = b.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite(i));
            }
        }
        Ok(Self {
            kh,
            kw,
            cin,
            cout,
            weights,
            bias,
        })
    }

    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Self::new(
            kh,
            kw,
            cin,
            cout,
            vec![T::zero(); kh * kw * cin * cout],
            Some(vec![T::zero(); cout]),
        )
        .expect("zero kernel is always valid")
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }

    #[inline]
    pub fn cin(&self) -> usize {
        self.cin
    }

    #[inline]
    pub fn cout(&self) -> usize {
        self.cout
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub(crate) fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    #[inline]
    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    #[inline]
    pub(crate) fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    /// Flat index of weight `(i, j, ci, co)`.
    #[inline]
    pub fn w_idx(&self, i: usize, j: usize, ci: usize, co: usize) -> usize {
        ((i * self.kw + j) * self.cin + ci) * self.cout + co
    }

    /// Trainable element count: weights plus bias when present.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            kh: self.kh,
            kw: self.kw,
            cin: self.cin,
            cout: self.cout,
            weights: self
                .weights
                .iter()
                .map(|&v| U::from_f64(v.to_f64()))
                .collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Fresh state: gamma 1, beta 0, running stats (0, 1), eps 1e-5,
    /// momentum 0.1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(TensorError::ChannelMismatch {
                input: self.beta.len(),
                expected: c,
            });
        }
        if !(self.epsilon > T::zero()) {
            return Err(TensorError::BadNormParam("epsilon must be positive"));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(TensorError::BadNormParam("momentum must be in (0, 1)"));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(TensorError::BadNormParam("running_var must be nonnegative"));
        }
        for v in self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.running_mean)
            .chain(&self.running_var)
        {
            if !v.is_finite() {
                return Err(TensorError::BadNormParam("non-finite statistic"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::from_f64(x.to_f64())).collect() };
        BatchNormState {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            epsilon: U::from_f64(self.epsilon.to_f64()),
            momentum: U::from_f64(self.momentum.to_f64()),
        }
    }
}

/// Activation applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[serde(rename = "relu")]
    ReLU,
    Identity,
}

/// Spatial padding mode for convolutions (stride is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(kh-1)/2, (kw-1)/2`; output keeps the input size.
    Same,
    /// No padding; output shrinks by `k-1` per axis.
    None,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        let err = Tensor::<f32>::new(1, 2, 2, 1, vec![0.0; 3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                expected: 4,
                got: 3
            }
        );
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::<f32>::new(1, 1, 2, 1, vec![1.0, f32::NAN]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite(1));
        let err = Tensor::<f64>::new(1, 1, 2, 1, vec![f64::INFINITY, 0.0]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite(0));
    }

    #[test]
    fn new_rejects_zero_dim() {
        let err = Tensor::<f32>::new(1, 0, 2, 1, vec![]).unwrap_err();
        assert_eq!(err, TensorError::ZeroDim(1, 0, 2, 1));
    }

    #[test]
    fn indexing_is_row_major_bhwc() {
        let t = Tensor::<f32>::from_fn(2, 2, 3, 4, |b, h, w, c| {
            (((b * 2 + h) * 3 + w) * 4 + c) as f32
        });
        for b in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    for c in 0..4 {
                        assert_eq!(t.at(b, h, w, c), t.data()[t.idx(b, h, w, c)]);
                        assert_eq!(t.idx(b, h, w, c), ((b * 2 + h) * 3 + w) * 4 + c);
                    }
                }
            }
        }
    }

    #[test]
    fn stack_batch_concatenates_samples() {
        let a = Tensor::<f32>::filled(1, 2, 2, 1, 1.0);
        let b = Tensor::<f32>::filled(1, 2, 2, 1, 2.0);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), (2, 2, 2, 1));
        assert_eq!(s.batch_slice(0), a);
        assert_eq!(s.batch_slice(1), b);
    }

    #[test]
    fn stack_batch_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(1, 2, 2, 1);
        let b = Tensor::<f32>::zeros(1, 2, 3, 1);
        assert!(Tensor::stack_batch(&[&a, &b]).is_err());
    }

    #[test]
    fn kernel_validates_shapes() {
        assert!(matches!(
            ConvKernel::<f32>::new(2, 1, 1, 1, vec![0.0; 2], None),
            Err(TensorError::KernelSize(2, 1))
        ));
        assert!(matches!(
            ConvKernel::<f32>::new(3, 3, 2, 2, vec![0.0; 5], None),
            Err(TensorError::WeightLength { .. })
        ));
        assert!(matches!(
            ConvKernel::<f32>::new(1, 1, 1, 2, vec![0.0; 2], Some(vec![0.0])),
            Err(TensorError::BiasLength { .. })
        ));
    }

    #[test]
    fn batchnorm_state_validates() {
        let mut s = BatchNormState::<f32>::new(3);
        assert!(s.validate().is_ok());
        s.running_var[1] = -0.5;
        assert!(s.validate().is_err());
        let mut s = BatchNormState::<f32>::new(3);
        s.epsilon = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::from_fn(1, 2, 2, 2, |_, h, w, c| (h + w + c) as f32 * 0.25);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
