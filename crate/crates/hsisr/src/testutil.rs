//! Seeded construction helpers shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::{ConvKernel, Scalar, Tensor};

pub fn seeded_tensor<T: Scalar>(
    seed: u64,
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = (0..b * h * w * c)
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::new(b, h, w, c, data).unwrap()
}

pub fn seeded_kernel<T: Scalar>(
    seed: u64,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    with_bias: bool,
) -> ConvKernel<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let weights = (0..kh * kw * cin * cout)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    let bias = with_bias.then(|| {
        (0..cout)
            .map(|_| T::from_f64(rng.gen_range(-0.5..0.5)))
            .collect()
    });
    ConvKernel::new(kh, kw, cin, cout, weights, bias).unwrap()
}

pub fn seeded_permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Applies a permutation of flattened `(h, w)` positions to every sample and
/// channel: output pixel `i` takes the value of input pixel `perm[i]`.
pub fn permute_pixels<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let (b, h, w, c) = x.dims();
    assert_eq!(perm.len(), h * w);
    Tensor::from_fn(b, h, w, c, |bi, hi, wi, ci| {
        let src = perm[hi * w + wi];
        x.at(bi, src / w, src % w, ci)
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn assert_close(got: f64, want: f64, tol: f64) {
    assert!(
        (got - want).abs() <= tol,
        "got {got}, want {want} (tol {tol})"
    );
}

/// Relative error with the gradient-check denominator convention.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
