//! Central finite-difference gradient checking for named parameter sets.
//!
//! The checker perturbs one element at a time and compares
//! `(f(p + h) - f(p - h)) / 2h` with the analytic gradient supplied by the
//! caller. It runs in 64-bit precision; 32-bit central differences cannot
//! reliably resolve the 1e-4 tolerance used throughout this crate.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// One objective evaluation: the scalar value plus a hash of every branch
/// decision taken (ReLU active masks). If a perturbation flips a branch the
/// difference quotient straddles a kink and that element is skipped instead
/// of compared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutput {
    pub value: f64,
    pub branch_signature: u64,
}

impl From<f64> for EvalOutput {
    fn from(value: f64) -> Self {
        Self {
            value,
            branch_signature: 0,
        }
    }
}

/// Incremental hash over branch decisions (one bit per ReLU element).
#[derive(Clone, Copy, Debug, Default)]
pub struct BranchHasher(u64);

impl BranchHasher {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    #[inline]
    pub fn push(&mut self, active: bool) {
        self.0 = self.0.wrapping_mul(0x100_0000_01b3) ^ (active as u64 + 1);
    }

    pub fn push_preactivation<T: crate::tensor::Scalar>(&mut self, pre: &crate::tensor::Tensor<T>) {
        for &v in pre.data() {
            self.push(v > T::zero());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Mutable access to named flat parameter tensors, the surface the checker
/// perturbs.
pub trait ParamStore {
    fn leaf_names(&self) -> Vec<String>;
    fn leaf(&self, name: &str) -> Option<&[f64]>;
    fn leaf_mut(&mut self, name: &str) -> Option<&mut [f64]>;
}

/// A plain named-tensor store for checking losses and single kernels.
#[derive(Clone, Debug, Default)]
pub struct NamedParams(pub BTreeMap<String, Vec<f64>>);

impl NamedParams {
    pub fn single(name: &str, values: Vec<f64>) -> Self {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), values);
        Self(m)
    }
}

impl ParamStore for NamedParams {
    fn leaf_names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    fn leaf(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    fn leaf_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.0.get_mut(name).map(|v| v.as_mut_slice())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step, default 1e-3.
    pub step: f64,
    /// Pass threshold on the maximum relative error, default 1e-4.
    pub tolerance: f64,
    /// Tensors up to this many elements are checked densely; larger tensors
    /// fall back to a seeded random subset.
    pub dense_limit: usize,
    /// Subset size for large tensors (at least 50 per the sampling contract).
    pub sample_size: usize,
    pub sample_seed: u64,
    /// When set, elements with current magnitude below this value are
    /// excluded; used to keep ReLU-kink neighborhoods (`|x| < 10h`) out of
    /// direct activation-input checks.
    pub skip_threshold: Option<f64>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            dense_limit: 200,
            sample_size: 64,
            sample_seed: 0,
            skip_threshold: None,
        }
    }
}

/// Per-tensor comparison summary.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl TensorCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.passes(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Worst tensors first, for failure listings.
    pub fn worst_first(&self) -> Vec<&TensorCheck> {
        let mut v: Vec<&TensorCheck> = self.tensors.iter().collect();
        v.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        v
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>8} {:>13} {:>13}  result",
            "tensor", "checked", "skipped", "max_rel_err", "max_abs_err"
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<24} {:>8} {:>8} {:>13.3e} {:>13.3e}  {}",
                t.name,
                t.checked,
                t.skipped,
                t.max_rel_err,
                t.max_abs_err,
                if t.passes(self.tolerance) { "PASS" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tolerance {:.1e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective is not deterministic: {0} vs {1} at the same point")]
    NonDeterministic(f64, f64),
    #[error("analytic gradient missing for tensor '{0}'")]
    MissingGradient(String),
    #[error("analytic gradient for '{name}' has {got} elements, expected {expected}")]
    GradientLength {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// Compares the analytic gradient of `f` with central finite differences.
///
/// Tensors above `dense_limit` elements are subsampled with a seeded
/// generator. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`. Elements whose perturbation flips a
/// branch signature are counted as skipped, not compared.
pub fn grad_check<S, F>(
    params: &mut S,
    mut f: F,
    analytic: &BTreeMap<String, Vec<f64>>,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport, GradCheckError>
where
    S: ParamStore,
    F: FnMut(&S) -> EvalOutput,
{
    if !(settings.step > 0.0) {
        return Err(GradCheckError::BadStep(settings.step));
    }
    let h = settings.step;

    let base_a = f(params);
    let base_b = f(params);
    if base_a != base_b {
        return Err(GradCheckError::NonDeterministic(base_a.value, base_b.value));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(settings.sample_seed);
    let mut tensors = Vec::new();
    for name in params.leaf_names() {
        let len = params.leaf(&name).expect("listed leaf exists").len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| GradCheckError::MissingGradient(name.clone()))?;
        if grad.len() != len {
            return Err(GradCheckError::GradientLength {
                name: name.clone(),
                expected: len,
                got: grad.len(),
            });
        }

        let indices: Vec<usize> = if len <= settings.dense_limit {
            (0..len).collect()
        } else {
            let take = settings.sample_size.max(50).min(len);
            let mut picked = rand::seq::index::sample(&mut rng, len, take).into_vec();
            picked.sort_unstable();
            picked
        };

        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in indices {
            let original = params.leaf(&name).expect("leaf")[idx];
            if let Some(t) = settings.skip_threshold {
                if original.abs() < t {
                    check.skipped += 1;
                    continue;
                }
            }
            params.leaf_mut(&name).expect("leaf")[idx] = original + h;
            let plus = f(params);
            params.leaf_mut(&name).expect("leaf")[idx] = original - h;
            let minus = f(params);
            params.leaf_mut(&name).expect("leaf")[idx] = original;

            if plus.branch_signature != base_a.branch_signature
                || minus.branch_signature != base_a.branch_signature
            {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let a = grad[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        tensors.push(check);
    }

    Ok(GradCheckReport {
        tensors,
        tolerance: settings.tolerance,
    })
}
