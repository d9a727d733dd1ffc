//! The super-resolution network: a spectral-unmixing branch (two 1x1
//! convolutions) and a spectral–spatial branch (parallel 3x3 and 1x1
//! convolutions fused by a 1x1), concatenated and mixed by a 3x3 convolution,
//! refined by residual blocks, and projected back to the input band count.
//! The network is resolution-preserving; inputs are pre-upsampled cubes.
//!
//! The graph is fixed, so the backward pass is written by hand: every forward
//! stores exactly the values its backward needs in a [`ForwardTape`], and
//! [`hdl_backward`] consumes the tape once.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcheck::{BranchHasher, ParamStore};
use crate::ops::{
    activate, activate_backward, add, batchnorm_backward, batchnorm_infer, batchnorm_train,
    concat_channels, conv2d, conv2d_backward, split_channels, BnCache,
};
use crate::tensor::{
    ActivationKind, BatchNormState, ConvKernel, Padding, Scalar, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("residual block index {got} out of range (model has {count})")]
    BlockIndex { got: usize, count: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Hyperparameters that fully determine the parameter set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of spectral bands C of the input and output cubes.
    pub bands: usize,
    /// Internal feature width F.
    pub feature_width: usize,
    pub num_residual_blocks: usize,
    /// Add the pre-upsampled input to the head output.
    pub global_residual: bool,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl ModelConfig {
    pub const DEFAULT_FEATURE_WIDTH: usize = 56;
    pub const DEFAULT_RESIDUAL_BLOCKS: usize = 3;

    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            feature_width: Self::DEFAULT_FEATURE_WIDTH,
            num_residual_blocks: Self::DEFAULT_RESIDUAL_BLOCKS,
            global_residual: true,
            activation: ActivationKind::ReLU,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.bands < 1 {
            return Err(ModelError::Config("bands must be at least 1".into()));
        }
        if self.feature_width < 1 {
            return Err(ModelError::Config("feature_width must be at least 1".into()));
        }
        if self.num_residual_blocks < 1 {
            return Err(ModelError::Config(
                "num_residual_blocks must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical leaf-tensor names, in construction order. This set, and
    /// nothing else, is what checkpoints must contain.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut names = vec![
            "unmix.w1.weight".to_string(),
            "unmix.w1.bias".to_string(),
            "unmix.w2.weight".to_string(),
            "unmix.w2.bias".to_string(),
            "ss.spatial.weight".to_string(),
            "ss.spatial.bias".to_string(),
            "ss.spectral.weight".to_string(),
            "ss.spectral.bias".to_string(),
            "ss.fuse.weight".to_string(),
            "ss.fuse.bias".to_string(),
            "ssuf.conv.weight".to_string(),
            "ssuf.conv.bias".to_string(),
        ];
        for i in 0..self.num_residual_blocks {
            names.push(format!("res{i}.conv1.weight"));
            names.push(format!("res{i}.conv1.bias"));
            names.push(format!("res{i}.conv2.weight"));
            names.push(format!("res{i}.conv2.bias"));
            names.push(format!("res{i}.bn.gamma"));
            names.push(format!("res{i}.bn.beta"));
            names.push(format!("res{i}.bn.running_mean"));
            names.push(format!("res{i}.bn.running_var"));
        }
        names.push("head.out.weight".to_string());
        names.push("head.out.bias".to_string());
        names
    }

    /// Leaves updated by the optimizer: everything except running statistics.
    pub fn trainable_leaf_names(&self) -> Vec<String> {
        self.leaf_names()
            .into_iter()
            .filter(|n| is_trainable(n))
            .collect()
    }
}

pub fn is_trainable(leaf: &str) -> bool {
    !leaf.ends_with(".running_mean") && !leaf.ends_with(".running_var")
}

/// Closed-form trainable parameter count: convolution weights and biases plus
/// the two affine batch-norm vectors per block. Running statistics are not
/// trainable and are excluded.
pub fn param_count(config: &ModelConfig) -> usize {
    let c = config.bands;
    let f = config.feature_width;
    let n = config.num_residual_blocks;
    let unmix = (c * f + f) + (f * f + f);
    let ss = (9 * c * f + f) + (c * f + f) + (2 * f * f + f);
    let ssuf = 9 * 2 * f * f + f;
    let per_block = 2 * (9 * f * f + f) + 2 * f;
    let head = 9 * f * c + c;
    unmix + ss + ssuf + n * per_block + head
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams<T> {
    pub conv1: ConvKernel<T>,
    pub conv2: ConvKernel<T>,
    pub bn: BatchNormState<T>,
}

/// All parameters of the network. Shapes are fixed by the embedded config;
/// `validate` re-checks them after deserialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub unmix_w1: ConvKernel<T>,
    pub unmix_w2: ConvKernel<T>,
    pub ss_spatial: ConvKernel<T>,
    pub ss_spectral: ConvKernel<T>,
    pub ss_fuse: ConvKernel<T>,
    pub ssuf_conv: ConvKernel<T>,
    pub blocks: Vec<ResidualBlockParams<T>>,
    pub head: ConvKernel<T>,
}

/// Draws fan-in-scaled uniform weights `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`
/// from a ChaCha20 stream seeded with `config.seed`; biases start at zero and
/// batch norm at `gamma = 1, beta = 0`, running stats `(0, 1)`.
///
/// The output head starts at exactly zero so that, with the global residual
/// enabled, a fresh network is the identity over its pre-upsampled input and
/// training begins from the interpolation baseline rather than from noise.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let c = config.bands;
    let f = config.feature_width;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut draw = |kh: usize, kw: usize, cin: usize, cout: usize| -> ConvKernel<T> {
        let bound = (6.0 / (kh * kw * cin) as f64).sqrt();
        let weights = (0..kh * kw * cin * cout)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        ConvKernel::new(kh, kw, cin, cout, weights, Some(vec![T::zero(); cout]))
            .expect("init shapes are consistent")
    };

    let unmix_w1 = draw(1, 1, c, f);
    let unmix_w2 = draw(1, 1, f, f);
    let ss_spatial = draw(3, 3, c, f);
    let ss_spectral = draw(1, 1, c, f);
    let ss_fuse = draw(1, 1, 2 * f, f);
    let ssuf_conv = draw(3, 3, 2 * f, f);
    let blocks = (0..config.num_residual_blocks)
        .map(|_| ResidualBlockParams {
            conv1: draw(3, 3, f, f),
            conv2: draw(3, 3, f, f),
            bn: BatchNormState::new(f),
        })
        .collect();
    let head = ConvKernel::zeros(3, 3, f, c);

    Ok(ModelParams {
        config: config.clone(),
        unmix_w1,
        unmix_w2,
        ss_spatial,
        ss_spectral,
        ss_fuse,
        ssuf_conv,
        blocks,
        head,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Checks every kernel and norm state against the embedded config.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = self.config.bands;
        let f = self.config.feature_width;
        let expect = |ok: bool, what: &str| -> Result<(), ModelError> {
            if ok {
                Ok(())
            } else {
                Err(ModelError::Config(format!("{what} has the wrong shape")))
            }
        };
        let shape = |k: &ConvKernel<T>, kh: usize, cin: usize, cout: usize| {
            k.kh() == kh && k.kw() == kh && k.cin() == cin && k.cout() == cout && k.bias().is_some()
        };
        expect(shape(&self.unmix_w1, 1, c, f), "unmix.w1")?;
        expect(shape(&self.unmix_w2, 1, f, f), "unmix.w2")?;
        expect(shape(&self.ss_spatial, 3, c, f), "ss.spatial")?;
        expect(shape(&self.ss_spectral, 1, c, f), "ss.spectral")?;
        expect(shape(&self.ss_fuse, 1, 2 * f, f), "ss.fuse")?;
        expect(shape(&self.ssuf_conv, 3, 2 * f, f), "ssuf.conv")?;
        expect(
            self.blocks.len() == self.config.num_residual_blocks,
            "residual block list",
        )?;
        for (i, b) in self.blocks.iter().enumerate() {
            expect(shape(&b.conv1, 3, f, f), &format!("res{i}.conv1"))?;
            expect(shape(&b.conv2, 3, f, f), &format!("res{i}.conv2"))?;
            expect(b.bn.channels() == f, &format!("res{i}.bn"))?;
            b.bn.validate()?;
        }
        expect(shape(&self.head, 3, f, c), "head.out")?;
        Ok(())
    }

    /// Total trainable element count by enumeration; must equal
    /// [`param_count`] of the config.
    pub fn element_count(&self) -> usize {
        let kernels = [
            &self.unmix_w1,
            &self.unmix_w2,
            &self.ss_spatial,
            &self.ss_spectral,
            &self.ss_fuse,
            &self.ssuf_conv,
            &self.head,
        ];
        let mut total: usize = kernels.iter().map(|k| k.param_count()).sum();
        for b in &self.blocks {
            total += b.conv1.param_count() + b.conv2.param_count();
            total += b.bn.gamma.len() + b.bn.beta.len();
        }
        total
    }

    /// Leaf tensors in canonical order: `(name, dims, values)`. Dims use the
    /// kernel layout `(kh, kw, cin, cout)` for weights and a single length
    /// for vectors.
    pub fn leaf_entries(&self) -> Vec<(String, Vec<u32>, Vec<T>)> {
        fn kernel_entries<T: Scalar>(
            out: &mut Vec<(String, Vec<u32>, Vec<T>)>,
            name: &str,
            k: &ConvKernel<T>,
        ) {
            out.push((
                format!("{name}.weight"),
                vec![k.kh() as u32, k.kw() as u32, k.cin() as u32, k.cout() as u32],
                k.weights().to_vec(),
            ));
            if let Some(b) = k.bias() {
                out.push((format!("{name}.bias"), vec![b.len() as u32], b.to_vec()));
            }
        }
        let mut out = Vec::new();
        kernel_entries(&mut out, "unmix.w1", &self.unmix_w1);
        kernel_entries(&mut out, "unmix.w2", &self.unmix_w2);
        kernel_entries(&mut out, "ss.spatial", &self.ss_spatial);
        kernel_entries(&mut out, "ss.spectral", &self.ss_spectral);
        kernel_entries(&mut out, "ss.fuse", &self.ss_fuse);
        kernel_entries(&mut out, "ssuf.conv", &self.ssuf_conv);
        for (i, b) in self.blocks.iter().enumerate() {
            kernel_entries(&mut out, &format!("res{i}.conv1"), &b.conv1);
            kernel_entries(&mut out, &format!("res{i}.conv2"), &b.conv2);
            let c = b.bn.gamma.len() as u32;
            out.push((format!("res{i}.bn.gamma"), vec![c], b.bn.gamma.clone()));
            out.push((format!("res{i}.bn.beta"), vec![c], b.bn.beta.clone()));
            out.push((
                format!("res{i}.bn.running_mean"),
                vec![c],
                b.bn.running_mean.clone(),
            ));
            out.push((
                format!("res{i}.bn.running_var"),
                vec![c],
                b.bn.running_var.clone(),
            ));
        }
        kernel_entries(&mut out, "head.out", &self.head);
        out
    }

    fn kernel_mut(&mut self, group: &str) -> Option<&mut ConvKernel<T>> {
        match group {
            "unmix.w1" => Some(&mut self.unmix_w1),
            "unmix.w2" => Some(&mut self.unmix_w2),
            "ss.spatial" => Some(&mut self.ss_spatial),
            "ss.spectral" => Some(&mut self.ss_spectral),
            "ss.fuse" => Some(&mut self.ss_fuse),
            "ssuf.conv" => Some(&mut self.ssuf_conv),
            "head.out" => Some(&mut self.head),
            _ => {
                let idx: usize = group.strip_prefix("res")?.split('.').next()?.parse().ok()?;
                let field = group.split_once('.')?.1;
                let block = self.blocks.get_mut(idx)?;
                match field {
                    "conv1" => Some(&mut block.conv1),
                    "conv2" => Some(&mut block.conv2),
                    _ => None,
                }
            }
        }
    }

    /// Mutable view of a leaf by canonical name.
    pub fn leaf_slice_mut(&mut self, name: &str) -> Option<&mut [T]> {
        if let Some(group) = name.strip_suffix(".weight") {
            return Some(self.kernel_mut(group)?.weights_mut());
        }
        if let Some(group) = name.strip_suffix(".bias") {
            return self.kernel_mut(group)?.bias_mut();
        }
        // Batch-norm vectors: res{i}.bn.{gamma,beta,running_mean,running_var}
        let rest = name.strip_prefix("res")?;
        let (idx, field) = rest.split_once(".bn.")?;
        let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "gamma" => Some(&mut block.bn.gamma),
            "beta" => Some(&mut block.bn.beta),
            "running_mean" => Some(&mut block.bn.running_mean),
            "running_var" => Some(&mut block.bn.running_var),
            _ => None,
        }
        .map(|v| v.as_mut_slice())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            unmix_w1: self.unmix_w1.cast(),
            unmix_w2: self.unmix_w2.cast(),
            ss_spatial: self.ss_spatial.cast(),
            ss_spectral: self.ss_spectral.cast(),
            ss_fuse: self.ss_fuse.cast(),
            ssuf_conv: self.ssuf_conv.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlockParams {
                    conv1: b.conv1.cast(),
                    conv2: b.conv2.cast(),
                    bn: b.bn.cast(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }
}

/// Gradient checking perturbs trainable leaves of an `f64` parameter set.
impl ParamStore for ModelParams<f64> {
    fn leaf_names(&self) -> Vec<String> {
        self.config.trainable_leaf_names()
    }

    fn leaf(&self, name: &str) -> Option<&[f64]> {
        self.leaf_ref(name)
    }

    fn leaf_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.leaf_slice_mut(name)
    }
}

impl<T: Scalar> ModelParams<T> {
    fn kernel_ref(&self, group: &str) -> Option<&ConvKernel<T>> {
        match group {
            "unmix.w1" => Some(&self.unmix_w1),
            "unmix.w2" => Some(&self.unmix_w2),
            "ss.spatial" => Some(&self.ss_spatial),
            "ss.spectral" => Some(&self.ss_spectral),
            "ss.fuse" => Some(&self.ss_fuse),
            "ssuf.conv" => Some(&self.ssuf_conv),
            "head.out" => Some(&self.head),
            _ => {
                let idx: usize = group.strip_prefix("res")?.split('.').next()?.parse().ok()?;
                let field = group.split_once('.')?.1;
                let block = self.blocks.get(idx)?;
                match field {
                    "conv1" => Some(&block.conv1),
                    "conv2" => Some(&block.conv2),
                    _ => None,
                }
            }
        }
    }

    /// Shared view of a leaf by canonical name.
    pub fn leaf_ref(&self, name: &str) -> Option<&[T]> {
        if let Some(group) = name.strip_suffix(".weight") {
            return Some(self.kernel_ref(group)?.weights());
        }
        if let Some(group) = name.strip_suffix(".bias") {
            return self.kernel_ref(group)?.bias();
        }
        let rest = name.strip_prefix("res")?;
        let (idx, field) = rest.split_once(".bn.")?;
        let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
        match field {
            "gamma" => Some(block.bn.gamma.as_slice()),
            "beta" => Some(block.bn.beta.as_slice()),
            "running_mean" => Some(block.bn.running_mean.as_slice()),
            "running_var" => Some(block.bn.running_var.as_slice()),
            _ => None,
        }
    }
}

/// Whether batch norm uses batch statistics (train) or running ones (infer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Named gradients for every trainable leaf.
pub type GradMap<T> = BTreeMap<String, Vec<T>>;

/// Spectral unmixing branch: two 1x1 convolutions with activation,
/// `phi(W2 * phi(W1 * x))`. Purely per-pixel, no spatial mixing.
pub fn spectral_unmixing_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
) -> Result<Tensor<T>, ModelError> {
    let act = p.config.activation;
    let u1 = activate(&conv2d(x, &p.unmix_w1, Padding::Same)?, act);
    Ok(activate(&conv2d(&u1, &p.unmix_w2, Padding::Same)?, act))
}

/// Spectral–spatial branch: a 3x3 spatial convolution and a 1x1 spectral
/// convolution in parallel, each activated, concatenated (spatial first) and
/// fused by an activated 1x1 convolution.
pub fn spectral_spatial_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
) -> Result<Tensor<T>, ModelError> {
    let act = p.config.activation;
    let s = activate(&conv2d(x, &p.ss_spatial, Padding::Same)?, act);
    let l = activate(&conv2d(x, &p.ss_spectral, Padding::Same)?, act);
    let cat = concat_channels(&s, &l)?;
    Ok(activate(&conv2d(&cat, &p.ss_fuse, Padding::Same)?, act))
}

/// Full fusion block: both branches concatenated (unmixing first) and mixed
/// by an activated 3x3 convolution down to the feature width.
pub fn ssuf_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
) -> Result<Tensor<T>, ModelError> {
    let u = spectral_unmixing_forward(x, p)?;
    let y = spectral_spatial_forward(x, p)?;
    let cat = concat_channels(&u, &y)?;
    Ok(activate(
        &conv2d(&cat, &p.ssuf_conv, Padding::Same)?,
        p.config.activation,
    ))
}

/// One residual block: conv → activation → conv → batch norm → identity
/// skip → activation. Shape-preserving on feature maps.
pub fn residual_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
    index: usize,
    mode: Mode,
) -> Result<Tensor<T>, ModelError> {
    let block = p.blocks.get(index).ok_or(ModelError::BlockIndex {
        got: index,
        count: p.blocks.len(),
    })?;
    let act = p.config.activation;
    let r1 = activate(&conv2d(x, &block.conv1, Padding::Same)?, act);
    let r2 = conv2d(&r1, &block.conv2, Padding::Same)?;
    let normed = match mode {
        Mode::Train => batchnorm_train(&r2, &block.bn)?.0,
        Mode::Infer => batchnorm_infer(&r2, &block.bn)?,
    };
    Ok(activate(&add(&normed, x)?, act))
}

/// Full forward pass on a pre-upsampled cube. In train mode batch norm uses
/// batch statistics (use [`hdl_forward_train`] when gradients or running-stat
/// updates are needed); in infer mode the pass is deterministic.
pub fn hdl_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
    mode: Mode,
) -> Result<Tensor<T>, ModelError> {
    match mode {
        Mode::Train => Ok(hdl_forward_train(x, p)?.0),
        Mode::Infer => {
            let mut h = ssuf_forward(x, p)?;
            for i in 0..p.blocks.len() {
                h = residual_block_forward(&h, p, i, Mode::Infer)?;
            }
            let out = conv2d(&h, &p.head, Padding::Same)?;
            if p.config.global_residual {
                Ok(add(&out, x)?)
            } else {
                Ok(out)
            }
        }
    }
}

struct BlockTape<T> {
    input: Tensor<T>,
    r1_pre: Tensor<T>,
    bn_cache: BnCache<T>,
    sum_pre: Tensor<T>,
}

/// Everything the backward pass needs, captured by [`hdl_forward_train`].
/// Consumed exactly once by [`hdl_backward`].
pub struct ForwardTape<T> {
    x: Tensor<T>,
    u1_pre: Tensor<T>,
    u2_pre: Tensor<T>,
    s_pre: Tensor<T>,
    l_pre: Tensor<T>,
    cat_sl: Tensor<T>,
    f_pre: Tensor<T>,
    cat_u_ss: Tensor<T>,
    ssuf_pre: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    head_input: Tensor<T>,
    bn_updated: Vec<BatchNormState<T>>,
}

impl<T: Scalar> ForwardTape<T> {
    /// Batch-norm states with running statistics advanced by this pass; the
    /// trainer writes these back into the parameters after the step.
    pub fn updated_batchnorm(&self) -> &[BatchNormState<T>] {
        &self.bn_updated
    }

    /// Hash of all activation branch decisions, used by the gradient checker
    /// to discard finite-difference probes that cross a ReLU kink. Identity
    /// activation has no branches.
    pub fn branch_signature(&self, activation: ActivationKind) -> u64 {
        if activation == ActivationKind::Identity {
            return 0;
        }
        let mut h = BranchHasher::new();
        h.push_preactivation(&self.u1_pre);
        h.push_preactivation(&self.u2_pre);
        h.push_preactivation(&self.s_pre);
        h.push_preactivation(&self.l_pre);
        h.push_preactivation(&self.f_pre);
        h.push_preactivation(&self.ssuf_pre);
        for b in &self.blocks {
            h.push_preactivation(&b.r1_pre);
            h.push_preactivation(&b.sum_pre);
        }
        h.finish()
    }
}

/// Training-mode forward pass that records the tape for [`hdl_backward`].
pub fn hdl_forward_train<T: Scalar>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
) -> Result<(Tensor<T>, ForwardTape<T>), ModelError> {
    let act = p.config.activation;

    let u1_pre = conv2d(x, &p.unmix_w1, Padding::Same)?;
    let u1 = activate(&u1_pre, act);
    let u2_pre = conv2d(&u1, &p.unmix_w2, Padding::Same)?;
    let u = activate(&u2_pre, act);

    let s_pre = conv2d(x, &p.ss_spatial, Padding::Same)?;
    let s = activate(&s_pre, act);
    let l_pre = conv2d(x, &p.ss_spectral, Padding::Same)?;
    let l = activate(&l_pre, act);
    let cat_sl = concat_channels(&s, &l)?;
    let f_pre = conv2d(&cat_sl, &p.ss_fuse, Padding::Same)?;
    let y_ss = activate(&f_pre, act);

    let cat_u_ss = concat_channels(&u, &y_ss)?;
    let ssuf_pre = conv2d(&cat_u_ss, &p.ssuf_conv, Padding::Same)?;
    let mut h = activate(&ssuf_pre, act);

    let mut blocks = Vec::with_capacity(p.blocks.len());
    let mut bn_updated = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let input = h;
        let r1_pre = conv2d(&input, &block.conv1, Padding::Same)?;
        let r1 = activate(&r1_pre, act);
        let r2 = conv2d(&r1, &block.conv2, Padding::Same)?;
        let (normed, updated, bn_cache) = batchnorm_train(&r2, &block.bn)?;
        let sum_pre = add(&normed, &input)?;
        h = activate(&sum_pre, act);
        bn_updated.push(updated);
        blocks.push(BlockTape {
            input,
            r1_pre,
            bn_cache,
            sum_pre,
        });
    }

    let head_input = h;
    let out_conv = conv2d(&head_input, &p.head, Padding::Same)?;
    let out = if p.config.global_residual {
        add(&out_conv, x)?
    } else {
        out_conv
    };

    Ok((
        out,
        ForwardTape {
            x: x.clone(),
            u1_pre,
            u2_pre,
            s_pre,
            l_pre,
            cat_sl,
            f_pre,
            cat_u_ss,
            ssuf_pre,
            blocks,
            head_input,
            bn_updated,
        },
    ))
}

fn insert_conv_grads<T: Scalar>(grads: &mut GradMap<T>, name: &str, dw: Vec<T>, db: Option<Vec<T>>) {
    grads.insert(format!("{name}.weight"), dw);
    if let Some(db) = db {
        grads.insert(format!("{name}.bias"), db);
    }
}

/// Hand-derived reverse pass over the fixed graph. Returns a gradient for
/// every trainable leaf plus the gradient with respect to the input.
pub fn hdl_backward<T: Scalar>(
    p: &ModelParams<T>,
    tape: ForwardTape<T>,
    d_out: &Tensor<T>,
) -> Result<(GradMap<T>, Tensor<T>), ModelError> {
    let act = p.config.activation;
    let mut grads: GradMap<T> = BTreeMap::new();

    // Head projection; with the global skip the same upstream gradient also
    // flows directly to the input.
    let head_g = conv2d_backward(&tape.head_input, &p.head, Padding::Same, d_out)?;
    insert_conv_grads(&mut grads, "head.out", head_g.dw, head_g.db);
    let mut d_h = head_g.dx;

    for (i, (block, bt)) in p.blocks.iter().zip(tape.blocks).enumerate().rev() {
        let d_sum = activate_backward(&bt.sum_pre, &d_h, act)?;
        let (d_r2, dgamma, dbeta) = batchnorm_backward(bt.bn_cache, &block.bn.gamma, &d_sum)?;
        grads.insert(format!("res{i}.bn.gamma"), dgamma);
        grads.insert(format!("res{i}.bn.beta"), dbeta);
        let r1 = activate(&bt.r1_pre, act);
        let g2 = conv2d_backward(&r1, &block.conv2, Padding::Same, &d_r2)?;
        insert_conv_grads(&mut grads, &format!("res{i}.conv2"), g2.dw, g2.db);
        let d_r1_pre = activate_backward(&bt.r1_pre, &g2.dx, act)?;
        let g1 = conv2d_backward(&bt.input, &block.conv1, Padding::Same, &d_r1_pre)?;
        insert_conv_grads(&mut grads, &format!("res{i}.conv1"), g1.dw, g1.db);
        // Skip connection: the block input receives d_sum directly.
        d_h = add(&g1.dx, &d_sum)?;
    }

    let d_ssuf_pre = activate_backward(&tape.ssuf_pre, &d_h, act)?;
    let g_ssuf = conv2d_backward(&tape.cat_u_ss, &p.ssuf_conv, Padding::Same, &d_ssuf_pre)?;
    insert_conv_grads(&mut grads, "ssuf.conv", g_ssuf.dw, g_ssuf.db);
    let f = p.config.feature_width;
    let (d_u, d_yss) = split_channels(&g_ssuf.dx, f)?;

    // Unmixing branch.
    let d_u2_pre = activate_backward(&tape.u2_pre, &d_u, act)?;
    let u1 = activate(&tape.u1_pre, act);
    let g_w2 = conv2d_backward(&u1, &p.unmix_w2, Padding::Same, &d_u2_pre)?;
    insert_conv_grads(&mut grads, "unmix.w2", g_w2.dw, g_w2.db);
    let d_u1_pre = activate_backward(&tape.u1_pre, &g_w2.dx, act)?;
    let g_w1 = conv2d_backward(&tape.x, &p.unmix_w1, Padding::Same, &d_u1_pre)?;
    insert_conv_grads(&mut grads, "unmix.w1", g_w1.dw, g_w1.db);

    // Spectral–spatial branch.
    let d_f_pre = activate_backward(&tape.f_pre, &d_yss, act)?;
    let g_fuse = conv2d_backward(&tape.cat_sl, &p.ss_fuse, Padding::Same, &d_f_pre)?;
    insert_conv_grads(&mut grads, "ss.fuse", g_fuse.dw, g_fuse.db);
    let (d_s, d_l) = split_channels(&g_fuse.dx, f)?;
    let d_s_pre = activate_backward(&tape.s_pre, &d_s, act)?;
    let g_spatial = conv2d_backward(&tape.x, &p.ss_spatial, Padding::Same, &d_s_pre)?;
    insert_conv_grads(&mut grads, "ss.spatial", g_spatial.dw, g_spatial.db);
    let d_l_pre = activate_backward(&tape.l_pre, &d_l, act)?;
    let g_spectral = conv2d_backward(&tape.x, &p.ss_spectral, Padding::Same, &d_l_pre)?;
    insert_conv_grads(&mut grads, "ss.spectral", g_spectral.dw, g_spectral.db);

    let mut dx = add(&g_w1.dx, &g_spatial.dx)?;
    dx = add(&dx, &g_spectral.dx)?;
    if p.config.global_residual {
        dx = add(&dx, d_out)?;
    }
    Ok((grads, dx))
}
