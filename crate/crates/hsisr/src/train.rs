//! Adam optimizer, mini-batch training loop with early stopping, and the
//! evaluation harness.
//!
//! Every random stream is derived from the train seed (per-epoch shuffles
//! use ChaCha20 stream `epoch + 1`), the optimizer state is a serial
//! dependency, and reductions run in a fixed order, so a run is bitwise
//! reproducible in single-threaded mode. Evaluation may fan out across
//! threads (`HSISR_THREADS`); results are collected in input order, so the
//! report does not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::SamplePair;
use crate::loss::{total_loss, LossError, LossValue, LossWeights};
use crate::metrics::{mpsnr, sam, MetricsError, MetricsReport};
use crate::model::{
    hdl_backward, hdl_forward, hdl_forward_train, init_params, GradMap, Mode, ModelConfig,
    ModelError, ModelParams,
};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Environment variable that sets the evaluation thread count (default 1).
pub const THREADS_ENV: &str = "HSISR_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("batch size {batch} exceeds training set size {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("band mismatch: data has {data} bands, model expects {model}")]
    BandMismatch { data: usize, model: usize },
    #[error("gradient for '{0}' is non-finite; step aborted")]
    NonFiniteGradient(String),
    #[error("parameter, gradient, and optimizer name sets disagree: {0}")]
    NameSetMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint write failed: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Full training protocol configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss_weights: LossWeights,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
    /// Save a snapshot every this many epochs (0 disables periodic saves).
    pub checkpoint_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss_weights: LossWeights::default(),
            max_epochs: 500,
            early_stop_patience: 10,
            early_stop_min_delta: 0.0,
            seed: 0,
            checkpoint_cadence: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(TrainError::Config("learning_rate must be nonnegative".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(TrainError::Config("adam_epsilon must be positive".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::Config("early_stop_patience must be at least 1".into()));
        }
        if self.early_stop_min_delta < 0.0 {
            return Err(TrainError::Config("early_stop_min_delta must be nonnegative".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// First and second Adam moments per trainable leaf, plus the step counter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    /// Zero moments shaped like the trainable leaves of `params`.
    pub fn zeros_like(params: &ModelParams<f32>) -> Self {
        let mut m = BTreeMap::new();
        for name in params.config.trainable_leaf_names() {
            let len = params.leaf_ref(&name).expect("trainable leaf exists").len();
            m.insert(name, vec![0.0f32; len]);
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update on a flat leaf: `m' = b1 m + (1-b1) g`,
/// `v' = b2 v + (1-b2) g^2`, bias-corrected by `t_new`, then
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub(crate) fn adam_update_slice<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t_new: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one_m_b1 = T::from_f64(1.0 - beta1);
    let one_m_b2 = T::from_f64(1.0 - beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - beta1.powi(t_new as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - beta2.powi(t_new as i32)));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_m_b1 * g;
        v[i] = b2 * v[i] + one_m_b2 * g * g;
        let m_hat = m[i] * corr1;
        let v_hat = v[i] * corr2;
        theta[i] = theta[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
}

/// Functional Adam step over a whole parameter set: returns the updated
/// parameters and state, leaving the inputs untouched. Rejects non-finite
/// gradients and name-set disagreements.
pub fn adam_step(
    params: &ModelParams<f32>,
    grads: &GradMap<f32>,
    state: &AdamState,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, AdamState), TrainError> {
    let names = params.config.trainable_leaf_names();
    if grads.len() != names.len() || state.m.len() != names.len() || state.v.len() != names.len() {
        return Err(TrainError::NameSetMismatch(format!(
            "expected {} leaves, got {} grads / {} moments",
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::NameSetMismatch(format!("gradient missing '{name}'")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        if !state.m.contains_key(name) || !state.v.contains_key(name) {
            return Err(TrainError::NameSetMismatch(format!("moment missing '{name}'")));
        }
    }

    let mut new_params = params.clone();
    let mut new_state = state.clone();
    new_state.step = state.step + 1;
    for name in &names {
        let theta = new_params.leaf_slice_mut(name).expect("trainable leaf");
        adam_update_slice(
            theta,
            &grads[name],
            new_state.m.get_mut(name).expect("moment"),
            new_state.v.get_mut(name).expect("moment"),
            new_state.step,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_epsilon,
        );
    }
    Ok((new_params, new_state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Replays a validation-loss history: stop once the best value has not
/// improved by more than `min_delta` for `patience` consecutive epochs.
/// Also reports the argmin epoch (earliest on ties) for checkpoint choice.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> (StopDecision, usize) {
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut decision = StopDecision::Continue;
    for &loss in history {
        if best - loss > min_delta {
            best = loss;
            bad = 0;
        } else {
            bad += 1;
            if bad >= patience {
                decision = StopDecision::Stop;
                break;
            }
        }
    }
    let mut best_idx = 0;
    for (i, &loss) in history.iter().enumerate() {
        if loss < history[best_idx] {
            best_idx = i;
        }
        let _ = i;
    }
    (decision, best_idx)
}

/// Per-epoch summary row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train: LossValue,
    pub val: LossValue,
    pub val_mpsnr: f64,
    pub val_sam: f64,
    pub seconds: f64,
}

/// Tab-separated history table; `seconds` is the only wall-clock column.
pub fn history_table(records: &[TrainRecord]) -> String {
    let mut s = String::from("epoch\ttrain_total\tval_total\tval_mpsnr\tval_sam\tseconds\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{:.9}\t{:.9}\t{:.6}\t{:.6}\t{:.3}\n",
            r.epoch, r.train.total, r.val.total, r.val_mpsnr, r.val_sam, r.seconds
        ));
    }
    s
}

/// Why training ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopped { at_epoch: usize },
    MaxEpochs,
    /// The loss went non-finite; the returned checkpoint is the last good one.
    NonFiniteLoss { at_step: u64 },
}

pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss (earliest on
    /// ties); the initial state if training aborted before the first epoch
    /// completed.
    pub checkpoint: Checkpoint,
    pub history: Vec<TrainRecord>,
    pub stop: StopReason,
}

/// Prepared dataset halves.
pub struct TrainData {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
}

fn stack_pairs(
    pairs: &[SamplePair],
    indices: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>), TensorError> {
    let lr: Vec<&Tensor<f32>> = indices.iter().map(|&i| &pairs[i].lr_up).collect();
    let hr: Vec<&Tensor<f32>> = indices.iter().map(|&i| &pairs[i].hr).collect();
    Ok((Tensor::stack_batch(&lr)?, Tensor::stack_batch(&hr)?))
}

fn mean_loss(values: &[LossValue]) -> LossValue {
    let n = values.len().max(1) as f64;
    LossValue {
        total: values.iter().map(|v| v.total).sum::<f64>() / n,
        mse: values.iter().map(|v| v.mse).sum::<f64>() / n,
        spatial: values.iter().map(|v| v.spatial).sum::<f64>() / n,
        spectral: values.iter().map(|v| v.spectral).sum::<f64>() / n,
    }
}

/// Runs the full protocol: seeded shuffled mini-batches, forward/backward,
/// Adam, per-epoch validation, early stopping, best-checkpoint tracking.
/// With a fixed seed the outcome is bitwise reproducible single-threaded.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if train_cfg.batch_size > data.train.len() {
        return Err(TrainError::BatchTooLarge {
            batch: train_cfg.batch_size,
            n: data.train.len(),
        });
    }
    let bands = data.train[0].hr.channels();
    if bands != model_cfg.bands {
        return Err(TrainError::BandMismatch {
            data: bands,
            model: model_cfg.bands,
        });
    }

    let mut params = init_params::<f32>(model_cfg)?;
    let mut adam = AdamState::zeros_like(&params);
    let snapshot = |params: &ModelParams<f32>, adam: &AdamState, epoch: u64| Checkpoint {
        config: model_cfg.clone(),
        step: adam.step,
        epoch,
        rng_seed: train_cfg.seed,
        params: params.clone(),
        adam: adam.clone(),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_good = snapshot(&params, &adam, 0);
    let mut history: Vec<TrainRecord> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();

    for epoch in 0..train_cfg.max_epochs {
        let started = Instant::now();

        // Per-epoch shuffle stream derived from (seed, epoch).
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut batch_losses = Vec::new();
        for batch in order.chunks(train_cfg.batch_size) {
            let (lr_up, hr) = stack_pairs(&data.train, batch)?;
            let (pred, tape) = hdl_forward_train(&lr_up, &params)?;
            let (loss, d_pred) = total_loss(&hr, &pred, &train_cfg.loss_weights)?;
            if !loss.total.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: best.map(|(_, c)| c).unwrap_or(last_good),
                    history,
                    stop: StopReason::NonFiniteLoss {
                        at_step: adam.step + 1,
                    },
                });
            }
            batch_losses.push(loss);
            let bn_updated = tape.updated_batchnorm().to_vec();
            let (grads, _) = hdl_backward(&params, tape, &d_pred)?;
            let stepped = match adam_step(&params, &grads, &adam, train_cfg) {
                Ok(s) => s,
                Err(TrainError::NonFiniteGradient(_)) => {
                    return Ok(TrainOutcome {
                        checkpoint: best.map(|(_, c)| c).unwrap_or(last_good),
                        history,
                        stop: StopReason::NonFiniteLoss {
                            at_step: adam.step + 1,
                        },
                    });
                }
                Err(e) => return Err(e),
            };
            params = stepped.0;
            adam = stepped.1;
            // Running statistics advance with the batch that was just seen.
            for (block, bn) in params.blocks.iter_mut().zip(&bn_updated) {
                block.bn.running_mean = bn.running_mean.clone();
                block.bn.running_var = bn.running_var.clone();
            }
        }

        // Validation in inference mode.
        let mut val_losses = Vec::new();
        let mut val_mpsnr = 0.0;
        let mut val_sam = 0.0;
        for pair in &data.val {
            let pred = hdl_forward(&pair.lr_up, &params, Mode::Infer)?;
            let (loss, _) = total_loss(&pair.hr, &pred, &train_cfg.loss_weights)?;
            val_losses.push(loss);
            val_mpsnr += mpsnr(&pair.hr, &pred)?.0;
            val_sam += sam(&pair.hr, &pred)?.0;
        }
        let val = mean_loss(&val_losses);
        val_mpsnr /= data.val.len() as f64;
        val_sam /= data.val.len() as f64;

        history.push(TrainRecord {
            epoch,
            train: mean_loss(&batch_losses),
            val,
            val_mpsnr,
            val_sam,
            seconds: started.elapsed().as_secs_f64(),
        });
        val_history.push(val.total);
        last_good = snapshot(&params, &adam, epoch as u64 + 1);

        if best.as_ref().map_or(true, |(b, _)| val.total < *b) {
            best = Some((val.total, last_good.clone()));
        }
        if let Some(dir) = checkpoint_dir {
            if train_cfg.checkpoint_cadence > 0 && (epoch + 1) % train_cfg.checkpoint_cadence == 0 {
                crate::checkpoint::save_checkpoint(
                    &dir.join(format!("epoch_{epoch:04}.ckpt")),
                    &last_good,
                )?;
            }
        }

        let (decision, _) = early_stop_check(
            &val_history,
            train_cfg.early_stop_patience,
            train_cfg.early_stop_min_delta,
        );
        if decision == StopDecision::Stop {
            return Ok(TrainOutcome {
                checkpoint: best.expect("at least one epoch recorded").1,
                history,
                stop: StopReason::EarlyStopped { at_epoch: epoch },
            });
        }
    }

    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch recorded").1,
        history,
        stop: StopReason::MaxEpochs,
    })
}

/// Inference-mode evaluation of every pair: metrics of the model output
/// against the HR reference, one report per pair plus the aggregate mean.
/// Honors `HSISR_THREADS`; results are ordered by pair index regardless.
pub fn evaluate(
    params: &ModelParams<f32>,
    pairs: &[SamplePair],
) -> Result<(Vec<MetricsReport>, MetricsReport), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let bands = pairs[0].hr.channels();
    if bands != params.config.bands {
        return Err(TrainError::BandMismatch {
            data: bands,
            model: params.config.bands,
        });
    }
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(pairs.len());

    let eval_one = |pair: &SamplePair| -> Result<MetricsReport, TrainError> {
        let pred = hdl_forward(&pair.lr_up, params, Mode::Infer)?;
        Ok(MetricsReport::compute(&pair.hr, &pred)?)
    };

    let reports: Vec<MetricsReport> = if threads == 1 {
        pairs.iter().map(eval_one).collect::<Result<_, _>>()?
    } else {
        let chunk = pairs.len().div_ceil(threads);
        let mut slots: Vec<Option<Result<MetricsReport, TrainError>>> =
            (0..pairs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (ci, chunk_pairs) in pairs.chunks(chunk).enumerate() {
                handles.push((
                    ci * chunk,
                    scope.spawn(move || {
                        chunk_pairs.iter().map(eval_one).collect::<Vec<_>>()
                    }),
                ));
            }
            for (offset, handle) in handles {
                for (i, r) in handle.join().expect("evaluation thread").into_iter().enumerate() {
                    slots[offset + i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every slot filled"))
            .collect::<Result<_, _>>()?
    };

    let aggregate = MetricsReport::aggregate(&reports)?;
    Ok((reports, aggregate))
}
