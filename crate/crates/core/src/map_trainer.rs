//! Point-estimate training: Adam with coupled L2 weight decay, a plateau learning-rate
//! schedule on validation loss, and early stopping. Shared by deep ensembles, MC
//! dropout and the Laplace backbone.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_rotate, split, ImageDataset, SplitSpec};
use crate::error::{ensure_finite, BnnError, Result};
use crate::optim::Adam;
use crate::par;
use crate::tensor_grad::{forward, logsumexp, loss_grad, DropoutMode, NetworkSpec, ParamVector, Reduction, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 coefficient λ: the loss gains λ/2·‖θ‖², so λθ is added to every gradient
    /// before the Adam update.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate after `lr_patience` consecutive epochs
    /// without a new best validation loss.
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub early_stopping_patience: usize,
    pub dropout_active: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 50,
            lr_factor: 0.9,
            lr_patience: 2,
            early_stopping_patience: 10,
            dropout_active: false,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BnnError::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if self.lr_patience == 0 || self.early_stopping_patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("learning-rate factor must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub batch_size: usize,
    pub stopped_early: bool,
    /// Reason training was cut short by a numerical failure.
    pub aborted: Option<String>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub history: TrainHistory,
}

/// Mean NLL and accuracy with dropout inactive.
pub fn evaluate_params(spec: &NetworkSpec, params: &[f64], data: &ImageDataset) -> Result<(f64, f64)> {
    let logits = forward(spec, params, &data.to_tensor()?, DropoutMode::Inactive)?;
    let mut nll = 0.0;
    let mut correct = 0;
    for (i, &y) in data.labels.iter().enumerate() {
        let row = logits.row(i);
        nll += logsumexp(row) - row[y];
        correct += (argmax(row) == y) as usize;
    }
    let n = data.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn train_map(spec: &NetworkSpec, train: &ImageDataset, val: &ImageDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = ParamVector::init_fan_in(spec, &mut rng)?;
    train_map_from(spec, init, train, val, config)
}

/// Trains from the given initial parameters and returns those with the lowest
/// validation loss seen at the end of any epoch.
pub fn train_map_from(
    spec: &NetworkSpec,
    init: ParamVector,
    train: &ImageDataset,
    val: &ImageDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(BnnError::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    // the init stream is independent of the batch-order stream
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ee_d0fb_a7c4);
    let dropout = config.dropout_active && spec.has_dropout();
    let mut params = init.clone();
    let mut best = init;
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut history = TrainHistory {
        batch_size: config.batch_size,
        ..TrainHistory::default()
    };
    let mut best_val = f64::INFINITY;
    let (mut since_best, mut since_lr_change) = (0, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut failure = None;
        for chunk in order.chunks(config.batch_size) {
            let (batch, labels) = batch_of(train, chunk, config.augment, &mut rng)?;
            let mode = if dropout {
                DropoutMode::Active { seed: rng.next_u64() }
            } else {
                DropoutMode::Inactive
            };
            let (loss, mut grad) = match loss_grad(spec, &params.values, &batch, &labels, Reduction::Mean, mode) {
                Ok(v) => v,
                Err(BnnError::NonFinite { context }) => {
                    failure = Some(format!("epoch {epoch}: non-finite {context}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            if config.weight_decay > 0.0 {
                for (g, &p) in grad.iter_mut().zip(&params.values) {
                    *g += config.weight_decay * p;
                }
            }
            adam.step(&mut params.values, &grad);
            loss_sum += loss * chunk.len() as f64;
        }
        if let Some(reason) = failure {
            log::warn!("training aborted: {reason}");
            history.aborted = Some(reason);
            break;
        }
        let (_, train_accuracy) = evaluate_params(spec, &params.values, train)?;
        let (val_loss, val_accuracy) = match evaluate_params(spec, &params.values, val) {
            Ok(v) => v,
            Err(BnnError::NonFinite { context }) => {
                history.aborted = Some(format!("epoch {epoch}: non-finite {context}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let val_loss = ensure_finite(val_loss, || format!("validation loss at epoch {epoch}"))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy,
            val_loss,
            val_accuracy,
            learning_rate: adam.lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            history.best_epoch = epoch;
            since_best = 0;
            since_lr_change = 0;
        } else {
            since_best += 1;
            since_lr_change += 1;
            if since_lr_change >= config.lr_patience {
                adam.lr *= config.lr_factor;
                since_lr_change = 0;
            }
            if since_best >= config.early_stopping_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.epochs.is_empty() {
        return Err(BnnError::NonFinite {
            context: history.aborted.unwrap_or_else(|| "first training epoch".into()),
        });
    }
    Ok(TrainOutcome { params: best, history })
}

fn batch_of(data: &ImageDataset, indices: &[usize], augment: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    if !augment {
        return data.batch(indices);
    }
    let mut pixels = Vec::with_capacity(indices.len() * data.pixels());
    for &i in indices {
        pixels.extend(augment_rotate(data.image(i), data.height, rng));
    }
    let labels = indices.iter().map(|&i| data.labels[i]).collect();
    Ok((Tensor::new(vec![indices.len(), data.height, data.width], pixels)?, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub seed: u64,
    pub split: SplitSpec,
    pub outcome: TrainOutcome,
}

/// Trains one member per seed, each on its own stratified 80:20 reshuffle of `pool`.
pub fn train_ensemble(spec: &NetworkSpec, pool: &ImageDataset, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<EnsembleMember>> {
    if seeds.len() < 2 {
        return Err(BnnError::InvalidArgument("an ensemble needs at least two members".into()));
    }
    let results = par::map_indices(seeds.len(), |i| -> Result<EnsembleMember> {
        let seed = seeds[i];
        let split = split(&pool.labels, pool.n_classes(), 0.8, seed)?;
        let cfg = TrainConfig { seed, ..config.clone() };
        let outcome = train_map(spec, &pool.subset(&split.train), &pool.subset(&split.val), &cfg)?;
        Ok(EnsembleMember { seed, split, outcome })
    });
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| BnnError::Run {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
