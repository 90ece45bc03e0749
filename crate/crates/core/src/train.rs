//! Mini-batch training with Adam and best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, DataError, Dataset};
use crate::eval::{predict, EpochRecord};
use crate::exec::{self, ExecError, ForwardMode, BN_MOMENTUM};
use crate::graph::ModelGraph;
use crate::loss::{self, argmax_rows, LossError};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (last finite loss {last_finite:?})")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        last_finite: Option<f64>,
    },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size. Zero makes a dry run: no parameter changes, including
    /// batch-norm moving statistics.
    pub lr: f64,
    pub seed: u64,
    /// Random shear and zoom on every training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are in `best`.
    pub best_epoch: usize,
    pub best: ParamStore,
    pub last: ParamStore,
}

/// Mean loss and accuracy of the graph over a dataset in inference mode.
pub fn score(
    graph: &ModelGraph,
    params: &ParamStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let probs = predict(graph, params, &data.images, batch_size)?;
    let loss = loss::cce_loss(&probs, &data.labels)?;
    let correct = argmax_rows(&probs)
        .iter()
        .zip(&data.labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Seeds for per-step randomness, derived from the run seed so that every
/// stream is fixed by it.
fn sub_seed(seed: u64, epoch: usize, step: usize, lane: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ ((step as u64) << 8) ^ lane);
    rand::Rng::random(&mut rng)
}

/// Trains `params` in place on `train`, checkpointing on validation
/// accuracy (ties broken by lower validation loss, then earlier epoch).
/// `on_epoch` sees every history record as it is produced.
pub fn train(
    graph: &ModelGraph,
    params: ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mut params = params;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ParamStore)> = None;
    let mut last_finite = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, epoch, 0, 0));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Tensor> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    if cfg.augment {
                        augment(&train.images[i], sub_seed(cfg.seed, epoch, step, 2 + j as u64))
                    } else {
                        train.images[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let batch = Tensor::stack(&refs).map_err(ExecError::from)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();

            let mode = ForwardMode::training(sub_seed(cfg.seed, epoch, step, 1));
            let tape = exec::forward(graph, &params, &batch, mode)?;
            let loss = exec::tape_loss(graph, &tape, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    loss,
                    last_finite,
                });
            }
            last_finite = Some(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(tape.output(graph))
                .iter()
                .zip(&labels)
                .filter(|(p, t)| p == t)
                .count();
            if cfg.lr > 0.0 {
                let grads = exec::backward(graph, &params, &tape, &labels)?;
                adam.step(&mut params, &grads)?;
                exec::apply_bn_updates(&mut params, &tape, BN_MOMENTUM)?;
            }
        }
        let (val_loss, val_accuracy) = score(graph, &params, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&record);
        history.push(record);
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_accuracy, val_loss, epoch, params.clone()));
        }
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
        last: params,
    })
}
