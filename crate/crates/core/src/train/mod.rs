//! Training recipe: mean BCE over labels, AdamW with linear learning-rate
//! decay, thresholded predictions and micro-averaged evaluation.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::float::{Float, Precision};
use crate::labels::{micro_scores, MetricCounts, MicroScores};
use crate::model::Classifier;
use crate::nn::{Parameters, Rng};

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use loss::{bce_grad, bce_loss, sigmoid};
pub use optim::{adamw_update, lr_at, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate, decayed linearly to zero over all steps.
    pub lr0: f64,
    pub adam: AdamWConfig,
    pub threshold: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr0: 2e-5,
            adam: AdamWConfig::default(),
            threshold: 0.3,
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie strictly between 0 and 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Bit `l` is set iff `probs[l] >= threshold`.
pub fn predict<T: Float>(probs: &[T], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p.as_f64() >= threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub validation: Option<MicroScores>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

/// Scores `model` on `dataset` with thresholded sigmoid outputs.
pub fn evaluate<T: Float>(model: &Classifier<T>, dataset: &Dataset, threshold: f64) -> Result<(MetricCounts, MicroScores)> {
    let mut counts = MetricCounts::new(model.n_labels());
    for ex in &dataset.examples {
        let probs = model.probabilities(&ex.sample)?;
        let predicted = predict(probs.as_slice().expect("contiguous"), threshold);
        counts.update(&predicted, &ex.target)?;
    }
    let scores = micro_scores(&counts);
    Ok((counts, scores))
}

// Separates the dropout stream from the shuffle stream.
const DROPOUT_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Trains in place. Shuffling and dropout are driven by `cfg.seed` only, so
/// two runs with the same inputs produce bit-identical logs and weights.
pub fn train<T: Float>(
    model: &mut Classifier<T>,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    cfg: &RunConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("corpus", "training set is empty"));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut optimizer = AdamW::new(model, cfg.adam);
    let mut shuffle_rng = Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED_SALT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set.examples[i];
                let loss = model.accumulate_grad(&ex.sample, &ex.target, Some(&mut dropout_rng), &mut grads)?;
                batch_loss += loss.as_f64();
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: batch_loss,
                    epoch,
                    step,
                });
            }
            let scale = T::of(1.0 / batch.len() as f64);
            grads.visit_mut("", &mut |_, _, mut g| g.mapv_inplace(|x| x * scale));
            optimizer.step(model, &grads, lr_at(step, total_steps, cfg.lr0));
            epoch_loss += batch_loss;
            step += 1;
        }
        let validation = match validation {
            Some(set) if !set.is_empty() => Some(evaluate(model, set, cfg.threshold)?.1),
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: epoch_loss / train_set.len() as f64,
            steps: step,
            validation,
        };
        match &record.validation {
            Some(v) => log::info!(
                "epoch {} loss {:.5} val P {:.4} R {:.4} F1 {:.4}",
                record.epoch,
                record.mean_loss,
                v.precision,
                v.recall,
                v.f1
            ),
            None => log::info!("epoch {} loss {:.5}", record.epoch, record.mean_loss),
        }
        log.epochs.push(record);
    }
    Ok(log)
}
