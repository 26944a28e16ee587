use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use super::objective::{objective_and_gradient, LossBreakdown, PreparedItem};
use super::optimizer::AdamW;
use crate::encoder::{EncoderConfig, ParamStore};
use crate::Result;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_global: f64,
    pub loss_category: f64,
    pub tau: f64,
    pub lr: f64,
}

/// One optimizer step on `batch`. Only trainable parameters move.
pub fn train_step(
    params: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&PreparedItem],
    enc: &EncoderConfig,
    cfg: &TrainingConfig,
) -> Result<LossBreakdown> {
    let (losses, grads) = objective_and_gradient(params, enc, cfg, batch)?;
    opt.step(params, &grads, cfg.learning_rate)?;
    Ok(losses)
}

/// Item order of one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    order
}

/// Splits an epoch order into batches of `batch_size`. A trailing batch of
/// a single item is merged into the previous one; a one-item dataset
/// yields no batches.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(tail) = batches.pop_if(|b| b.len() < 2) {
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// Parameters, optimizer state and position of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    pub fn new(encoder: EncoderConfig, training: TrainingConfig) -> Result<Self> {
        encoder.validate()?;
        training.validate()?;
        let params = crate::encoder::init_params(&encoder, training.threshold_init);
        let optimizer = AdamW::new(training.weight_decay);
        Ok(Self {
            encoder,
            training,
            params,
            optimizer,
            step: 0,
            epoch: 0,
        })
    }

    /// Runs one epoch, calling `log` after every step. With `stop_at`, stops
    /// once the total step count reaches it; an epoch cut short this way is
    /// not counted and restarts from its first batch on the next call.
    pub fn run_epoch(
        &mut self,
        items: &[PreparedItem],
        stop_at: Option<u64>,
        mut log: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let order = epoch_order(items.len(), self.training.seed, self.epoch);
        let mut records = Vec::new();
        for b in epoch_batches(&order, self.training.batch_size) {
            if stop_at.is_some_and(|n| self.step >= n) {
                return Ok(records);
            }
            let batch: Vec<&PreparedItem> = b.iter().map(|&i| &items[i]).collect();
            let losses = train_step(
                &mut self.params,
                &mut self.optimizer,
                &batch,
                &self.encoder,
                &self.training,
            )?;
            self.step += 1;
            let rec = StepRecord {
                step: self.step,
                loss_global: losses.global,
                loss_category: losses.category,
                tau: self.params.tau() as f64,
                lr: self.training.learning_rate,
            };
            log(&rec)?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }
}
