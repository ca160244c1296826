//! Seeded mini-batch SGD training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_targets, compute_loss, images_to_tensor, mask_pyramids, Checkpoint, DetError, ForwardOptions, LossBreakdown,
    Model, ModelConfig, PoolingVariant, Result,
};
use crate::scenegen::{Dataset, ImageRecord};
use crate::tensor::{sgd_step, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            seed: 0,
            log_every: 50,
        }
    }
}

/// Mean loss over the iterations since the previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
}

/// Yields shuffled batches of record indices, reshuffling each epoch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn add(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.total += l.total;
    acc.objectness += l.objectness;
    acc.class += l.class;
    acc.bbox += l.bbox;
}

fn with_iteration(e: DetError, iteration: u64) -> DetError {
    match e {
        DetError::NonFinite { layer, .. } => DetError::NonFinite { iteration, layer },
        other => other,
    }
}

/// Trains a fresh model initialized from `train_cfg.seed`.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    opt_cfg: &OptimizerConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(DetError::EmptyDataset);
    }
    if train_cfg.batch_size == 0 || train_cfg.log_every == 0 {
        return Err(DetError::Config("batch_size and log_every must be positive".into()));
    }
    opt_cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let grid = model_cfg.grid();
    let mut sampler = BatchSampler::new(dataset.len(), train_cfg.seed);
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(train_cfg.iterations as usize);
    let mut window = LossBreakdown::default();
    let mut window_len = 0u64;

    for iteration in 1..=train_cfg.iterations {
        let batch: Vec<&ImageRecord> = sampler
            .next_batch(train_cfg.batch_size)
            .into_iter()
            .map(|i| &dataset.records[i])
            .collect();
        let images = images_to_tensor(&batch);
        let pyramids = if model_cfg.pooling_variant == PoolingVariant::Mask {
            Some(mask_pyramids(&batch, model_cfg)?)
        } else {
            None
        };
        let opts = ForwardOptions {
            masks: pyramids.as_deref(),
            ..Default::default()
        };
        let (head, cache) = model.forward_train(&images, &opts).map_err(|e| with_iteration(e, iteration))?;
        let targets: Vec<_> = batch
            .iter()
            .map(|r| assign_targets(&r.instances, grid, model_cfg.grid_stride))
            .collect();
        let (loss, grad) = compute_loss(&head, &targets)?;
        if !loss.total.is_finite() {
            return Err(DetError::NonFinite {
                iteration,
                layer: "loss".into(),
            });
        }
        model.backward(&cache, &grad).map_err(|e| with_iteration(e, iteration))?;
        if let Some(layer) = model
            .layers
            .iter()
            .find(|l| !(l.params.grad_weights.all_finite() && l.params.grad_bias.all_finite()))
        {
            return Err(DetError::NonFinite {
                iteration,
                layer: layer.name.clone(),
            });
        }
        sgd_step(model.params_mut(), opt_cfg);

        losses.push(loss.total);
        add(&mut window, &loss);
        window_len += 1;
        if iteration % train_cfg.log_every == 0 || iteration == train_cfg.iterations {
            let k = window_len as f64;
            let mean = LossBreakdown {
                total: window.total / k,
                objectness: window.objectness / k,
                class: window.class / k,
                bbox: window.bbox / k,
            };
            log::info!(
                "iter {iteration}: loss {:.4} (obj {:.4} cls {:.4} box {:.4})",
                mean.total,
                mean.objectness,
                mean.class,
                mean.bbox
            );
            log.push(LossRecord { iteration, loss: mean });
            window = LossBreakdown::default();
            window_len = 0;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, train_cfg.seed, train_cfg.iterations),
        log,
        losses,
    })
}
