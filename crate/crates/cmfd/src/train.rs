//! Backbone training over a dataset split, with per-sample gradients
//! computed in parallel.

use cmfd_core::backbone::{Backbone, TrainConfig, Trainer};
use cmfd_core::{BinaryMask, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the whole training set before the first step.
    pub initial_loss: f64,
}

pub fn mean_loss(model: &Backbone, data: &[(Tensor, BinaryMask)]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|(x, y)| model.loss_and_gradients(x, y).map(|r| r.0))
        .collect::<cmfd_core::Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Shuffled mini-batch Adadelta. `on_epoch` sees the epoch index and its
/// mean loss.
pub fn train(
    model: Backbone,
    data: &[(Tensor, BinaryMask)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Backbone, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let initial_loss = mean_loss(&model, data)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let start = trainer.loss_trace().len();
        for chunk in order.chunks(cfg.batch_size) {
            let model = trainer.model();
            let results = chunk
                .par_iter()
                .map(|&i| model.loss_and_gradients(&data[i].0, &data[i].1))
                .collect::<cmfd_core::Result<Vec<_>>>()?;
            trainer.apply(results)?;
        }
        let steps = &trainer.loss_trace()[start..];
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    let step_losses = trainer.loss_trace().to_vec();
    Ok((
        trainer.into_model(),
        TrainLog {
            step_losses,
            epoch_losses,
            initial_loss,
        },
    ))
}
