use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stack_images, ElboNoise, GradRequest, NormativePrior, PriorConfig};
use crate::error::{Error, Result};
use crate::image::LabeledImage;
use crate::nn::Adam;

const EPOCH_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const VALIDATION_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total number of epochs; a resumed model only runs the remainder.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Reparameterization samples per image and step.
    pub elbo_samples: usize,
    /// Samples per image for the validation ELBO.
    pub validation_samples: usize,
    /// Global gradient-norm clip, disabled when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
            elbo_samples: 1,
            validation_samples: 4,
            grad_clip: Some(1e4),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.elbo_samples == 0 || self.validation_samples == 0 {
            return Err(Error::Config("batch size and sample counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: Option<f64>,
}

/// Trains a freshly initialized prior on healthy images.
pub fn train_prior(
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &PriorConfig,
    train_config: &TrainConfig,
) -> Result<NormativePrior> {
    let model = NormativePrior::new(config.clone(), train_config.seed)?;
    train_prior_from(model, train, val, train_config)
}

/// Continues training `model` until it has seen `train_config.epochs` epochs.
/// Shuffling and noise depend only on the seed and the epoch index, so an
/// interrupted and resumed run matches an uninterrupted one.
pub fn train_prior_from(
    mut model: NormativePrior,
    train: &[LabeledImage],
    val: &[LabeledImage],
    train_config: &TrainConfig,
) -> Result<NormativePrior> {
    train_config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let pixels = model.config.pixels();
    let train_x = stack_images(train.iter().map(|i| &i.pixels), pixels)?;
    let val_x = if val.is_empty() {
        None
    } else {
        Some(stack_images(val.iter().map(|i| &i.pixels), pixels)?)
    };

    if model.training.initial_val_elbo.is_none() {
        if let Some(vx) = &val_x {
            model.training.initial_val_elbo = Some(validation_elbo(&model, vx, train_config)?);
        }
    }

    let mut optimizer = model.optimizer.take().unwrap_or_else(|| {
        let shapes: Vec<usize> = model.named_params().iter().map(|(_, _, v)| v.len()).collect();
        Adam::new(train_config.learning_rate, &shapes)
    });
    optimizer.learning_rate = train_config.learning_rate;

    let m = model.latent_dim();
    let n = train_x.nrows();
    for epoch in model.training.epochs..train_config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ EPOCH_STREAM.wrapping_mul(epoch as u64 + 1));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let xb = train_x.select(ndarray::Axis(0), chunk);
            let noise = ElboNoise::sample(&mut rng, model.kind(), train_config.elbo_samples, chunk.len(), m);
            let out = model.elbo_with_noise(xb.view(), &noise, GradRequest::PARAMS)?;
            let batch_elbo: f64 = out.terms.iter().map(|t| t.elbo).sum();
            let mut grads = out.param_grads.expect("requested");
            // Descend on the negative mean ELBO.
            grads.scale(-1.0 / chunk.len() as f64);
            let norm = grads.global_norm();
            if !batch_elbo.is_finite() || !norm.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite loss (ELBO {batch_elbo}, gradient norm {norm})"),
                });
            }
            if let Some(clip) = train_config.grad_clip {
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            elbo_sum += batch_elbo;
            optimizer.descend(model.param_slices_mut(), &grads.slices());
        }
        let train_elbo = elbo_sum / n as f64;
        let val_elbo = match &val_x {
            Some(vx) => Some(validation_elbo(&model, vx, train_config)?),
            None => None,
        };
        log::info!(
            "{} epoch {}: train ELBO {train_elbo:.3}, val ELBO {:.3}",
            model.config.label(),
            epoch + 1,
            val_elbo.unwrap_or(f64::NAN)
        );
        model.training.history.push(EpochRecord {
            epoch: epoch + 1,
            train_elbo,
            val_elbo,
        });
        model.training.epochs = epoch + 1;
        model.training.final_val_elbo = val_elbo;
    }
    model.optimizer = Some(optimizer);
    Ok(model)
}

/// Mean validation ELBO with noise fixed by the training seed.
fn validation_elbo(model: &NormativePrior, x: &Array2<f64>, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let elbos = model.elbo(x.view(), &mut rng, cfg.validation_samples)?;
    Ok(elbos.iter().sum::<f64>() / elbos.len() as f64)
}
