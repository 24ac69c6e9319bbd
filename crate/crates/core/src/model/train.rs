use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, Model};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Mini-batch SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

fn check_split(what: &'static str, images: &[Tensor], labels: &[usize], classes: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Empty(what));
    }
    if images.len() != labels.len() {
        return Err(Error::shape(what, format!("{} images, {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::UnknownClass { index: bad, classes });
    }
    Ok(())
}

/// Trains a freshly initialised network. Per-sample gradients within a batch
/// may be computed in parallel; they are always summed in batch order, so the
/// result depends only on `cfg.seed`.
pub fn train(
    arch: ArchitectureSpec,
    train_images: &[Tensor],
    train_labels: &[usize],
    val_images: &[Tensor],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    let classes = arch.num_classes();
    check_split("training set", train_images, train_labels, classes)?;
    check_split("validation set", val_images, val_labels, classes)?;

    let mut model = Model::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = exec::try_map_slice(batch, |&i| {
                model.loss_gradients(&train_images[i], train_labels[i])
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut params: Vec<Tensor> = model.params().iter().map(|p| (**p).clone()).collect();
            let mut total: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.axpy(1.0, g)?;
                }
            }
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&total) {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv * scale;
                    *pv -= cfg.learning_rate * *vv;
                }
            }
            model.set_params(params);
        }
        let mean_loss = epoch_loss / train_images.len() as f64;
        if !mean_loss.is_finite() || model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Divergence {
                epoch,
                lr: cfg.learning_rate,
            });
        }
        epoch_losses.push(mean_loss);
    }

    let train_eval = model.evaluate(train_images, train_labels)?;
    let val_eval = model.evaluate(val_images, val_labels)?;
    model.metadata.seed = cfg.seed;
    model.metadata.epochs = cfg.epochs;
    model.metadata.epoch_losses = epoch_losses;
    model.metadata.train_accuracy = train_eval.accuracy;
    model.metadata.val_accuracy = val_eval.accuracy;
    Ok(model)
}
