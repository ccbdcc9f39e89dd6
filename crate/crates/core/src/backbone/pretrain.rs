use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneParams};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::head::{LinearHead, HEAD_INIT_STD};
use crate::numeric::ops::{argmax, softmax_cross_entropy};
use crate::numeric::AdamState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    /// Accuracy of the throwaway head on the pretraining set after training.
    pub train_accuracy: f64,
    pub checksum: u64,
}

/// Supervised pretraining of the backbone plus a throwaway linear head,
/// then freezing. With `epochs = 0` this returns the seeded initialization.
pub fn pretrain_and_freeze(
    dataset: &LabeledImageSet,
    config: BackboneConfig,
    train: &PretrainConfig,
) -> Result<(BackboneParams, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::domain("pretraining dataset is empty"));
    }
    let shape = dataset.shape();
    if (shape.height, shape.width, shape.channels)
        != (config.image_height, config.image_width, config.channels)
    {
        return Err(Error::domain(format!(
            "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
            shape.height,
            shape.width,
            shape.channels,
            config.image_height,
            config.image_width,
            config.channels
        )));
    }
    if train.batch_size == 0 {
        return Err(Error::config("pretraining batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = BackboneParams::init(config, &mut rng)?;
    let mut head = LinearHead::new(config.embed_dim);
    head.extend(dataset.num_classes(), HEAD_INIT_STD, &mut rng);

    let mut backbone_opt = AdamState::new(params.num_params(), train.learning_rate)?;
    let mut head_opt = AdamState::new(head.num_params(), train.learning_rate)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut grads = params.zeros_like();
            let mut head_grads = head.zeros_like();
            for &i in batch {
                let (feature, cache) = params.forward_cached(dataset.image(i), &[])?;
                let logits = head.logits(&feature);
                let (loss, dlogits) = softmax_cross_entropy(&logits, dataset.label(i) as usize);
                epoch_loss += loss;
                let d_feature = head.backward(&feature, &dlogits, &mut head_grads);
                params.backward(&cache, &d_feature, Some(&mut grads));
            }
            let inv = 1.0 / batch.len() as f64;
            let mut flat = params.to_flat();
            let gflat: Vec<f64> = grads.to_flat().iter().map(|g| g * inv).collect();
            backbone_opt.step(&mut flat, &gflat)?;
            params.load_flat(&flat)?;
            let mut hflat = head.to_flat();
            let hg: Vec<f64> = head_grads.to_flat().iter().map(|g| g * inv).collect();
            head_opt.step(&mut hflat, &hg)?;
            head.load_flat(&hflat)?;
        }
        final_loss = epoch_loss / dataset.len() as f64;
        info!("pretrain epoch={} loss={:.6}", epoch + 1, final_loss);
    }

    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let f = params.feature(dataset.image(i), &[])?;
        if argmax(&head.logits(&f)) == dataset.label(i) as usize {
            correct += 1;
        }
    }
    params.freeze();
    let report = PretrainReport {
        epochs: train.epochs,
        final_loss,
        train_accuracy: correct as f64 / dataset.len() as f64,
        checksum: params.checksum(),
    };
    info!(
        "pretrain done accuracy={:.4} checksum={:016x}",
        report.train_accuracy, report.checksum
    );
    Ok((params, report))
}
