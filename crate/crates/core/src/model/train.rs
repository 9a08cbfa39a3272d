use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, BN_MOMENTUM};
use crate::tensor::{adam_step, softmax_rows, AdamConfig, AdamState, Graph, Tensor};

/// Source pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f32>,
}

/// Fits the model to `source` with Adam on cross-entropy and returns it
/// frozen, with running statistics set to the source population statistics.
pub fn pretrain(mut model: Model, source: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    const OP: &str = "pretrain";
    if model.frozen {
        return Err(Error::contract(OP, "model is already frozen"));
    }
    let labels = source.labels_required(OP)?;
    if source.image_shape() != model.spec.input_shape {
        return Err(Error::shape(OP, &model.spec.input_shape, &source.image_shape()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract(OP, "batch_size must be positive"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..source.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.leaf(source.batch_images(chunk));
            let fwd = model.forward(&mut g, x, Mode::Train, true)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.softmax_cross_entropy(fwd.logits, &y)?;
            total += g.value(loss).data()[0] as f64;
            batches += 1;
            g.backward(loss)?;

            for (stats, &node) in model.bn_stats.iter_mut().zip(&fwd.batchnorms) {
                let count = g.value(node).numel() / stats.mean.len();
                let (m, v) = g.batch_stats(node).expect("train-mode batchnorm");
                stats.update(m, v, count, BN_MOMENTUM);
            }
            for (p, &id) in model.params.iter_mut().zip(&fwd.params) {
                let grad = g.grad(id).expect("trainable leaf").to_vec();
                p.tensor.set_grad(Some(grad))?;
            }
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().map(|p| &mut p.tensor).collect();
            adam_step(&mut refs, &mut state, &adam)?;
        }
        let mean = (total / batches.max(1) as f64) as f32;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    for p in &mut model.params {
        p.tensor.set_grad(None)?;
    }
    if cfg.epochs > 0 && model.has_batchnorm() {
        model.bn_stats = model.population_bn_stats(&source.images)?;
    }
    model.frozen = true;
    Ok((model, log))
}

pub(crate) const EVAL_BATCH: usize = 256;

/// Class probabilities (`n × num_classes`) for a stack of NHWC images, with
/// batchnorm in inference mode.
pub(crate) fn predict_images(model: &Model, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let row = images.numel() / n;
    let c = model.spec.num_classes;
    let mut probs = Vec::with_capacity(n * c);
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * row..end * row].to_vec())?;
        let mut g = Graph::new();
        let x = g.leaf(chunk);
        let fwd = model.forward(&mut g, x, Mode::Eval, false)?;
        probs.extend(softmax_rows(g.value(fwd.logits).data(), c));
    }
    Tensor::new(vec![n, c], probs)
}

/// Class-probability matrix for every sample of `batch`.
pub fn predict(model: &Model, batch: &Dataset) -> Result<Tensor> {
    if batch.image_shape() != model.spec.input_shape {
        return Err(Error::shape("predict", &model.spec.input_shape, &batch.image_shape()));
    }
    predict_images(model, &batch.images)
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
