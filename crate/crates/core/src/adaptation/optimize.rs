use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{pseudo_label, AdaptConfig, MetaInput, Provenance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, NodeId, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptLog {
    /// Mean minibatch loss per epoch (a partial last epoch counts).
    pub epoch_losses: Vec<f32>,
}

/// `clamp(t, 0, 1)` as `relu(t) - relu(t - 1)`, which has the clamp's
/// subgradient.
fn clamp_unit(g: &mut Graph, t: NodeId) -> Result<NodeId> {
    let shape = g.value(t).shape().to_vec();
    let low = g.relu(t)?;
    let minus_one = g.leaf(Tensor::full(shape[1..].to_vec(), -1.0));
    let shifted = g.add(t, minus_one)?;
    let high = g.relu(shifted)?;
    let neg = g.leaf(Tensor::full(shape, -1.0));
    let high = g.mul(high, neg)?;
    g.add(low, high)
}

/// Minimizes cross-entropy of the frozen model over `x + W` with respect to
/// `W` only (Adam, W starts at zero).
pub fn optimize_meta_input(model: &Model, labeled_target: &Dataset, cfg: &AdaptConfig) -> Result<(MetaInput, AdaptLog)> {
    const OP: &str = "optimize_meta_input";
    model.require_frozen(OP)?;
    let labels = labeled_target.labels_required(OP)?;
    let provenance = Provenance {
        dataset: labeled_target.name.clone(),
        samples: labeled_target.len(),
        ratio: None,
        supervised: true,
        alpha: None,
        selected_fraction: None,
        clamp_transformed: cfg.clamp_transformed,
        seed: cfg.seed,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    };
    fit(OP, model, labeled_target, labels, cfg, provenance)
}

/// Pseudo labels at `cfg.alpha`, then supervised optimization on the
/// confident subset.
pub fn optimize_meta_input_unsupervised(
    model: &Model,
    unlabeled_target: &Dataset,
    cfg: &AdaptConfig,
) -> Result<(MetaInput, AdaptLog)> {
    const OP: &str = "optimize_meta_input_unsupervised";
    model.require_frozen(OP)?;
    cfg.validate()?;
    let set = pseudo_label(model, unlabeled_target, cfg.alpha)?;
    if set.is_empty() {
        return Err(Error::NoConfidentSamples { alpha: cfg.alpha });
    }
    log::info!(
        "{OP}: {} of {} samples above alpha {} ({:.1}%)",
        set.indices.len(),
        set.total,
        cfg.alpha,
        100.0 * set.fraction()
    );
    let mut subset = unlabeled_target.select(&set.indices)?;
    subset.labels = None;
    let provenance = Provenance {
        dataset: unlabeled_target.name.clone(),
        samples: set.indices.len(),
        ratio: None,
        supervised: false,
        alpha: Some(cfg.alpha),
        selected_fraction: Some(set.fraction()),
        clamp_transformed: cfg.clamp_transformed,
        seed: cfg.seed,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    };
    fit(OP, model, &subset, &set.labels, cfg, provenance)
}

fn fit(
    op: &'static str,
    model: &Model,
    data: &Dataset,
    labels: &[usize],
    cfg: &AdaptConfig,
    provenance: Provenance,
) -> Result<(MetaInput, AdaptLog)> {
    cfg.validate()?;
    let shape = model.spec.input_shape;
    if data.image_shape() != shape {
        return Err(Error::shape(op, &shape, &data.image_shape()));
    }
    if data.is_empty() {
        return Err(Error::contract(op, "adaptation set is empty"));
    }
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut w = Tensor::zeros(shape.to_vec());
    let mut log = AdaptLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < total_steps {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch)));
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break;
            }
            let mut g = Graph::new();
            let x = g.leaf(data.batch_images(chunk));
            let wid = g.leaf(Tensor::new(shape.to_vec(), w.data().to_vec())?.with_requires_grad(true));
            let mut t = g.add(x, wid)?;
            if cfg.clamp_transformed {
                t = clamp_unit(&mut g, t)?;
            }
            let fwd = model.forward(&mut g, t, Mode::Eval, false)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.softmax_cross_entropy(fwd.logits, &y)?;
            sum += g.value(loss).data()[0] as f64;
            batches += 1;
            g.backward(loss)?;
            w.set_grad(Some(g.grad(wid).expect("w is tracked").to_vec()))?;
            adam_step(&mut [&mut w], &mut state, &adam)?;
            step += 1;
        }
        let mean = (sum / batches as f64) as f32;
        log::debug!("{op} epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
        epoch += 1;
    }
    w.set_grad(None)?;
    Ok((
        MetaInput {
            w,
            trained_on: provenance,
            steps: total_steps,
        },
        log,
    ))
}
