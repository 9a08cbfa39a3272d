//! Small convolutional classifiers: construction, source pretraining,
//! inference and checkpoints.

mod checkpoint;
mod spec;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormAttrs, BatchNormMode, Conv2dAttrs, Graph, NodeId, Pool2dAttrs, Tensor};

pub use checkpoint::{load_model, save_model};
pub use spec::{ConvBlock, LayerPlan, ModelSpec};
pub use train::{predict, pretrain, TrainConfig, TrainLog};
pub(crate) use train::argmax;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    fn fresh(c: usize) -> Self {
        BnStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    /// Exponential moving average update from one batch's biased moments.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32], count: usize, momentum: f32) {
        let unbias = if count > 1 {
            count as f32 / (count - 1) as f32
        } else {
            1.0
        };
        for j in 0..self.mean.len() {
            self.mean[j] = (1.0 - momentum) * self.mean[j] + momentum * batch_mean[j];
            self.var[j] = (1.0 - momentum) * self.var[j] + momentum * batch_var[j] * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<NamedParam>,
    pub bn_stats: Vec<BnStats>,
    pub frozen: bool,
}

/// Batchnorm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caller may fold them into the running stats.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Node handles produced by [`Model::forward`].
#[derive(Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    /// One per parameter, in `Model::params` order.
    pub params: Vec<NodeId>,
    /// One per batchnorm layer, in `Model::bn_stats` order.
    pub batchnorms: Vec<NodeId>,
}

impl Model {
    /// He-uniform weights, zero biases, unit/zero batchnorm affine.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        let plan = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let he = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let mut cin = spec.input_shape[2];
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let fan_in = b.kernel * b.kernel * cin;
            params.push(NamedParam {
                name: format!("conv{i}.weight"),
                tensor: he(vec![b.kernel, b.kernel, cin, b.out_channels], fan_in, &mut rng),
            });
            if b.batchnorm {
                params.push(NamedParam {
                    name: format!("bn{i}.gamma"),
                    tensor: Tensor::full(vec![b.out_channels], 1.0),
                });
                params.push(NamedParam {
                    name: format!("bn{i}.beta"),
                    tensor: Tensor::zeros(vec![b.out_channels]),
                });
                bn_stats.push(BnStats::fresh(b.out_channels));
            } else {
                params.push(NamedParam {
                    name: format!("conv{i}.bias"),
                    tensor: Tensor::zeros(vec![b.out_channels]),
                });
            }
            cin = b.out_channels;
        }
        let mut fan_in = plan.flatten_dim;
        let widths: Vec<usize> = spec.dense_dims.iter().copied().chain([spec.num_classes]).collect();
        for (j, &width) in widths.iter().enumerate() {
            params.push(NamedParam {
                name: format!("dense{j}.weight"),
                tensor: he(vec![fan_in, width], fan_in, &mut rng),
            });
            params.push(NamedParam {
                name: format!("dense{j}.bias"),
                tensor: Tensor::zeros(vec![width]),
            });
            fan_in = width;
        }
        Ok(Model {
            spec,
            params,
            bn_stats,
            frozen: false,
        })
    }

    pub fn has_batchnorm(&self) -> bool {
        !self.bn_stats.is_empty()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Builds the network on `x` (NHWC). Parameters enter the graph as
    /// leaves that require grad iff `train_params`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode, train_params: bool) -> Result<ForwardNodes> {
        let got = g.value(x).shape();
        if got.len() != 4 || got[1..] != self.spec.input_shape {
            let mut expected = vec![got.first().copied().unwrap_or(0)];
            expected.extend(self.spec.input_shape);
            return Err(Error::shape("model_forward", &expected, got));
        }
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(train_params)))
            .collect();
        let mut next = ids.iter().copied();
        let mut take = || next.next().expect("param order matches spec");
        let mut batchnorms = Vec::new();
        let mut h = x;
        for b in &self.spec.conv_blocks {
            let w = take();
            let attrs = Conv2dAttrs {
                stride: b.stride,
                pad: b.padding(),
            };
            if b.batchnorm {
                h = g.conv2d(h, w, None, attrs)?;
                let (gamma, beta) = (take(), take());
                let stats = &self.bn_stats[batchnorms.len()];
                let mode = match mode {
                    Mode::Train => BatchNormMode::Train,
                    Mode::Eval => BatchNormMode::Inference {
                        mean: stats.mean.clone(),
                        var: stats.var.clone(),
                    },
                };
                h = g.batchnorm(h, gamma, beta, BatchNormAttrs { mode, eps: BN_EPS })?;
                batchnorms.push(h);
            } else {
                let bias = take();
                h = g.conv2d(h, w, Some(bias), attrs)?;
            }
            h = g.relu(h)?;
            if b.maxpool {
                h = g.maxpool2d(h, Pool2dAttrs { size: 2, stride: 2 })?;
            }
        }
        h = g.flatten(h)?;
        let dense_layers = self.spec.dense_dims.len() + 1;
        for j in 0..dense_layers {
            let (w, b) = (take(), take());
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if j + 1 < dense_layers {
                h = g.relu(h)?;
            }
        }
        Ok(ForwardNodes {
            logits: h,
            params: ids,
            batchnorms,
        })
    }

    /// SHA-256 over parameter names and buffers.
    pub fn params_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            h.update(p.tensor.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every batchnorm running mean and variance.
    pub fn bn_checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.bn_stats {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Exact per-channel population statistics of every batchnorm input over
    /// `images`, layer by layer: layer `i` sees the earlier layers already
    /// normalized with their new statistics. Variance is unbiased.
    pub(crate) fn population_bn_stats(&self, images: &Tensor) -> Result<Vec<BnStats>> {
        let mut work = self.clone();
        let n = images.shape()[0];
        let row = images.numel() / n;
        for layer in 0..work.bn_stats.len() {
            let channels = work.bn_stats[layer].mean.len();
            let mut sum = vec![0.0f64; channels];
            let mut sq = vec![0.0f64; channels];
            let mut count = 0usize;
            for start in (0..n).step_by(train::EVAL_BATCH) {
                let end = (start + train::EVAL_BATCH).min(n);
                let mut shape = images.shape().to_vec();
                shape[0] = end - start;
                let chunk = Tensor::new(shape, images.data()[start * row..end * row].to_vec())?;
                let mut g = Graph::new();
                let x = g.leaf(chunk);
                let fwd = work.forward(&mut g, x, Mode::Eval, false)?;
                let pre = g.inputs(fwd.batchnorms[layer])[0];
                for px in g.value(pre).data().chunks_exact(channels) {
                    for (j, &v) in px.iter().enumerate() {
                        sum[j] += v as f64;
                        sq[j] += v as f64 * v as f64;
                    }
                    count += 1;
                }
            }
            let stats = &mut work.bn_stats[layer];
            for j in 0..channels {
                let mean = sum[j] / count as f64;
                let biased = (sq[j] / count as f64 - mean * mean).max(0.0);
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                stats.mean[j] = mean as f32;
                stats.var[j] = (biased * unbias) as f32;
            }
        }
        Ok(work.bn_stats)
    }

    pub(crate) fn require_frozen(&self, op: &'static str) -> Result<()> {
        if !self.frozen {
            return Err(Error::contract(
                op,
                "model is not frozen; adaptation never modifies pretrained weights, so only frozen models are accepted",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = Model::build(ModelSpec::digits(), 11).unwrap();
        let b = Model::build(ModelSpec::digits(), 11).unwrap();
        let c = Model::build(ModelSpec::digits(), 12).unwrap();
        assert_eq!(a.params_checksum(), b.params_checksum());
        assert_ne!(a.params_checksum(), c.params_checksum());
        assert!(!a.frozen);
    }

    #[test]
    fn param_names_are_unique() {
        let m = Model::build(ModelSpec::digits(), 0).unwrap();
        let mut names: Vec<_> = m.params.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params.len());
    }

    #[test]
    fn digit_model_maps_one_sample_to_ten_logits() {
        let m = Model::build(ModelSpec::digits(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 28, 28, 1], 0.5));
        let out = m.forward(&mut g, x, Mode::Eval, false).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[1, 10]);
    }

    #[test]
    fn wrong_input_shape_is_a_shape_error() {
        let m = Model::build(ModelSpec::digits(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 32, 32, 1], 0.5));
        assert!(matches!(m.forward(&mut g, x, Mode::Eval, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn bn_update_uses_momentum_and_unbiased_variance() {
        let mut s = BnStats::fresh(1);
        s.update(&[2.0], &[1.0], 5, 0.1);
        assert!((s.mean[0] - 0.2).abs() < 1e-7);
        assert!((s.var[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-7);
    }
}
