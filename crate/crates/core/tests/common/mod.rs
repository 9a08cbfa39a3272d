#![allow(dead_code)]

use meta_input::tensor::{BatchNormAttrs, BatchNormMode, Conv2dAttrs, Graph, NodeId, OpKind, Pool2dAttrs, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;
/// Denominator floor for the relative error so that gradients which are
/// zero up to single-precision noise do not divide by ~0.
pub const FD_REL_FLOOR: f64 = 1e-2;

pub fn rel_err(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// A single op-kind case: input tensors plus which of them to differentiate.
pub struct Case {
    pub kind: OpKind<f32>,
    pub inputs: Vec<Tensor<f32>>,
    pub differentiate: Vec<bool>,
}

/// Weighted sum of the op output under a fixed random projection, evaluated
/// in f64 outside the graph.
fn projected(out: &[f32], proj: &[f64]) -> f64 {
    out.iter().zip(proj).map(|(&o, &p)| o as f64 * p).sum()
}

fn eval(case: &Case, inputs: &[Tensor<f32>]) -> Vec<f32> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(false))).collect();
    let out = g.forward_op(case.kind.clone(), &ids).expect("forward");
    g.value(out).data().to_vec()
}

/// Returns the worst relative error over every differentiated element.
pub fn check_case(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let base_out = eval(case, &case.inputs);
    let proj: Vec<f64> = (0..base_out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    // Autodiff side: loss = sum(out ⊙ proj) built inside the graph.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .zip(&case.differentiate)
        .map(|(t, &d)| g.leaf(t.clone().with_requires_grad(d)))
        .collect();
    let out = g.forward_op(case.kind.clone(), &ids).expect("forward");
    let shape = g.value(out).shape().to_vec();
    let p = g.leaf(Tensor::new(shape, proj.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, &d) in case.differentiate.iter().enumerate() {
        if !d {
            assert!(g.grad(ids[k]).is_none(), "non-differentiated leaf got a grad");
            continue;
        }
        let analytic = g.grad(ids[k]).expect("grad populated").to_vec();
        for e in 0..case.inputs[k].numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[e] += FD_EPS;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[e] -= FD_EPS;
            let fp = projected(&eval(case, &plus), &proj);
            let fm = projected(&eval(case, &minus), &proj);
            // The perturbation actually applied, after f32 rounding.
            let h = (plus[k].data()[e] as f64 - minus[k].data()[e] as f64) / 2.0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e] as f64, numeric));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so no FD stencil straddles the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values with gaps of 0.02 so pooling winners are stable under ±ε.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.02 - 0.01 * n as f32).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

pub const OP_KINDS: &[&str] = &[
    "add",
    "add_broadcast",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "batchnorm_train",
    "batchnorm_inference",
    "flatten",
    "sum",
    "softmax_cross_entropy",
];

pub fn random_case(kind: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let dim = |lo: usize, hi: usize, r: &mut ChaCha8Rng| r.random_range(lo..=hi);
    match kind {
        "add" => {
            let s = vec![dim(1, 3, r), dim(1, 4, r), dim(1, 3, r)];
            Case {
                kind: OpKind::Add,
                inputs: vec![rand_tensor(r, s.clone(), -1.0, 1.0), rand_tensor(r, s, -1.0, 1.0)],
                differentiate: vec![true, true],
            }
        }
        "add_broadcast" => {
            let hwc = vec![dim(1, 4, r), dim(1, 4, r), dim(1, 2, r)];
            let mut nhwc = vec![dim(1, 3, r)];
            nhwc.extend(&hwc);
            Case {
                kind: OpKind::Add,
                inputs: vec![rand_tensor(r, nhwc, -1.0, 1.0), rand_tensor(r, hwc, -1.0, 1.0)],
                differentiate: vec![r.random_bool(0.5), true],
            }
        }
        "mul" => {
            let s = vec![dim(1, 4, r), dim(1, 4, r)];
            Case {
                kind: OpKind::Mul,
                inputs: vec![rand_tensor(r, s.clone(), -1.0, 1.0), rand_tensor(r, s, -1.0, 1.0)],
                differentiate: vec![true, true],
            }
        }
        "matmul" => {
            let (m, k, n) = (dim(1, 4, r), dim(1, 5, r), dim(1, 4, r));
            Case {
                kind: OpKind::MatMul,
                inputs: vec![rand_tensor(r, vec![m, k], -1.0, 1.0), rand_tensor(r, vec![k, n], -1.0, 1.0)],
                differentiate: vec![true, true],
            }
        }
        "conv2d" => {
            let (n, cin, cout) = (dim(1, 2, r), dim(1, 2, r), dim(1, 3, r));
            let k = dim(1, 3, r);
            let stride = dim(1, 2, r);
            let pad = dim(0, 1, r);
            let h = dim(k.max(2), 5, r);
            let w = dim(k.max(2), 5, r);
            let with_bias = r.random_bool(0.5);
            let mut inputs = vec![
                rand_tensor(r, vec![n, h, w, cin], -1.0, 1.0),
                rand_tensor(r, vec![k, k, cin, cout], -1.0, 1.0),
            ];
            if with_bias {
                inputs.push(rand_tensor(r, vec![cout], -1.0, 1.0));
            }
            let differentiate = vec![true; inputs.len()];
            Case {
                kind: OpKind::Conv2d(Conv2dAttrs { stride, pad }),
                inputs,
                differentiate,
            }
        }
        "relu" => {
            let s = vec![dim(1, 3, r), dim(1, 5, r)];
            Case {
                kind: OpKind::Relu,
                inputs: vec![away_from_zero(r, s)],
                differentiate: vec![true],
            }
        }
        "maxpool2d" => {
            let size = dim(1, 2, r);
            let stride = dim(1, 2, r);
            let s = vec![dim(1, 2, r), dim(size, 5, r), dim(size, 5, r), dim(1, 2, r)];
            Case {
                kind: OpKind::MaxPool2d(Pool2dAttrs { size, stride }),
                inputs: vec![distinct(r, s)],
                differentiate: vec![true],
            }
        }
        "batchnorm_train" | "batchnorm_inference" => {
            // At least four samples per channel: with two, the normalized
            // output is ±1 whatever the input and the true gradient sits
            // below single-precision difference noise.
            let c = dim(1, 3, r);
            let shape = if r.random_bool(0.5) {
                vec![dim(4, 6, r), c]
            } else {
                vec![dim(1, 2, r), dim(2, 3, r), dim(2, 3, r), c]
            };
            let mode = if kind == "batchnorm_train" {
                BatchNormMode::Train
            } else {
                BatchNormMode::Inference {
                    mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
                    var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
                }
            };
            Case {
                kind: OpKind::BatchNorm(BatchNormAttrs { mode, eps: 1e-5 }),
                inputs: vec![
                    rand_tensor(r, shape, -1.0, 1.0),
                    rand_tensor(r, vec![c], 0.5, 1.5),
                    rand_tensor(r, vec![c], -0.5, 0.5),
                ],
                differentiate: vec![true, true, true],
            }
        }
        "flatten" => {
            let s = vec![dim(1, 3, r), dim(1, 3, r), dim(1, 3, r)];
            Case {
                kind: OpKind::Flatten,
                inputs: vec![rand_tensor(r, s, -1.0, 1.0)],
                differentiate: vec![true],
            }
        }
        "sum" => {
            let s = vec![dim(1, 4, r), dim(1, 4, r)];
            Case {
                kind: OpKind::Sum,
                inputs: vec![rand_tensor(r, s, -1.0, 1.0)],
                differentiate: vec![true],
            }
        }
        "softmax_cross_entropy" => {
            let (n, c) = (dim(1, 4, r), dim(2, 5, r));
            let labels = (0..n).map(|_| r.random_range(0..c)).collect();
            Case {
                kind: OpKind::SoftmaxCrossEntropy { labels },
                inputs: vec![rand_tensor(r, vec![n, c], -2.0, 2.0)],
                differentiate: vec![true],
            }
        }
        other => panic!("unknown op kind {other}"),
    }
}

/// One conv block, one hidden dense layer, `classes` outputs.
pub fn toy_spec(side: usize, channels: usize, classes: usize, batchnorm: bool) -> meta_input::model::ModelSpec {
    let mut block = meta_input::model::ConvBlock::new(4, 3);
    block.batchnorm = batchnorm;
    meta_input::model::ModelSpec {
        input_shape: [side, side, channels],
        conv_blocks: vec![block],
        dense_dims: vec![8],
        num_classes: classes,
        dense_input: None,
    }
}

/// Two classes: class 0 lights the top half, class 1 the bottom half, plus
/// uniform noise.
pub fn halves(n: usize, side: usize, seed: u64) -> meta_input::data::Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * side * side);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        for r in 0..side {
            for _ in 0..side {
                let lit = (r < side / 2) == (y == 0);
                let base = if lit { 0.7 } else { 0.2 };
                data.push(base + rng.random_range(-0.15f32..0.15));
            }
        }
    }
    let images = Tensor::new(vec![n, side, side, 1], data).unwrap();
    meta_input::data::Dataset::new(images, Some(labels), 2, "halves").unwrap()
}

fn widen(kind: &OpKind<f32>) -> OpKind<f64> {
    let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
    match kind {
        OpKind::Add => OpKind::Add,
        OpKind::Mul => OpKind::Mul,
        OpKind::MatMul => OpKind::MatMul,
        OpKind::Conv2d(a) => OpKind::Conv2d(*a),
        OpKind::Relu => OpKind::Relu,
        OpKind::MaxPool2d(a) => OpKind::MaxPool2d(*a),
        OpKind::BatchNorm(a) => OpKind::BatchNorm(BatchNormAttrs {
            mode: match &a.mode {
                BatchNormMode::Train => BatchNormMode::Train,
                BatchNormMode::Inference { mean, var } => BatchNormMode::Inference {
                    mean: up(mean),
                    var: up(var),
                },
            },
            eps: a.eps as f64,
        }),
        OpKind::Flatten => OpKind::Flatten,
        OpKind::Sum => OpKind::Sum,
        OpKind::SoftmaxCrossEntropy { labels } => OpKind::SoftmaxCrossEntropy { labels: labels.clone() },
    }
}

fn eval_f64(kind: &OpKind<f64>, inputs: &[Tensor<f64>]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = g.forward_op(kind.clone(), &ids).expect("forward");
    g.value(out).data().to_vec()
}

/// Like [`check_case`], but the central differences (same `FD_EPS`, same
/// f32 inputs) are evaluated with the f64 engine, so only the f32 analytic
/// gradient and the truncation error of the stencil remain.
pub fn check_case_wide_reference(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_out = eval(case, &case.inputs).len();
    let proj: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proj32: Vec<f32> = proj.iter().map(|&v| v as f32).collect();

    let mut g = Graph::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .zip(&case.differentiate)
        .map(|(t, &d)| g.leaf(t.clone().with_requires_grad(d)))
        .collect();
    let out = g.forward_op(case.kind.clone(), &ids).expect("forward");
    let shape = g.value(out).shape().to_vec();
    let p = g.leaf(Tensor::new(shape, proj32.clone()).unwrap());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let kind = widen(&case.kind);
    let wide: Vec<Tensor<f64>> = case
        .inputs
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let projected = |inputs: &[Tensor<f64>]| -> f64 {
        eval_f64(&kind, inputs).iter().zip(&proj32).map(|(&o, &p)| o * p as f64).sum()
    };
    let h = FD_EPS as f64;
    let mut worst = 0.0f64;
    for (k, &d) in case.differentiate.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = g.grad(ids[k]).expect("grad populated").to_vec();
        for e in 0..wide[k].numel() {
            let mut plus = wide.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = wide.clone();
            minus[k].data_mut()[e] -= h;
            let numeric = (projected(&plus) - projected(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[e] as f64, numeric));
        }
    }
    worst
}
