mod common;

use meta_input::tensor::{BatchNormAttrs, BatchNormMode, Conv2dAttrs, Graph, OpKind, Tensor};
use meta_input::Error;
use proptest::prelude::*;

#[test]
fn broadcast_add_of_constant_over_zero_batch() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2, 2, 2, 1]));
    let w = g.leaf(Tensor::full(vec![2, 2, 1], 0.5f32));
    let y = g.add(x, w).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0f32, 0.0, 3.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn conv2d_ones_window_sums() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 4, 4, 1], 1.0f32));
    let k = g.leaf(Tensor::full(vec![3, 3, 1, 1], 1.0f32));
    let y = g.conv2d(x, k, None, Conv2dAttrs { stride: 1, pad: 0 }).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 1]);
    assert_eq!(g.value(y).data(), &[9.0; 4]);
}

#[test]
fn conv2d_matches_direct_sliding_window() {
    // Independent direct-loop oracle with zero padding and stride 2.
    let (h, w, cin, cout, k, stride, pad) = (5usize, 6usize, 2usize, 3usize, 3usize, 2usize, 1usize);
    let x: Vec<f32> = (0..h * w * cin).map(|i| ((i * 37) % 11) as f32 / 11.0 - 0.5).collect();
    let wt: Vec<f32> = (0..k * k * cin * cout).map(|i| ((i * 13) % 7) as f32 / 7.0 - 0.4).collect();
    let b = vec![0.1f32, -0.2, 0.3];
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::new(vec![1, h, w, cin], x.clone()).unwrap());
    let wi = g.leaf(Tensor::new(vec![k, k, cin, cout], wt.clone()).unwrap());
    let bi = g.leaf(Tensor::new(vec![cout], b.clone()).unwrap());
    let y = g.conv2d(xi, wi, Some(bi), Conv2dAttrs { stride, pad }).unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    assert_eq!(g.value(y).shape(), &[1, ho, wo, cout]);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b[co] as f64;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[(iy as usize * w + ix as usize) * cin + ci] as f64
                                * wt[((ky * k + kx) * cin + ci) * cout + co] as f64;
                        }
                    }
                }
                let got = g.value(y).data()[(oy * wo + ox) * cout + co] as f64;
                assert!((got - acc).abs() < 1e-5, "({oy},{ox},{co}) {got} vs {acc}");
            }
        }
    }
}

#[test]
fn shape_error_names_op_and_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::<f32>::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::<f32>::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    match &err {
        Error::Shape { op, expected, got } => {
            assert_eq!(*op, "matmul");
            assert_eq!(expected, &vec![2, 3]);
            assert_eq!(got, &vec![4, 5]);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn non_finite_input_is_numeric_error() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![1.0f32, f32::NAN]).unwrap());
    assert!(matches!(g.relu(a), Err(Error::Numeric { op: "relu", .. })));
}

#[test]
fn batchnorm_inference_requires_stats_of_right_length() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f32>::zeros(vec![2, 3]));
    let gm = g.leaf(Tensor::full(vec![3], 1.0f32));
    let bt = g.leaf(Tensor::<f32>::zeros(vec![3]));
    let attrs = BatchNormAttrs {
        mode: BatchNormMode::Inference {
            mean: vec![0.0; 2],
            var: vec![1.0; 2],
        },
        eps: 1e-5,
    };
    assert!(matches!(g.batchnorm(x, gm, bt, attrs), Err(Error::Shape { .. })));
}

#[test]
fn node_recorded_only_with_grad_inputs() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(vec![2], 1.0f32));
    let b = g.leaf(Tensor::full(vec![2], 1.0f32).with_requires_grad(true));
    let c = g.relu(a).unwrap();
    let d = g.add(c, b).unwrap();
    assert!(!g.is_tracked(c));
    assert!(g.is_tracked(d));
    assert_eq!(g.inputs(d), &[c, b]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(vec![2, 3, 4], |i| i as f32 * 0.1).with_requires_grad(true));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap().with_requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn frozen_leaves_get_no_grad() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(vec![3], 2.0f32).with_requires_grad(true));
    let c = g.leaf(Tensor::full(vec![3], 3.0f32));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0; 3]);
    assert!(g.grad(c).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(vec![3], 2.0f32).with_requires_grad(true));
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract { op: "backward", .. })));
}

#[test]
fn softmax_cross_entropy_probabilities_sum_to_one() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::from_fn(vec![5, 4], |i| ((i * 7) % 5) as f32 * 3.0 - 6.0));
    let l = g.softmax_cross_entropy(z, &[0, 1, 2, 3, 0]).unwrap();
    for row in g.probabilities(l).unwrap().chunks(4) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(g.value(l).data()[0].is_finite());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let case = common::random_case("conv2d", 3);
        let mut g = Graph::new();
        let ids: Vec<_> = case.inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
        let y = g.forward_op(case.kind.clone(), &ids).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        (g.value(y).data().to_vec(), g.grad(ids[1]).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn every_op_kind_passes_finite_difference_check() {
    for kind in common::OP_KINDS {
        for seed in 0..20 {
            let case = common::random_case(kind, seed);
            let worst = common::check_case(&case, seed);
            assert!(
                worst < common::FD_REL_TOL,
                "{kind} seed {seed}: relative error {worst:.3e}"
            );
        }
    }
}

#[test]
fn generic_engine_runs_in_double_precision() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![0.3f64, -1.2, 2.0]).unwrap().with_requires_grad(true));
    let l = g
        .forward_op(OpKind::SoftmaxCrossEntropy { labels: vec![2] }, &[x])
        .unwrap();
    g.backward(l).unwrap();
    let p = g.probabilities(l).unwrap().to_vec();
    let grad = g.grad(x).unwrap();
    assert!((grad[0] - p[0]).abs() < 1e-15);
    assert!((grad[2] - (p[2] - 1.0)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn broadcast_add_is_exact_tiled_sum(
        n in 1usize..4,
        hwc in proptest::collection::vec(-10.0f32..10.0, 6),
        xs in proptest::collection::vec(-10.0f32..10.0, 18),
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![n, 2, 3, 1], xs[..n * 6].to_vec()).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 3, 1], hwc.clone()).unwrap());
        let y = g.add(x, w).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            prop_assert_eq!(v, xs[i] + hwc[i % 6]);
        }
    }
}

