mod common;

use common::{halves, rel_err, toy_spec, FD_EPS, FD_REL_TOL};
use meta_input::adaptation::{
    apply_meta_input, bn_adapt, load_meta_input, optimize_meta_input, optimize_meta_input_unsupervised, pseudo_label,
    save_meta_input, select_confident, AdaptConfig,
};
use meta_input::data::{synth_shift, Dataset, Shift};
use meta_input::model::{predict, pretrain, Mode, Model, TrainConfig};
use meta_input::tensor::{Graph, Tensor};
use meta_input::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained(side: usize, batchnorm: bool) -> Model {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 1e-2,
        seed: 0,
    };
    pretrain(Model::build(toy_spec(side, 1, 2, batchnorm), 2).unwrap(), &halves(120, side, 1), &cfg).unwrap().0
}

fn steps(n: usize) -> AdaptConfig {
    AdaptConfig {
        steps: Some(n),
        batch_size: 32,
        ..AdaptConfig::default()
    }
}

#[test]
fn zero_steps_leaves_predictions_bitwise_unchanged() {
    let model = trained(8, true);
    let target = halves(40, 8, 5);
    let (w, log) = optimize_meta_input(&model, &target, &steps(0)).unwrap();
    assert!(log.epoch_losses.is_empty());
    assert!(w.w.data().iter().all(|&v| v == 0.0));
    let adapted = predict(&model, &apply_meta_input(&target, &w, false).unwrap()).unwrap();
    assert_eq!(adapted, predict(&model, &target).unwrap());
}

fn w_loss(model: &Model, ds: &Dataset, w: &Tensor) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(ds.images.clone());
    let wid = g.leaf(w.clone());
    let t = g.add(x, wid).unwrap();
    let fwd = model.forward(&mut g, t, Mode::Eval, false).unwrap();
    let l = g.softmax_cross_entropy(fwd.logits, ds.labels.as_ref().unwrap()).unwrap();
    g.value(l).data()[0] as f64
}

#[test]
fn meta_input_gradient_matches_finite_differences() {
    let model = trained(4, true);
    let ds = halves(8, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w0 = Tensor::from_fn(vec![4, 4, 1], |_| rng.random_range(-0.1f32..0.1));

    let mut g = Graph::new();
    let x = g.leaf(ds.images.clone());
    let wid = g.leaf(w0.clone().with_requires_grad(true));
    let t = g.add(x, wid).unwrap();
    let fwd = model.forward(&mut g, t, Mode::Eval, false).unwrap();
    let l = g.softmax_cross_entropy(fwd.logits, ds.labels.as_ref().unwrap()).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(wid).unwrap().to_vec();
    for &p in &fwd.params {
        assert!(g.grad(p).is_none(), "frozen parameters must not receive gradients");
    }

    for e in 0..16 {
        let mut plus = w0.clone();
        plus.data_mut()[e] += FD_EPS;
        let mut minus = w0.clone();
        minus.data_mut()[e] -= FD_EPS;
        let h = plus.data()[e] as f64 - minus.data()[e] as f64;
        let numeric = (w_loss(&model, &ds, &plus) - w_loss(&model, &ds, &minus)) / h;
        let err = rel_err(grad[e] as f64, numeric);
        assert!(err < FD_REL_TOL, "w[{e}]: autodiff {} numeric {numeric}", grad[e]);
    }
}

#[test]
fn first_adam_step_moves_against_the_gradient() {
    let model = trained(4, true);
    let ds = halves(8, 4, 3);
    let cfg = AdaptConfig {
        steps: Some(1),
        batch_size: 8,
        lr: 1e-3,
        ..AdaptConfig::default()
    };
    let (w, _) = optimize_meta_input(&model, &ds, &cfg).unwrap();

    let mut g = Graph::new();
    let x = g.leaf(ds.images.clone());
    let wid = g.leaf(Tensor::zeros(vec![4, 4, 1]).with_requires_grad(true));
    let t = g.add(x, wid).unwrap();
    let fwd = model.forward(&mut g, t, Mode::Eval, false).unwrap();
    let l = g.softmax_cross_entropy(fwd.logits, ds.labels.as_ref().unwrap()).unwrap();
    g.backward(l).unwrap();
    for (&v, &gr) in w.w.data().iter().zip(g.grad(wid).unwrap()) {
        if gr.abs() > 1e-6 {
            assert!((v + 1e-3 * gr.signum()).abs() < 1e-5, "w {v} grad {gr}");
        }
    }
}

#[test]
fn optimization_lowers_loss_and_leaves_model_untouched() {
    let model = trained(8, true);
    let shifted = synth_shift(&halves(64, 8, 7), &Shift::Brightness { offset: 0.25 }).unwrap();
    let (params, bn) = (model.params_checksum(), model.bn_checksum());
    let (w, log) = optimize_meta_input(&model, &shifted, &steps(40)).unwrap();
    assert_eq!(model.params_checksum(), params);
    assert_eq!(model.bn_checksum(), bn);
    assert!(log.epoch_losses.last() < log.epoch_losses.first(), "{:?}", log.epoch_losses);
    assert_eq!(w.shape(), [8, 8, 1]);
    assert_eq!(w.steps, 40);
}

#[test]
fn unfrozen_models_are_rejected() {
    let model = Model::build(toy_spec(8, 1, 2, true), 0).unwrap();
    let ds = halves(8, 8, 0);
    assert!(matches!(optimize_meta_input(&model, &ds, &steps(1)), Err(Error::Contract { .. })));
    assert!(matches!(optimize_meta_input_unsupervised(&model, &ds, &steps(1)), Err(Error::Contract { .. })));
    assert!(matches!(pseudo_label(&model, &ds, 0.5), Err(Error::Contract { .. })));
    assert!(matches!(bn_adapt(&model, &ds), Err(Error::Contract { .. })));
}

#[test]
fn meta_input_round_trips_with_provenance() {
    let model = trained(8, true);
    let ds = halves(32, 8, 2);
    let (w, _) = optimize_meta_input(&model, &ds, &steps(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_meta_input(&w, &path).unwrap();
    let back = load_meta_input(&path).unwrap();
    assert_eq!(back, w);
    assert!(back.trained_on.supervised);
    assert_eq!(back.trained_on.samples, 32);
    assert_eq!(back.trained_on.dataset, "halves");
}

#[test]
fn meta_input_shape_mismatch_is_a_shape_error() {
    let model = trained(8, true);
    let (w, _) = optimize_meta_input(&model, &halves(16, 8, 2), &steps(1)).unwrap();
    assert!(matches!(apply_meta_input(&halves(4, 6, 0), &w, false), Err(Error::Shape { .. })));
}

#[test]
fn select_confident_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c) = (200, 4);
    let mut data = Vec::new();
    for _ in 0..n {
        let raw: Vec<f32> = (0..c).map(|_| rng.random_range(0.0f32..1.0).powi(4)).collect();
        let s: f32 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let probs = Tensor::new(vec![n, c], data).unwrap();
    for alpha in [0.3, 0.5, 0.9] {
        let set = select_confident(&probs, alpha).unwrap();
        let mut expect = Vec::new();
        for i in 0..n {
            let row = probs.row(i);
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if row[best] as f64 > alpha {
                expect.push((i, best));
            }
        }
        let got: Vec<(usize, usize)> = set.indices.iter().copied().zip(set.labels.iter().copied()).collect();
        assert_eq!(got, expect, "alpha {alpha}");
        assert_eq!(set.total, n);
    }
}

#[test]
fn alpha_must_be_strictly_inside_unit_interval() {
    let probs = Tensor::full(vec![2, 2], 0.5);
    for alpha in [0.0, 1.0, -0.5, 2.0] {
        assert!(matches!(select_confident(&probs, alpha), Err(Error::Range { .. })), "{alpha}");
    }
}

#[test]
fn unreachable_alpha_reports_no_confident_samples() {
    let model = trained(8, true);
    let ds = halves(20, 8, 9);
    let cfg = AdaptConfig {
        alpha: 1.0 - 1e-12,
        ..steps(2)
    };
    assert!(matches!(
        optimize_meta_input_unsupervised(&model, &ds, &cfg),
        Err(Error::NoConfidentSamples { .. })
    ));
}

#[test]
fn unsupervised_records_selection() {
    let model = trained(8, true);
    let mut ds = halves(40, 8, 9);
    ds.labels = None;
    let (w, _) = optimize_meta_input_unsupervised(&model, &ds, &AdaptConfig { alpha: 0.6, ..steps(2) }).unwrap();
    assert!(!w.trained_on.supervised);
    assert_eq!(w.trained_on.alpha, Some(0.6));
    let f = w.trained_on.selected_fraction.unwrap();
    assert!(f > 0.0 && f <= 1.0);
}

#[test]
fn bn_adapt_on_source_reproduces_running_stats() {
    let source = halves(120, 8, 1);
    let model = trained(8, true);
    let adapted = bn_adapt(&model, &source).unwrap();
    assert_eq!(adapted.params_checksum(), model.params_checksum());
    for (a, b) in adapted.bn_stats.iter().zip(&model.bn_stats) {
        for (x, y) in a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)) {
            assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
        }
    }
}

#[test]
fn bn_adapt_changes_stats_on_shifted_target() {
    let model = trained(8, true);
    let shifted = synth_shift(&halves(60, 8, 4), &Shift::Brightness { offset: 0.2 }).unwrap();
    let adapted = bn_adapt(&model, &shifted).unwrap();
    assert_ne!(adapted.bn_checksum(), model.bn_checksum());
    assert_eq!(adapted.params_checksum(), model.params_checksum());
}

#[test]
fn bn_adapt_without_batchnorm_is_a_capability_error() {
    let model = trained(8, false);
    assert!(matches!(bn_adapt(&model, &halves(10, 8, 0)), Err(Error::Capability { .. })));
}
