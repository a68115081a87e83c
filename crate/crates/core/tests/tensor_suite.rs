//! Tape-op behavior, optimizer contracts, and the randomized
//! finite-difference sweep over the whole op catalog.

use jointsense::tensor::{
    gradcheck, Graph, OptimizerConfig, ParameterRegistry, Tensor, TensorError,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn scalar_graph(f: impl FnOnce(&mut Graph) -> jointsense::tensor::NodeId) -> f64 {
    let mut g = Graph::new();
    let id = f(&mut g);
    g.value(id).item()
}

#[test]
fn relu_and_softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let z = g.input(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    // 1x1 kernel with an identity channel embedding: output equals input.
    let c = 3;
    let mut g = Graph::new();
    let x = g
        .input(Tensor::from_fn(&[1, c, 4, 4], |i| (i % 13) as f64 * 0.25 - 1.0))
        .unwrap();
    let w = g
        .input(Tensor::from_fn(&[c, c, 1, 1], |i| {
            if i / c == i % c { 1.0 } else { 0.0 }
        }))
        .unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn linear_backward_matches_outer_product() {
    // loss = sum(W·x) ⇒ grad(W) = outer(1, x)
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
    let mut g = Graph::new();
    let w = g.param(&reg, "w").unwrap();
    let x = g.input(Tensor::new(vec![3, 1], vec![1.5, -2.0, 0.5]).unwrap()).unwrap();
    let y = g.matmul(w, x).unwrap();
    let loss = g.sum_all(y).unwrap();
    g.backward(loss, &mut reg).unwrap();
    assert_eq!(reg.grad("w").unwrap().data(), &[1.5, -2.0, 0.5, 1.5, -2.0, 0.5]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::scalar(2.0)).unwrap();
    let mut g = Graph::new();
    let w = g.param(&reg, "w").unwrap();
    let loss = g.mean_all(w).unwrap();
    g.backward(loss, &mut reg).unwrap();
    assert!(matches!(g.backward(loss, &mut reg), Err(TensorError::BackwardTwice)));
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&reg, "w").unwrap();
    assert!(matches!(
        g.backward(w, &mut reg),
        Err(TensorError::NonScalarLoss { .. })
    ));

    let mut g2 = Graph::new();
    let x = g2.input(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let loss = g2.mean_all(x).unwrap();
    assert!(matches!(g2.backward(loss, &mut reg), Err(TensorError::DetachedGraph)));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3, 3])).unwrap();
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add"), "got: {msg}");
    assert!(msg.contains("[2, 3]"), "got: {msg}");
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_vec(vec![0.0])).unwrap();
    assert!(matches!(g.log(a), Err(TensorError::NonFinite { op: "log" })));
}

#[test]
fn descent_converges_on_quadratic() {
    // (w − 3)² with plain descent, lr 0.1: recurrence w ← w + 0.2(3 − w).
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::scalar(0.0)).unwrap();
    let mut prev = 0.0f64;
    for _ in 0..200 {
        let mut g = Graph::new();
        let w = g.param(&reg, "w").unwrap();
        let c = g.input(Tensor::scalar(3.0)).unwrap();
        let d = g.sub(w, c).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss, &mut reg).unwrap();
        reg.optimizer_step(0.1, &OptimizerConfig::Sgd).unwrap();
        let w_now = reg.get("w").unwrap().item();
        if (prev - 3.0).abs() > 1e-12 {
            assert!(w_now > prev, "w must increase monotonically toward 3");
        }
        prev = w_now;
    }
    assert!((prev - 3.0).abs() < 1e-3);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&reg, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss, &mut reg).unwrap();
    reg.optimizer_step(0.0, &OptimizerConfig::default()).unwrap();
    assert_eq!(reg.get("w").unwrap().data(), &[1.0, -2.0]);
}

#[test]
fn step_before_backward_is_an_error() {
    let mut reg = ParameterRegistry::new();
    reg.register("w", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        reg.optimizer_step(0.1, &OptimizerConfig::default()),
        Err(TensorError::StepBeforeBackward)
    ));
}

#[test]
fn adam_trajectories_are_deterministic() {
    let run = || {
        let mut reg = ParameterRegistry::new();
        reg.register("w", Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.5)).unwrap();
        for _ in 0..50 {
            let mut g = Graph::new();
            let w = g.param(&reg, "w").unwrap();
            let s = g.sigmoid(w).unwrap();
            let sq = g.mul(s, s).unwrap();
            let loss = g.mean_all(sq).unwrap();
            g.backward(loss, &mut reg).unwrap();
            reg.optimizer_step(1e-2, &OptimizerConfig::default()).unwrap();
        }
        reg.get("w").unwrap().data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let mut reg = ParameterRegistry::new();
    reg.register("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    reg.register("b", Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    reg.set_trainable(|name| name == "b");
    let mut g = Graph::new();
    let a = g.param(&reg, "a").unwrap();
    let b = g.param(&reg, "b").unwrap();
    let s = g.add(a, b).unwrap();
    let sq = g.mul(s, s).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss, &mut reg).unwrap();
    reg.optimizer_step(0.1, &OptimizerConfig::default()).unwrap();
    assert_eq!(reg.get("a").unwrap().data(), &[1.0, 2.0]);
    assert_ne!(reg.get("b").unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn archive_round_trips_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.nta");
    let mut reg = ParameterRegistry::new();
    reg.register("layer.w", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1)).unwrap();
    reg.register_buffer("layer.running_mean", Tensor::from_vec(vec![0.5, -0.5])).unwrap();
    reg.save(&path).unwrap();

    let loaded = ParameterRegistry::load(&path).unwrap();
    assert!(loaded.bitwise_eq(&reg));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        ParameterRegistry::load(&path),
        Err(TensorError::ChecksumMismatch)
    ));
}

#[test]
fn op_catalog_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for (name, check) in gradcheck::op_catalog() {
        for trial in 0..5 {
            let err = check(&mut rng);
            assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
        }
    }
}

#[test]
fn batch_norm_inference_is_input_deterministic() {
    // With running statistics the op must be a fixed affine map, independent
    // of what else sits in the batch.
    let mean = Tensor::from_vec(vec![0.2]);
    let var = Tensor::from_vec(vec![1.3]);
    let eval = |batch: Tensor, idx: usize| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(batch).unwrap();
        let gamma = g.input(Tensor::from_vec(vec![1.1])).unwrap();
        let beta = g.input(Tensor::from_vec(vec![-0.4])).unwrap();
        let (y, stats) = g.batch_norm(x, gamma, beta, Some((&mean, &var))).unwrap();
        assert!(stats.is_none());
        let v = g.value(y);
        v.data()[idx * 4..(idx + 1) * 4].to_vec()
    };
    let sample = [0.3, -0.7, 1.2, 0.0];
    let mut batch1 = sample.to_vec();
    batch1.extend([9.0, -9.0, 4.0, 2.0]);
    let mut batch2 = sample.to_vec();
    batch2.extend([-1.0, 0.5, 0.25, -3.0]);
    let a = eval(Tensor::new(vec![2, 1, 2, 2], batch1).unwrap(), 0);
    let b = eval(Tensor::new(vec![2, 1, 2, 2], batch2).unwrap(), 0);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(xs in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let n = xs.len();
        let got = {
            let mut g = Graph::new();
            let x = g.input(Tensor::from_vec(xs)).unwrap();
            let s = g.softmax(x, 0).unwrap();
            g.value(s).data().to_vec()
        };
        prop_assert!(got.iter().all(|v| *v >= 0.0));
        prop_assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(got.len(), n);
    }

    #[test]
    fn mean_all_matches_direct_average(xs in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let direct = xs.iter().sum::<f64>() / xs.len() as f64;
        let got = scalar_graph(|g| {
            let x = g.input(Tensor::from_vec(xs.clone())).unwrap();
            g.mean_all(x).unwrap()
        });
        prop_assert!((got - direct).abs() < 1e-12);
    }
}
