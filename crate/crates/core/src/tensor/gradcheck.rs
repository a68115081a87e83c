//! Finite-difference gradient oracle.
//!
//! Central differences over a scalar-valued closure, kept independent of the
//! tape so the backward rules are checked against a derivative estimate that
//! never touches them. [`op_catalog`] enumerates one randomized check per
//! graph operation; both the unit tests and the acceptance suite drive it.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Graph, NodeId, ParameterRegistry, Tensor, TensorError};

/// Central-difference gradient of `f` at `point`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], eps: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let plus = f(&probe);
        probe[i] = point[i] - eps;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Relative error with a floor so near-zero gradients compare on an
/// absolute scale.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative disagreement between two gradient vectors.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of a scalar-valued graph against central
/// differences over all `inputs`; returns the worst relative error.
pub fn check_scalar_fn(
    inputs: &[Tensor],
    eps: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
) -> Result<f64, TensorError> {
    let mut reg = ParameterRegistry::new();
    for (i, t) in inputs.iter().enumerate() {
        reg.register(&format!("x{}", i), t.clone())?;
    }
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = (0..inputs.len())
        .map(|i| graph.param(&reg, &format!("x{}", i)))
        .collect::<Result<_, _>>()?;
    let out = build(&mut graph, &ids)?;
    graph.backward(out, &mut reg)?;
    let analytic: Vec<f64> = (0..inputs.len())
        .flat_map(|i| reg.grad(&format!("x{}", i)).unwrap().data().to_vec())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |point: &[f64]| -> f64 {
        let mut graph = Graph::new();
        let mut ids = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for t in inputs {
            let slice = point[off..off + t.len()].to_vec();
            off += t.len();
            ids.push(graph.input(Tensor::new(t.shape().to_vec(), slice).unwrap()).unwrap());
        }
        let out = build(&mut graph, &ids).unwrap();
        graph.value(out).item()
    };
    let numeric = central_diff(eval, &flat, eps);
    Ok(max_rel_error(&analytic, &numeric))
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values kept away from zero, for kinked ops like relu and abs.
fn rand_away_from_zero(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.05..1.0)
    })
}

/// Random values whose pairwise gaps exceed `gap`, for argmax-style ops.
fn rand_distinct(rng: &mut ChaCha12Rng, shape: &[usize], gap: f64) -> Tensor {
    loop {
        let t = rand_tensor(rng, shape, -1.0, 1.0);
        let mut sorted: Vec<f64> = t.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).all(|w| w[1] - w[0] > gap) {
            return t;
        }
    }
}

/// Projects a (possibly non-scalar) node to a scalar with a fixed random
/// probe, so the check exercises the whole Jacobian action.
fn probe(graph: &mut Graph, id: NodeId, weights: &Tensor) -> Result<NodeId, TensorError> {
    let w = graph.input(weights.clone())?;
    let flat_len = weights.len();
    let flat = graph.reshape(id, &[flat_len])?;
    let prod = graph.mul(flat, w)?;
    graph.sum_all(prod)
}

type OpCheck = Box<dyn Fn(&mut ChaCha12Rng) -> f64>;

/// One randomized finite-difference check per graph operation. Each closure
/// returns the worst relative error of a fresh random instance.
pub fn op_catalog() -> Vec<(&'static str, OpCheck)> {
    let eps = 1e-5;
    let mut cat: Vec<(&'static str, OpCheck)> = Vec::new();

    fn probe_for(rng: &mut ChaCha12Rng, len: usize) -> Tensor {
        Tensor::from_fn(&[len], |_| rng.gen_range(-1.0..1.0))
    }

    macro_rules! entry {
        ($name:literal, $f:expr) => {
            cat.push(($name, Box::new($f)));
        };
    }

    entry!("add", move |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("sub", move |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.sub(ids[0], ids[1])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("mul", move |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("neg", move |rng| {
        let a = rand_tensor(rng, &[5], -1.0, 1.0);
        let p = probe_for(rng, 5);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.neg(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("scalar_mul", move |rng| {
        let a = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let k = rng.gen_range(-2.0..2.0);
        let p = probe_for(rng, 8);
        check_scalar_fn(&[a], eps, move |g, ids| {
            let y = g.scalar_mul(ids[0], k)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("add_row", move |rng| {
        let a = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.add_row(ids[0], ids[1])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("repeat_row", move |rng| {
        let a = rand_tensor(rng, &[4], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.repeat_row(ids[0], 3)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("matmul", move |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("transpose", move |rng| {
        let a = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let p = probe_for(rng, 15);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.transpose(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("relu", move |rng| {
        let a = rand_away_from_zero(rng, &[4, 4]);
        let p = probe_for(rng, 16);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.relu(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("sigmoid", move |rng| {
        let a = rand_tensor(rng, &[6], -3.0, 3.0);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.sigmoid(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("log", move |rng| {
        let a = rand_tensor(rng, &[6], 0.1, 2.0);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.log(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("abs", move |rng| {
        let a = rand_away_from_zero(rng, &[6]);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.abs(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("acos_clamped", move |rng| {
        let a = rand_tensor(rng, &[6], -0.9, 0.9);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.acos_clamped(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("softmax_axis1", move |rng| {
        let a = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        let p = probe_for(rng, 15);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.softmax(ids[0], 1)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("softmax_axis0", move |rng| {
        let a = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.softmax(ids[0], 0)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("mean_all", move |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        check_scalar_fn(&[a], eps, |g, ids| g.mean_all(ids[0])).unwrap()
    });
    entry!("sum_all", move |rng| {
        let a = rand_tensor(rng, &[7], -1.0, 1.0);
        check_scalar_fn(&[a], eps, |g, ids| g.sum_all(ids[0])).unwrap()
    });
    entry!("mean_axis0", move |rng| {
        let a = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        let p = probe_for(rng, 3);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.mean_axis0(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("max_axis0", move |rng| {
        let a = rand_distinct(rng, &[5, 3], 1e-3);
        let p = probe_for(rng, 3);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.max_axis0(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("concat_axis0", move |rng| {
        let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let p = probe_for(rng, 18);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.concat(&[ids[0], ids[1]], 0)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("concat_axis1", move |rng| {
        let a = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let p = probe_for(rng, 18);
        check_scalar_fn(&[a, b], eps, |g, ids| {
            let y = g.concat(&[ids[0], ids[1]], 1)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("narrow", move |rng| {
        let a = rand_tensor(rng, &[4, 6], -1.0, 1.0);
        let p = probe_for(rng, 8);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.narrow(ids[0], 1, 2, 2)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("reshape", move |rng| {
        let a = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        let p = probe_for(rng, 12);
        check_scalar_fn(&[a], eps, |g, ids| {
            let y = g.reshape(ids[0], &[3, 4])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("conv2d", move |rng| {
        let x = rand_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        let pad = rng.gen_range(0..2usize);
        let out_hw = 5 + 2 * pad - 3 + 1;
        let p = probe_for(rng, 2 * 3 * out_hw * out_hw);
        check_scalar_fn(&[x, w, b], eps, move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, pad)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("max_pool2d", move |rng| {
        let x = rand_distinct(rng, &[1, 2, 4, 4], 1e-3);
        let p = probe_for(rng, 8);
        check_scalar_fn(&[x], eps, |g, ids| {
            let y = g.max_pool2d(ids[0], 2, 2)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("global_avg_pool", move |rng| {
        let x = rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0);
        let p = probe_for(rng, 6);
        check_scalar_fn(&[x], eps, |g, ids| {
            let y = g.global_avg_pool(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("batch_norm_batch_stats", move |rng| {
        let x = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let gamma = rand_tensor(rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(rng, &[2], -0.5, 0.5);
        let p = probe_for(rng, 54);
        check_scalar_fn(&[x, gamma, beta], eps, |g, ids| {
            let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], None)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("batch_norm_running_stats", move |rng| {
        let x = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
        let gamma = rand_tensor(rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(rng, &[2], -0.5, 0.5);
        let mean = rand_tensor(rng, &[2], -0.3, 0.3);
        let var = rand_tensor(rng, &[2], 0.5, 1.5);
        let p = probe_for(rng, 36);
        check_scalar_fn(&[x, gamma, beta], eps, move |g, ids| {
            let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], Some((&mean, &var)))?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("layer_norm", move |rng| {
        let x = rand_tensor(rng, &[4, 6], -1.0, 1.0);
        let gamma = rand_tensor(rng, &[6], 0.5, 1.5);
        let beta = rand_tensor(rng, &[6], -0.5, 0.5);
        let p = probe_for(rng, 24);
        check_scalar_fn(&[x, gamma, beta], eps, |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("row_normalize", move |rng| {
        let x = Tensor::from_fn(&[4, 3], |_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.3..1.0)
        });
        let p = probe_for(rng, 12);
        check_scalar_fn(&[x], eps, |g, ids| {
            let y = g.row_normalize(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("row_l2norm", move |rng| {
        let x = Tensor::from_fn(&[4, 3], |_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.3..1.0)
        });
        let p = probe_for(rng, 4);
        check_scalar_fn(&[x], eps, |g, ids| {
            let y = g.row_l2norm(ids[0])?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("bce", move |rng| {
        let pvals = rand_tensor(rng, &[6], 0.05, 0.95);
        let labels = Tensor::from_fn(&[6], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let p = probe_for(rng, 6);
        check_scalar_fn(&[pvals], eps, move |g, ids| {
            let y = g.bce(ids[0], labels.clone())?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("huber", move |rng| {
        let d = Tensor::from_fn(&[6], |_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // keep away from the |d| = delta kink at 1.0
            let mag = if rng.gen_bool(0.5) {
                rng.gen_range(0.05..0.9)
            } else {
                rng.gen_range(1.1..2.0)
            };
            sign * mag
        });
        let p = probe_for(rng, 6);
        check_scalar_fn(&[d], eps, |g, ids| {
            let y = g.huber(ids[0], 1.0)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("gather_rows", move |rng| {
        let q = rand_tensor(rng, &[4, 5], -1.0, 1.0);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let p = probe_for(rng, 4);
        check_scalar_fn(&[q], eps, move |g, ids| {
            let y = g.gather_rows(ids[0], &idx)?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    entry!("encoder_layer", move |rng| {
        let d = 8usize;
        let tokens = rand_tensor(rng, &[5, d], -1.0, 1.0);
        let mats: Vec<Tensor> = (0..4).map(|_| rand_tensor(rng, &[d, d], -0.5, 0.5)).collect();
        let biases: Vec<Tensor> = (0..4).map(|_| rand_tensor(rng, &[d], -0.2, 0.2)).collect();
        let ffn_w1 = rand_tensor(rng, &[d, 2 * d], -0.5, 0.5);
        let ffn_b1 = rand_tensor(rng, &[2 * d], -0.2, 0.2);
        let ffn_w2 = rand_tensor(rng, &[2 * d, d], -0.5, 0.5);
        let ffn_b2 = rand_tensor(rng, &[d], -0.2, 0.2);
        let ln_g: Vec<Tensor> = (0..2).map(|_| rand_tensor(rng, &[d], 0.5, 1.5)).collect();
        let ln_b: Vec<Tensor> = (0..2).map(|_| rand_tensor(rng, &[d], -0.2, 0.2)).collect();
        let p = probe_for(rng, 5 * d);
        let inputs: Vec<Tensor> = [tokens]
            .into_iter()
            .chain(mats)
            .chain(biases)
            .chain([ffn_w1, ffn_b1, ffn_w2, ffn_b2])
            .chain(ln_g)
            .chain(ln_b)
            .collect();
        check_scalar_fn(&inputs, eps, |g, ids| {
            let y = g.encoder_layer(
                ids[0], 2, ids[1], ids[5], ids[2], ids[6], ids[3], ids[7], ids[4], ids[8],
                ids[13], ids[15], ids[9], ids[10], ids[11], ids[12], ids[14], ids[16],
            )?;
            probe(g, y, &p)
        })
        .unwrap()
    });
    cat
}
