//! Forward oracles and finite-difference gradient checks for every tensor
//! primitive, plus graph semantics (accumulation, detachment, replay).

mod common;

use common::{assert_close, check_grads, rand_vec, rng};
use lat_core::ops::{concat_cols, concat_rows};
use lat_core::optim::{Parameters, Sgd};
use lat_core::tensor::Tensor;
use lat_core::Error;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).expect("test tensor")
}

/// Reduce an op output to a scalar through fixed random weights so every
/// output element influences the loss.
fn weighted_sum(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let w = t64(&out.shape(), rand_vec(&mut r, out.len(), -1.0, 1.0));
    out.mul(&w).unwrap().sum_all()
}

// ---------------------------------------------------------------- forward

#[test]
fn matmul_identity_passthrough() {
    let mut r = rng(1);
    let m = t64(&[3, 3], rand_vec(&mut r, 9, -2.0, 2.0));
    let eye = t64(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let out = eye.matmul(&m).unwrap();
    assert_eq!(out.data_vec(), m.data_vec());
}

#[test]
fn matmul_zero_annihilates() {
    let z = Tensor::<f64>::zeros(&[2, 3]);
    let mut r = rng(2);
    let m = t64(&[3, 2], rand_vec(&mut r, 6, -2.0, 2.0));
    let out = z.matmul(&m).unwrap();
    assert!(out.data_vec().iter().all(|&v| v == 0.0));
    assert_eq!(out.shape(), vec![2, 2]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(3);
    let a = rand_vec(&mut r, 6, -3.0, 3.0);
    let b = rand_vec(&mut r, 6, -3.0, 3.0);
    let out = t64(&[2, 3], a.clone())
        .matmul(&t64(&[3, 2], b.clone()))
        .unwrap();
    let got = out.data_vec();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a[i * 3 + k] * b[k * 2 + j];
            }
            assert_close(got[i * 2 + j], acc, 1e-12, "matmul element");
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    match a.matmul(&b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(4);
    let x = rand_vec(&mut r, 16, 0.0, 1.0);
    let out = t64(&[1, 1, 4, 4], x.clone())
        .conv2d(&t64(&[1, 1, 1, 1], vec![1.0]), 1)
        .unwrap();
    assert_eq!(out.shape(), vec![1, 1, 4, 4]);
    assert_eq!(out.data_vec(), x);
}

#[test]
fn conv2d_zero_kernel() {
    let mut r = rng(5);
    let x = t64(&[1, 2, 4, 4], rand_vec(&mut r, 32, -1.0, 1.0));
    let k = Tensor::<f64>::zeros(&[3, 2, 2, 2]);
    let out = x.conv2d(&k, 1).unwrap();
    assert!(out.data_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut r = rng(6);
    let x = rand_vec(&mut r, 16, -2.0, 2.0);
    let k = rand_vec(&mut r, 4, -2.0, 2.0);
    let out = t64(&[1, 1, 4, 4], x.clone())
        .conv2d(&t64(&[1, 1, 2, 2], k.clone()), 1)
        .unwrap();
    assert_eq!(out.shape(), vec![1, 1, 3, 3]);
    let got = out.data_vec();
    for y in 0..3 {
        for xx in 0..3 {
            let mut acc = 0.0;
            for ky in 0..2 {
                for kx in 0..2 {
                    acc += x[(y + ky) * 4 + (xx + kx)] * k[ky * 2 + kx];
                }
            }
            assert_close(got[y * 3 + xx], acc, 1e-12, "conv element");
        }
    }
}

#[test]
fn conv2d_stride_two_shape() {
    let x = Tensor::<f64>::zeros(&[2, 1, 5, 5]);
    let k = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
    let out = x.conv2d(&k, 2).unwrap();
    assert_eq!(out.shape(), vec![2, 3, 2, 2]);
}

#[test]
fn conv2d_kernel_larger_than_input_errors() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    assert!(matches!(x.conv2d(&k, 1), Err(Error::Dimension { .. })));
}

#[test]
fn relu_definition() {
    let out = t64(&[3], vec![-1.0, 0.0, 2.0]).relu();
    assert_eq!(out.data_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn add_zero_is_identity() {
    let mut r = rng(7);
    let x = rand_vec(&mut r, 8, -2.0, 2.0);
    let out = t64(&[2, 4], x.clone())
        .add(&Tensor::zeros(&[2, 4]))
        .unwrap();
    assert_eq!(out.data_vec(), x);
}

#[test]
fn elementwise_shape_mismatch_errors() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 2]);
    assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    assert!(matches!(a.mul(&b), Err(Error::Dimension { .. })));
    assert!(matches!(a.sub(&b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    for c in [2usize, 4, 7] {
        let logits = Tensor::<f64>::full(&[3, c], 0.25);
        let loss = logits.softmax_cross_entropy(&vec![c - 1; 3], None).unwrap();
        assert_close(loss.item().unwrap(), (c as f64).ln(), 1e-12, "uniform ce");
    }
}

#[test]
fn softmax_cross_entropy_saturated_correct_class() {
    let mut logits = vec![0.0; 4];
    logits[1] = 1e4;
    let loss = t64(&[1, 4], logits)
        .softmax_cross_entropy(&[1], None)
        .unwrap();
    assert!(loss.item().unwrap().abs() < 1e-6);
}

#[test]
fn softmax_cross_entropy_matches_log_sum_exp_oracle() {
    let mut r = rng(8);
    let logits = rand_vec(&mut r, 12, -4.0, 4.0);
    let labels = [2usize, 0, 3];
    let loss = t64(&[3, 4], logits.clone())
        .softmax_cross_entropy(&labels, None)
        .unwrap()
        .item()
        .unwrap();
    let mut acc = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let vals = &logits[row * 4..(row + 1) * 4];
        let lse = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        acc += lse - vals[label];
    }
    assert_close(loss, acc / 3.0, 1e-10, "ce vs naive oracle");
}

#[test]
fn softmax_cross_entropy_label_out_of_range() {
    let logits = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(
        logits.softmax_cross_entropy(&[0, 3], None),
        Err(Error::Index { .. })
    ));
}

#[test]
fn softmax_cross_entropy_weighted_rows() {
    let mut r = rng(9);
    let logits = rand_vec(&mut r, 8, -2.0, 2.0);
    let t = t64(&[2, 4], logits.clone());
    // Weight row 0 only: loss must equal the single-row loss.
    let w = vec![1.0, 0.0];
    let weighted = t.softmax_cross_entropy(&[1, 2], Some(&w)).unwrap();
    let single = t64(&[1, 4], logits[0..4].to_vec())
        .softmax_cross_entropy(&[1], None)
        .unwrap();
    assert_close(
        weighted.item().unwrap(),
        single.item().unwrap(),
        1e-12,
        "weighted ce",
    );
    assert!(matches!(
        t.softmax_cross_entropy(&[1, 2], Some(&[0.0, 0.0])),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn clamp_inside_range_is_bitwise_identity() {
    let mut r = rng(10);
    let x = rand_vec(&mut r, 16, 0.2, 0.8);
    let out = t64(&[16], x.clone()).clamp(0.0, 1.0).unwrap();
    for (a, b) in out.data_vec().iter().zip(x.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn forward_replay_is_identical() {
    let mut r = rng(11);
    let x = t64(&[4, 4], rand_vec(&mut r, 16, -1.0, 1.0));
    let w = t64(&[4, 4], rand_vec(&mut r, 16, -1.0, 1.0));
    let run = || {
        x.matmul(&w)
            .unwrap()
            .gelu()
            .softmax_rows()
            .unwrap()
            .data_vec()
    };
    let a = run();
    let b = run();
    for (u, v) in a.iter().zip(b.iter()) {
        assert_eq!(u.to_bits(), v.to_bits());
    }
}

// --------------------------------------------------------------- backward

#[test]
fn backward_of_sum_is_ones() {
    let x = t64(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).with_grad();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_detached_input_gets_no_gradient() {
    let x = t64(&[3], vec![1.0, 2.0, 3.0]).with_grad();
    let detached = x.detach();
    let loss = detached.scale(2.0).sum_all();
    loss.backward().unwrap();
    assert!(x.grad_vec().is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let x = t64(&[2], vec![1.0, 2.0]).with_grad();
    let y = x.scale(2.0);
    assert!(matches!(y.backward(), Err(Error::Contract { .. })));
}

#[test]
fn backward_accumulates_across_calls() {
    let x = t64(&[2], vec![1.0, 2.0]).with_grad();
    let loss = x.sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn shared_input_sums_both_contributions() {
    // d/dx (x*x) = 2x via two accumulations of the same parent.
    let x = t64(&[3], vec![1.0, -2.0, 0.5]).with_grad();
    let loss = x.mul(&x).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2.0, -4.0, 1.0]);
}

#[test]
fn grads_add_elementwise_ops() {
    let mut r = rng(20);
    let a = rand_vec(&mut r, 6, -2.0, 2.0);
    let b = rand_vec(&mut r, 6, -2.0, 2.0);
    check_grads(
        &[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())],
        |t| {
            let sum = t[0].add(&t[1]).unwrap();
            let diff = t[0].sub(&t[1]).unwrap();
            let prod = sum.mul(&diff).unwrap().scale(0.5).add_scalar(1.5);
            weighted_sum(&prod, 99)
        },
    );
}

#[test]
fn grads_relu_gelu_clamp() {
    let mut r = rng(21);
    // Keep points away from relu/clamp kinks so finite differences are valid.
    let x: Vec<f64> = rand_vec(&mut r, 10, -2.0, 2.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    check_grads(&[(vec![10], x.clone())], |t| {
        weighted_sum(&t[0].relu(), 100)
    });
    check_grads(&[(vec![10], x.clone())], |t| {
        weighted_sum(&t[0].gelu(), 101)
    });
    check_grads(&[(vec![10], x)], |t| {
        weighted_sum(&t[0].clamp(-1.5, 1.5).unwrap(), 102)
    });
}

#[test]
fn grads_matmul_both_sides() {
    let mut r = rng(22);
    let a = rand_vec(&mut r, 6, -2.0, 2.0);
    let b = rand_vec(&mut r, 8, -2.0, 2.0);
    check_grads(
        &[(vec![3, 2], a), (vec![2, 4], b)],
        |t| weighted_sum(&t[0].matmul(&t[1]).unwrap(), 103),
    );
}

#[test]
fn grads_conv2d_input_and_kernel() {
    let mut r = rng(23);
    let x = rand_vec(&mut r, 2 * 2 * 5 * 5, -1.0, 1.0);
    let k = rand_vec(&mut r, 3 * 2 * 2 * 2, -1.0, 1.0);
    check_grads(
        &[(vec![2, 2, 5, 5], x), (vec![3, 2, 2, 2], k)],
        |t| weighted_sum(&t[0].conv2d(&t[1], 2).unwrap(), 104),
    );
}

#[test]
fn grads_softmax_rows() {
    let mut r = rng(24);
    let x = rand_vec(&mut r, 12, -3.0, 3.0);
    check_grads(&[(vec![3, 4], x)], |t| {
        weighted_sum(&t[0].softmax_rows().unwrap(), 105)
    });
}

#[test]
fn grads_layer_norm() {
    let mut r = rng(25);
    let x = rand_vec(&mut r, 12, -2.0, 2.0);
    let g = rand_vec(&mut r, 4, 0.5, 1.5);
    let b = rand_vec(&mut r, 4, -0.5, 0.5);
    check_grads(
        &[(vec![3, 4], x), (vec![4], g), (vec![4], b)],
        |t| weighted_sum(&t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap(), 106),
    );
}

#[test]
fn grads_softmax_cross_entropy() {
    let mut r = rng(26);
    let x = rand_vec(&mut r, 12, -2.0, 2.0);
    check_grads(&[(vec![3, 4], x.clone())], |t| {
        t[0].softmax_cross_entropy(&[1, 3, 0], None).unwrap()
    });
    check_grads(&[(vec![3, 4], x)], |t| {
        t[0].softmax_cross_entropy(&[1, 3, 0], Some(&[0.2, 0.0, 1.3]))
            .unwrap()
    });
}

#[test]
fn grads_shape_and_layout_ops() {
    let mut r = rng(27);
    let x = rand_vec(&mut r, 24, -2.0, 2.0);
    check_grads(&[(vec![4, 6], x.clone())], |t| {
        weighted_sum(&t[0].transpose2d().unwrap(), 107)
    });
    check_grads(&[(vec![4, 6], x.clone())], |t| {
        weighted_sum(&t[0].reshape(&[2, 12]).unwrap(), 108)
    });
    check_grads(&[(vec![4, 6], x.clone())], |t| {
        weighted_sum(&t[0].slice_rows(1, 3).unwrap(), 109)
    });
    check_grads(&[(vec![4, 6], x.clone())], |t| {
        weighted_sum(&t[0].slice_cols(2, 5).unwrap(), 110)
    });
    check_grads(&[(vec![4, 6], x.clone())], |t| {
        weighted_sum(&t[0].mean_pool_rows(2).unwrap(), 111)
    });
    check_grads(&[(vec![4, 6], x)], |t| {
        weighted_sum(&t[0].tile_rows(3).unwrap(), 112)
    });
    let v = rand_vec(&mut r, 6, -2.0, 2.0);
    check_grads(&[(vec![6], v)], |t| {
        weighted_sum(&t[0].broadcast_rows(5).unwrap(), 113)
    });
}

#[test]
fn grads_concat() {
    let mut r = rng(28);
    let a = rand_vec(&mut r, 6, -2.0, 2.0);
    let b = rand_vec(&mut r, 9, -2.0, 2.0);
    check_grads(
        &[(vec![2, 3], a.clone()), (vec![3, 3], b.clone())],
        |t| weighted_sum(&concat_rows(&[t[0].clone(), t[1].clone()]).unwrap(), 114),
    );
    let c = rand_vec(&mut r, 8, -2.0, 2.0);
    let d = rand_vec(&mut r, 4, -2.0, 2.0);
    check_grads(
        &[(vec![2, 4], c), (vec![2, 2], d)],
        |t| weighted_sum(&concat_cols(&[t[0].clone(), t[1].clone()]).unwrap(), 115),
    );
}

#[test]
fn grads_embedding_scatter() {
    let mut r = rng(29);
    let table = rand_vec(&mut r, 5 * 3, -1.0, 1.0);
    check_grads(&[(vec![5, 3], table)], |t| {
        weighted_sum(&t[0].embedding(&[4, 0, 0, 2]).unwrap(), 116)
    });
    let t = Tensor::<f64>::zeros(&[4, 2]);
    assert!(matches!(t.embedding(&[4]), Err(Error::Index { .. })));
}

#[test]
fn grads_channel_bias() {
    let mut r = rng(30);
    let x = rand_vec(&mut r, 1 * 3 * 2 * 2, -1.0, 1.0);
    let b = rand_vec(&mut r, 3, -1.0, 1.0);
    check_grads(
        &[(vec![1, 3, 2, 2], x), (vec![3], b)],
        |t| weighted_sum(&t[0].add_channel_bias(&t[1]).unwrap(), 117),
    );
}

#[test]
fn grads_two_layer_mlp_every_parameter() {
    // 4 -> 8 -> 3 network with relu, checked on every weight and bias.
    let mut r = rng(31);
    let x = rand_vec(&mut r, 2 * 4, -1.0, 1.0);
    let w1 = rand_vec(&mut r, 4 * 8, -0.7, 0.7);
    let b1 = rand_vec(&mut r, 8, -0.2, 0.2);
    let w2 = rand_vec(&mut r, 8 * 3, -0.7, 0.7);
    let b2 = rand_vec(&mut r, 3, -0.2, 0.2);
    let xc = x.clone();
    check_grads(
        &[
            (vec![4, 8], w1),
            (vec![8], b1),
            (vec![8, 3], w2),
            (vec![3], b2),
        ],
        move |t| {
            let input = Tensor::from_vec(&[2, 4], xc.clone()).unwrap();
            let h = input
                .matmul(&t[0])
                .unwrap()
                .add(&t[1].broadcast_rows(2).unwrap())
                .unwrap()
                .relu();
            let logits = h
                .matmul(&t[2])
                .unwrap()
                .add(&t[3].broadcast_rows(2).unwrap())
                .unwrap();
            logits.softmax_cross_entropy(&[0, 2], None).unwrap()
        },
    );
}

// -------------------------------------------------------- graph & optimizer

#[test]
fn graph_topology_is_consistent() {
    let x = t64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_grad();
    let y = x.matmul(&x).unwrap().relu().sum_all();
    let g = y.graph();
    assert!(g.len() >= 4);
    // Every parent id must appear earlier in topological order.
    let mut seen = std::collections::HashSet::new();
    for node in &g.nodes {
        for p in &node.parents {
            assert!(seen.contains(p), "parent {p} after consumer {}", node.id);
        }
        seen.insert(node.id);
    }
    assert_eq!(g.count_op("matmul"), 1);
    assert_eq!(g.count_op("sum_all"), 1);
}

#[test]
fn optimizer_single_scalar_arithmetic() {
    let w = Tensor::scalar(1.0f64).with_grad();
    w.scale(2.0).sum_all().backward().unwrap();
    let mut params = Parameters::new();
    params.push("w", w.clone()).unwrap();
    Sgd::new(0.1).step(&params).unwrap();
    assert_close(w.item().unwrap(), 0.8, 1e-15, "sgd one step");
    assert!(w.grad_vec().is_none(), "gradients cleared after step");
}

#[test]
fn optimizer_zero_gradient_is_noop() {
    let w = t64(&[2], vec![1.0, -1.0]).with_grad();
    w.scale(0.0).sum_all().backward().unwrap();
    let mut params = Parameters::new();
    params.push("w", w.clone()).unwrap();
    Sgd::new(0.5).step(&params).unwrap();
    assert_eq!(w.data_vec(), vec![1.0, -1.0]);
}

#[test]
fn optimizer_zero_lr_is_noop() {
    let v = Tensor::scalar(3.0f64).with_grad();
    v.scale(7.0).sum_all().backward().unwrap();
    let mut params = Parameters::new();
    params.push("v", v.clone()).unwrap();
    Sgd::new(0.0).step(&params).unwrap();
    assert_eq!(v.item().unwrap(), 3.0);
}

#[test]
fn optimizer_missing_gradient_is_error() {
    let w = t64(&[2], vec![1.0, 2.0]).with_grad();
    let mut params = Parameters::new();
    params.push("w", w).unwrap();
    assert!(matches!(
        Sgd::new(0.1).step(&params),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn optimizer_momentum_accumulates_velocity() {
    let w = Tensor::scalar(0.0f64).with_grad();
    let mut params = Parameters::new();
    params.push("w", w.clone()).unwrap();
    let mut opt = Sgd::with_momentum(0.1, 0.5);
    // Two steps with constant gradient 1: v1 = 1, v2 = 1.5.
    w.add_scalar(1.0).sum_all().backward().unwrap();
    opt.step(&params).unwrap();
    w.add_scalar(1.0).sum_all().backward().unwrap();
    opt.step(&params).unwrap();
    assert_close(w.item().unwrap(), -(0.1 + 0.15), 1e-15, "momentum steps");
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut params = Parameters::<f64>::new();
    params.push("w", Tensor::scalar(1.0)).unwrap();
    assert!(params.push("w", Tensor::scalar(2.0)).is_err());
}
