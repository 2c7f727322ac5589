//! Forward values, error paths and finite-difference gradient checks for
//! the tensor engine.

use icm_core::{Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type OpFn = fn(&mut Graph<'_, f64>, &[Var]) -> icm_core::Result<Var>;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// loss = Σ op(inputs) ⊙ w for fixed random w, so every output entry matters.
fn weighted_loss(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(out), &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(op: OpFn, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = op(&mut g, &vars).unwrap();
    let l = weighted_loss(&mut g, out, 99);
    g.value(l)[0]
}

/// Worst normwise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the
/// inputs, `a` from autodiff and `n` from central differences (h = 1e-5).
fn fd_max_rel_err(op: OpFn, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param_owned(x.clone())).collect();
    let out = op(&mut g, &vars).unwrap();
    let l = weighted_loss(&mut g, out, 99);
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().to_vec();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(op, &plus) - eval(op, &minus)) / (2.0 * h);
            let a = analytic[j];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.max(nn).sqrt().max(1e-12);
        worst = worst.max(diff.sqrt() / denom);
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 1], &[2.0, 3.0]));
    let c = g.matmul(id, b).unwrap();
    assert_eq!(g.value(c), &[2.0, 3.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.at(&[i, k]) * b.at(&[k, j]);
                }
            }
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_matmul_broadcasts_trailing_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 2, 4, 5], &mut rng);
    let b = random(&[2, 5, 3], &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let cv = g.matmul(av, bv).unwrap();
    let c = g.tensor(cv);
    assert_eq!(c.shape(), &[3, 2, 4, 3]);
    for m in 0..3 {
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    let e: f64 = (0..5).map(|k| a.at(&[m, h, i, k]) * b.at(&[h, k, j])).sum();
                    assert!((c.at(&[m, h, i, j]) - e).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f64>::zeros([2, 3]));
    let b = g.constant(Tensor::<f64>::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);

    let zero = g.constant(t(&[1], &[0.0]));
    let sg = g.sigmoid(zero);
    assert_eq!(g.value(sg), &[0.5]);

    let c = g.constant(t(&[4], &[3.0; 4]));
    let ln = g.layer_norm(c, 1e-5).unwrap();
    assert!(g.value(ln).iter().all(|&v| v == 0.0));

    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let e = g.elu(x);
    assert!((g.value(e)[0] - ((-1f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(&g.value(e)[1..], &[0.0, 2.0]);
}

#[test]
fn layout_ops_forward() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::from_fn([2, 3], |i| i as f64));
    let xt = g.transpose(x).unwrap();
    assert_eq!(g.shape(xt), &[3, 2]);
    assert_eq!(g.value(xt), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);

    let s = g.slice(x, 1, 1, 2).unwrap();
    assert_eq!(g.value(s), &[1.0, 2.0, 4.0, 5.0]);

    let c = g.concat(&[x, s], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 5]);
    assert_eq!(g.value(c), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]);

    let r = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.value(r), &[3.0, 5.0, 7.0]);
    let m = g.mean(x);
    assert_eq!(g.value(m), &[2.5]);

    assert!(matches!(g.slice(x, 2, 0, 1), Err(Error::Axis { .. })));
    assert!(g.reshape(x, &[4]).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param_owned(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let w = g.param_owned(t(&[1], &[0.0]));
    let s = g.sigmoid(w);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[0.25]);
}

#[test]
fn backward_on_non_scalar_is_a_contract_error() {
    let mut g = Graph::new();
    let x = g.param_owned(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shared_subexpressions_accumulate() {
    // loss = Σ (x + x)·x = 2 Σ x², dloss/dx = 4x
    let mut g = Graph::new();
    let x = g.param_owned(t(&[3], &[1.0, -2.0, 0.5]));
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap();
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[4.0, -8.0, 2.0]);
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    fn mlp(g: &mut Graph<'_, f64>, v: &[Var]) -> icm_core::Result<Var> {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.sigmoid(h);
        g.linear(h, v[3], Some(v[4]))
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[4, 3], &mut rng),
        random(&[3, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let err = fd_max_rel_err(mlp, &inputs);
    assert!(err < 1e-6, "relative error {err}");
}

macro_rules! fd_case {
    ($name:ident, $shapes:expr, $body:expr) => {
        #[test]
        fn $name() {
            let f: OpFn = $body;
            for seed in 0..3 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let inputs: Vec<Tensor<f64>> = $shapes.iter().map(|s: &&[usize]| random(s, &mut rng)).collect();
                let err = fd_max_rel_err(f, &inputs);
                assert!(err < 1e-6, "seed {seed}: relative error {err}");
            }
        }
    };
}

fd_case!(fd_add_broadcast, [&[2, 3, 4][..], &[3, 1][..]], |g, v| g.add(v[0], v[1]));
fd_case!(fd_sub_suffix, [&[2, 3][..], &[3][..]], |g, v| g.sub(v[0], v[1]));
fd_case!(fd_mul_general_broadcast, [&[2, 3, 4][..], &[2, 1, 4][..]], |g, v| g.mul(v[0], v[1]));
fd_case!(fd_div, [&[2, 3][..], &[2, 1][..]], |g, v| {
    // keep the divisor away from zero
    let d = g.square(v[1]);
    let d = g.add_scalar(d, 0.5);
    g.div(v[0], d)
});
fd_case!(fd_matmul_batched, [&[2, 3, 4][..], &[2, 4, 3][..]], |g, v| g.matmul(v[0], v[1]));
fd_case!(fd_matmul_broadcast_rhs, [&[2, 3, 4][..], &[4, 2][..]], |g, v| g.matmul(v[0], v[1]));
fd_case!(fd_softmax, [&[3, 5][..]], |g, v| g.softmax(v[0]));
fd_case!(fd_layer_norm, [&[3, 6][..]], |g, v| g.layer_norm(v[0], 1e-5));
fd_case!(fd_sigmoid, [&[7][..]], |g, v| Ok(g.sigmoid(v[0])));
fd_case!(fd_elu, [&[9][..]], |g, v| Ok(g.elu(v[0])));
fd_case!(fd_elu_plus_one, [&[9][..]], |g, v| Ok(g.elu_plus_one(v[0])));
fd_case!(fd_scale_square, [&[4][..]], |g, v| {
    let s = g.scale(v[0], -1.5);
    Ok(g.square(s))
});
fd_case!(fd_permute, [&[2, 3, 4][..]], |g, v| g.permute(v[0], &[2, 0, 1]));
fd_case!(fd_transpose_reshape, [&[2, 3, 4][..]], |g, v| {
    let x = g.transpose(v[0])?;
    g.reshape(x, &[6, 4])
});
fd_case!(fd_slice_concat, [&[2, 5][..], &[2, 3][..]], |g, v| {
    let s = g.slice(v[0], 1, 1, 3)?;
    g.concat(&[s, v[1], s], 1)
});
fd_case!(fd_stack, [&[2, 3][..], &[2, 3][..]], |g, v| g.stack(&[v[0], v[1]]));
fd_case!(fd_sum_axis, [&[2, 3, 4][..]], |g, v| g.sum_axis(v[0], 1));
fd_case!(fd_mean, [&[2, 3][..]], |g, v| {
    let m = g.mean(v[0]);
    Ok(g.square(m))
});
fd_case!(fd_mse, [&[2, 3][..], &[2, 3][..]], |g, v| g.mse(v[0], v[1]));

#[test]
fn relu_gradient_away_from_kink() {
    let mut g = Graph::new();
    let x = g.param_owned(t(&[4], &[-1.0, -0.1, 0.3, 2.0]));
    let y = g.relu(x);
    let l = g.sum(y);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[5, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let s = g.softmax(c).unwrap();
        g.tensor(s)
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn([rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax(xv).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.permute(xv, &[1, 2, 0]).unwrap();
        let z = g.permute(y, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(z), x.data());
    }

    #[test]
    fn elementwise_ops_match_finite_differences(seed in 0u64..200) {
        fn chain(g: &mut Graph<'_, f64>, v: &[Var]) -> icm_core::Result<Var> {
            let a = g.elu_plus_one(v[0]);
            let b = g.sigmoid(v[1]);
            let c = g.mul(a, b)?;
            let d = g.layer_norm(c, 1e-5)?;
            g.softmax(d)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[2, 4], &mut rng), random(&[2, 4], &mut rng)];
        let err = fd_max_rel_err(chain, &inputs);
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}
